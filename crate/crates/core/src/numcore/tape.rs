//! Reverse-mode autodiff over a flat, append-only tape.
//!
//! Every operation appends a node whose inputs are earlier nodes, so the
//! insertion order is already a topological order and `backward` is a single
//! reverse sweep.

use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Value(usize);

impl Value {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Scale(Value, f64),
    Linear {
        x: Value,
        w: Value,
        b: Option<Value>,
    },
    Concat(Value, Value),
    Gather {
        x: Value,
        index: Arc<[usize]>,
    },
    SegmentSum {
        x: Value,
        seg: Arc<[usize]>,
    },
    SegmentMean {
        x: Value,
        seg: Arc<[usize]>,
        counts: Arc<[usize]>,
    },
    ScatterRows {
        base: Value,
        rows: Value,
        index: Arc<[usize]>,
    },
    RowNorm(Value),
    ShiftedSoftplus(Value),
    Abs(Value),
    Sum(Value),
    Mean(Value),
    Gaussian {
        d: Value,
        centers: Arc<[f64]>,
        width: f64,
    },
    CosineCutoff {
        d: Value,
        cutoff: f64,
    },
    MulRows(Value, Value),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Owns every value of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN2: f64 = std::f64::consts::LN_2;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(0.5 e^x + 0.5)`, evaluated without overflow.
pub fn shifted_softplus(x: f64) -> f64 {
    softplus(x) - LN2
}

fn add_into(acc: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match acc {
        Some(a) => a.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        None => *acc = Some(contrib),
    }
}

fn acc_buf(acc: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    acc.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Value {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Value(self.nodes.len() - 1)
    }

    fn tracked(&self, vs: &[Value]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Value {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Value {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Value) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Value, b: Value) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Value, b: Value, op: Op, f: impl Fn(f64, f64) -> f64) -> Value {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape checked");
        let rg = self.tracked(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn map(&mut self, x: Value, op: Op, f: impl Fn(f64) -> f64) -> Value {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| f(*v)).collect()).expect("same length");
        let rg = self.tracked(&[x]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Value, c: f64) -> Value {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn shifted_softplus(&mut self, x: Value) -> Value {
        self.map(x, Op::ShiftedSoftplus(x), shifted_softplus)
    }

    pub fn abs(&mut self, x: Value) -> Value {
        self.map(x, Op::Abs(x), f64::abs)
    }

    pub fn sum(&mut self, x: Value) -> Value {
        let s = self.value(x).data().iter().sum();
        let rg = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Value) -> Result<Value> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let m = vx.data().iter().sum::<f64>() / vx.len() as f64;
        let rg = self.tracked(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    /// Row-wise affine map `x W + b`.
    pub fn linear(&mut self, x: Value, w: Value, b: Option<Value>) -> Result<Value> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::Dimension {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [dout] {
                return Err(Error::Dimension {
                    op: "linear bias",
                    lhs: ws,
                    rhs: bs.to_vec(),
                });
            }
        }
        let mut out = vec![0.0; n * dout];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for r in 0..n {
                let orow = &mut out[r * dout..(r + 1) * dout];
                if let Some(b) = b {
                    orow.copy_from_slice(self.nodes[b.0].value.data());
                }
                for i in 0..din {
                    let xi = xv[r * din + i];
                    if xi == 0.0 {
                        continue;
                    }
                    let wrow = &wv[i * dout..(i + 1) * dout];
                    for (o, wv) in orow.iter_mut().zip(wrow) {
                        *o += xi * wv;
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.tracked(&inputs);
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Concatenation along the feature axis of two row-aligned tensors.
    pub fn concat(&mut self, a: Value, b: Value) -> Result<Value> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::Dimension {
                op: "concat",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (n, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut out = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            out.extend_from_slice(va.row(r));
            out.extend_from_slice(vb.row(r));
        }
        let rg = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, ca + cb], out)?, Op::Concat(a, b), rg))
    }

    fn with_rows(shape: &[usize], rows: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        if s.is_empty() {
            s.push(rows);
        } else {
            s[0] = rows;
        }
        s
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather(&mut self, x: Value, index: Arc<[usize]>) -> Result<Value> {
        let vx = self.value(x);
        let (n, c) = (vx.rows(), vx.cols());
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i >= n {
                return Err(Error::Index {
                    what: "gather rows",
                    index: i,
                    bound: n,
                });
            }
            out.extend_from_slice(vx.row(i));
        }
        let shape = Self::with_rows(vx.shape(), index.len());
        let rg = self.tracked(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { x, index }, rg))
    }

    fn segment_accumulate(&self, x: Value, seg: &[usize], k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
        let vx = self.value(x);
        if seg.len() != vx.rows() {
            return Err(Error::Dimension {
                op: "segment",
                lhs: vx.shape().to_vec(),
                rhs: vec![seg.len()],
            });
        }
        let c = vx.cols();
        let mut out = vec![0.0; k * c];
        let mut counts = vec![0usize; k];
        for (r, &s) in seg.iter().enumerate() {
            if s >= k {
                return Err(Error::Index {
                    what: "segment id",
                    index: s,
                    bound: k,
                });
            }
            counts[s] += 1;
            for (o, v) in out[s * c..(s + 1) * c].iter_mut().zip(vx.row(r)) {
                *o += v;
            }
        }
        Ok((out, counts))
    }

    pub fn segment_sum(&mut self, x: Value, seg: Arc<[usize]>, k: usize) -> Result<Value> {
        let (out, _) = self.segment_accumulate(x, &seg, k)?;
        let shape = Self::with_rows(self.shape(x), k);
        let rg = self.tracked(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SegmentSum { x, seg }, rg))
    }

    /// Per-segment row mean; empty segments yield zero rows.
    pub fn segment_mean(&mut self, x: Value, seg: Arc<[usize]>, k: usize) -> Result<Value> {
        let (mut out, counts) = self.segment_accumulate(x, &seg, k)?;
        let c = self.value(x).cols();
        for (s, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                let inv = 1.0 / cnt as f64;
                out[s * c..(s + 1) * c].iter_mut().for_each(|v| *v *= inv);
            }
        }
        let shape = Self::with_rows(self.shape(x), k);
        let rg = self.tracked(&[x]);
        let counts: Arc<[usize]> = counts.into();
        Ok(self.push(Tensor::new(shape, out)?, Op::SegmentMean { x, seg, counts }, rg))
    }

    /// Copy of `base` with row `index[r]` replaced by row `r` of `rows`.
    pub fn scatter_rows(&mut self, base: Value, rows: Value, index: Arc<[usize]>) -> Result<Value> {
        let (vb, vr) = (self.value(base), self.value(rows));
        if vb.cols() != vr.cols() || vr.rows() != index.len() {
            return Err(Error::Dimension {
                op: "scatter_rows",
                lhs: vb.shape().to_vec(),
                rhs: vr.shape().to_vec(),
            });
        }
        let mut out = vb.clone();
        let n = vb.rows();
        for (r, &i) in index.iter().enumerate() {
            if i >= n {
                return Err(Error::Index {
                    what: "scatter rows",
                    index: i,
                    bound: n,
                });
            }
            out.row_mut(i).copy_from_slice(vr.row(r));
        }
        let rg = self.tracked(&[base, rows]);
        Ok(self.push(out, Op::ScatterRows { base, rows, index }, rg))
    }

    /// Euclidean norm of every row. The derivative at a zero row is zero.
    pub fn row_norm(&mut self, x: Value) -> Value {
        let vx = self.value(x);
        let out: Vec<f64> = (0..vx.rows())
            .map(|r| vx.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.tracked(&[x]);
        self.push(Tensor::vector(out), Op::RowNorm(x), rg)
    }

    /// Expands each entry of `d` into `exp(-(d - c_k)^2 / (2 width^2))` over all centers.
    pub fn gaussian_basis(&mut self, d: Value, centers: Arc<[f64]>, width: f64) -> Result<Value> {
        let vd = self.value(d);
        if vd.cols() != 1 {
            return Err(Error::Dimension {
                op: "gaussian_basis",
                lhs: vd.shape().to_vec(),
                rhs: vec![vd.rows(), 1],
            });
        }
        let k = centers.len();
        let inv = 1.0 / (2.0 * width * width);
        let mut out = Vec::with_capacity(vd.rows() * k);
        for &x in vd.data() {
            out.extend(centers.iter().map(|c| (-(x - c) * (x - c) * inv).exp()));
        }
        let shape = vec![vd.rows(), k];
        let rg = self.tracked(&[d]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gaussian { d, centers, width }, rg))
    }

    /// `0.5 (cos(pi d / rc) + 1)` below `rc`, zero beyond.
    pub fn cosine_cutoff(&mut self, d: Value, cutoff: f64) -> Result<Value> {
        if !(cutoff > 0.0) {
            return Err(Error::contract(format!("cutoff must be positive, got {cutoff}")));
        }
        let k = std::f64::consts::PI / cutoff;
        Ok(self.map(d, Op::CosineCutoff { d, cutoff }, |x| {
            if x < cutoff {
                0.5 * ((k * x).cos() + 1.0)
            } else {
                0.0
            }
        }))
    }

    /// Scales row `r` of `x` by `s[r]`.
    pub fn mul_rows(&mut self, x: Value, s: Value) -> Result<Value> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vs.len() != vx.rows() || vs.len() != vs.rows() {
            return Err(Error::Dimension {
                op: "mul_rows",
                lhs: vx.shape().to_vec(),
                rhs: vs.shape().to_vec(),
            });
        }
        let c = vx.cols();
        let mut out = vx.clone();
        for (r, f) in vs.data().iter().enumerate() {
            out.data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.tracked(&[x, s]);
        Ok(self.push(out, Op::MulRows(x, s), rg))
    }

    /// Accumulates d`loss`/d`v` into every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let top = loss.0;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; top + 1];
        grads[top] = Some(vec![1.0]);
        for i in (0..=top).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let rg = |v: &Value| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if rg(b) {
                    add_into(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if rg(a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if rg(b) {
                    add_into(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if rg(a) {
                    add_into(&mut grads[a.0], g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if rg(b) {
                    add_into(&mut grads[b.0], g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, c) => {
                add_into(&mut grads[x.0], g.iter().map(|v| v * c).collect());
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, din) = (xv.rows(), xv.cols());
                let dout = wv.cols();
                if rg(x) {
                    let buf = acc_buf(&mut grads[x.0], n * din);
                    for r in 0..n {
                        let grow = &g[r * dout..(r + 1) * dout];
                        for k in 0..din {
                            let wrow = &wv.data()[k * dout..(k + 1) * dout];
                            buf[r * din + k] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if rg(w) {
                    let buf = acc_buf(&mut grads[w.0], din * dout);
                    for r in 0..n {
                        let grow = &g[r * dout..(r + 1) * dout];
                        for k in 0..din {
                            let xk = xv.data()[r * din + k];
                            if xk == 0.0 {
                                continue;
                            }
                            for (o, gv) in buf[k * dout..(k + 1) * dout].iter_mut().zip(grow) {
                                *o += xk * gv;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if rg(b) {
                        let buf = acc_buf(&mut grads[b.0], dout);
                        for r in 0..n {
                            for (o, gv) in buf.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                                *o += gv;
                            }
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let n = self.value(*a).rows();
                if rg(a) {
                    let buf = acc_buf(&mut grads[a.0], n * ca);
                    for r in 0..n {
                        for (o, gv) in buf[r * ca..(r + 1) * ca].iter_mut().zip(&g[r * (ca + cb)..]) {
                            *o += gv;
                        }
                    }
                }
                if rg(b) {
                    let buf = acc_buf(&mut grads[b.0], n * cb);
                    for r in 0..n {
                        let src = &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)];
                        for (o, gv) in buf[r * cb..(r + 1) * cb].iter_mut().zip(src) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let buf = acc_buf(&mut grads[x.0], xv.len());
                for (r, &src) in index.iter().enumerate() {
                    for (o, gv) in buf[src * c..(src + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *o += gv;
                    }
                }
            }
            Op::SegmentSum { x, seg } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let buf = acc_buf(&mut grads[x.0], xv.len());
                for (r, &s) in seg.iter().enumerate() {
                    for (o, gv) in buf[r * c..(r + 1) * c].iter_mut().zip(&g[s * c..(s + 1) * c]) {
                        *o += gv;
                    }
                }
            }
            Op::SegmentMean { x, seg, counts } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let buf = acc_buf(&mut grads[x.0], xv.len());
                for (r, &s) in seg.iter().enumerate() {
                    let inv = 1.0 / counts[s] as f64;
                    for (o, gv) in buf[r * c..(r + 1) * c].iter_mut().zip(&g[s * c..(s + 1) * c]) {
                        *o += gv * inv;
                    }
                }
            }
            Op::ScatterRows { base, rows, index } => {
                let c = self.value(*base).cols();
                if rg(base) {
                    let mut gb = g.to_vec();
                    for &i in index.iter() {
                        gb[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                    }
                    add_into(&mut grads[base.0], gb);
                }
                if rg(rows) {
                    let buf = acc_buf(&mut grads[rows.0], index.len() * c);
                    for (r, &i) in index.iter().enumerate() {
                        for (o, gv) in buf[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let norms = node.value.data();
                let buf = acc_buf(&mut grads[x.0], xv.len());
                for (r, (&nrm, gv)) in norms.iter().zip(g).enumerate() {
                    if nrm > 0.0 {
                        let s = gv / nrm;
                        for (o, v) in buf[r * c..(r + 1) * c].iter_mut().zip(xv.row(r)) {
                            *o += s * v;
                        }
                    }
                }
            }
            Op::ShiftedSoftplus(x) => {
                let xv = self.value(*x).data();
                add_into(
                    &mut grads[x.0],
                    g.iter().zip(xv).map(|(g, v)| g * sigmoid(*v)).collect(),
                );
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                add_into(
                    &mut grads[x.0],
                    g.iter()
                        .zip(xv)
                        .map(|(g, v)| {
                            if *v > 0.0 {
                                *g
                            } else if *v < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                add_into(&mut grads[x.0], vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                add_into(&mut grads[x.0], vec![g[0] / n as f64; n]);
            }
            Op::Gaussian { d, centers, width } => {
                let dv = self.value(*d).data();
                let k = centers.len();
                let out = node.value.data();
                let inv = 1.0 / (width * width);
                let buf = acc_buf(&mut grads[d.0], dv.len());
                for (e, &x) in dv.iter().enumerate() {
                    let mut acc = 0.0;
                    for (j, c) in centers.iter().enumerate() {
                        acc += g[e * k + j] * out[e * k + j] * (-(x - c) * inv);
                    }
                    buf[e] += acc;
                }
            }
            Op::CosineCutoff { d, cutoff } => {
                let k = std::f64::consts::PI / cutoff;
                let dv = self.value(*d).data();
                add_into(
                    &mut grads[d.0],
                    g.iter()
                        .zip(dv)
                        .map(|(g, &x)| if x < *cutoff { -0.5 * k * (k * x).sin() * g } else { 0.0 })
                        .collect(),
                );
            }
            Op::MulRows(x, s) => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let c = vx.cols();
                if rg(x) {
                    let mut gx = g.to_vec();
                    for (r, f) in vs.data().iter().enumerate() {
                        gx[r * c..(r + 1) * c].iter_mut().for_each(|v| *v *= f);
                    }
                    add_into(&mut grads[x.0], gx);
                }
                if rg(s) {
                    let gs = (0..vs.len())
                        .map(|r| g[r * c..(r + 1) * c].iter().zip(vx.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    add_into(&mut grads[s.0], gs);
                }
            }
        }
    }
}
