use super::tape::{Tape, Value};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub autodiff: Vec<f64>,
    pub finite_diff: Vec<f64>,
}

fn eval<F>(f: &F, p: Tensor, track: bool) -> Result<(Tape, Value, Value)>
where
    F: Fn(&mut Tape, Value) -> Result<Value>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(p, track);
    let y = f(&mut tape, x)?;
    let out = tape.value(y);
    if out.len() != 1 {
        return Err(Error::contract("grad_check needs a scalar function"));
    }
    if !out.item().is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    Ok((tape, x, y))
}

/// Compares the autodiff gradient of `f` at `p` to central differences with step `h`.
pub fn grad_check_report<F>(f: F, p: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Value) -> Result<Value>,
{
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let (mut tape, x, y) = eval(&f, p.clone(), true)?;
    let autodiff = if tape.requires_grad(y) {
        tape.backward(y)?;
        tape.grad(x)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; p.len()])
    } else {
        vec![0.0; p.len()]
    };
    let mut finite_diff = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let mut plus = p.clone();
        plus.data_mut()[i] += h;
        let mut minus = p.clone();
        minus.data_mut()[i] -= h;
        let (tp, _, yp) = eval(&f, plus, false)?;
        let (tm, _, ym) = eval(&f, minus, false)?;
        finite_diff.push((tp.value(yp).item() - tm.value(ym).item()) / (2.0 * h));
    }
    let max_rel_err = autodiff
        .iter()
        .zip(&finite_diff)
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-10))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        autodiff,
        finite_diff,
    })
}

/// Max over coordinates of `|autodiff - fd| / (|fd| + 1e-10)`.
pub fn grad_check<F>(f: F, p: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Value) -> Result<Value>,
{
    grad_check_report(f, p, h).map(|r| r.max_rel_err)
}
