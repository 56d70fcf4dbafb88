use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        OptimizerState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Checks that every moment matches its parameter's shape.
    pub fn check(&self, params: &ParamStore) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::contract("optimizer state does not match the parameter count"));
        }
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::contract(format!(
                    "optimizer moments for {} have the wrong shape",
                    p.name
                )));
            }
        }
        Ok(())
    }
}

/// One AdamW update. Decay is decoupled: `θ ← θ - lr·wd·θ` before the
/// bias-corrected Adam step. Frozen parameters are left alone. Any non-finite
/// gradient aborts before anything is modified.
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut ParamStore,
    grads: &[Tensor],
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.check(params)?;
    if grads.len() != params.len() {
        return Err(Error::contract("one gradient per parameter required"));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(Error::Dimension {
                op: "optimizer_step",
                lhs: g.shape().to_vec(),
                rhs: p.value.shape().to_vec(),
            });
        }
        if !p.frozen && !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.frozen {
            continue;
        }
        let it = p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut());
        for (((x, &g), m), v) in it {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *x -= lr * weight_decay * *x;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Scales trainable gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &ParamStore, grads: &mut [Tensor], max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .zip(grads.iter())
        .filter(|(p, _)| !p.frozen)
        .flat_map(|(_, g)| g.data())
        .map(|x| x * x)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (p, g) in params.iter().zip(grads.iter_mut()) {
            if !p.frozen {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}
