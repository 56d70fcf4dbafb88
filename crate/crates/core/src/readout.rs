//! Energy heads, conservative forces and training losses.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardOutput, Model, Normalization};
use crate::error::{Error, Result};
use crate::geometry::neighbor_list;
use crate::hierarchy::Hierarchy;
use crate::moldata::Batch;
use crate::numcore::{Bindings, Tape, Tensor, Value};

pub const LAMBDA_E: f64 = 0.01;
pub const LAMBDA_F: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// mean |E - E*| over graphs
    EnergyL1,
    /// `λ_E mean((E - E*)²) + λ_F mean((F - F*)²)` over graphs and force components
    EnergyForceMse,
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy_l1" => Ok(LossMode::EnergyL1),
            "energy_force_mse" => Ok(LossMode::EnergyForceMse),
            _ => Err(Error::Config(format!("unknown loss mode {s:?}"))),
        }
    }
}

impl LossMode {
    pub fn needs_forces(self) -> bool {
        self == LossMode::EnergyForceMse
    }
}

/// Per-graph energies as tape values, each `[G x 1]`, plus per-atom `[N x 1]`.
#[derive(Clone, Copy, Debug)]
pub struct EnergyTerms {
    pub total: Value,
    pub atomic: Value,
    pub cluster: Value,
    pub per_atom: Value,
}

/// Atomic head on every atom, cluster head on each graph's coarsest clusters,
/// summed per graph and mapped to meV.
pub fn energy(
    tape: &mut Tape,
    bind: &mut Bindings,
    model: &Model,
    out: &ForwardOutput,
    batch: &Batch,
) -> Result<EnergyTerms> {
    let g = batch.n_graphs;
    let Normalization { scale, shift } = model.norm;
    let e_i = model.mlp(tape, bind, "head.atom", out.h_atoms)?;
    let raw_atomic = tape.segment_sum(e_i, batch.graph_index.as_slice().into(), g)?;
    let scaled = tape.scale(raw_atomic, scale);
    let offsets = tape.constant(Tensor::matrix(
        g,
        1,
        batch.counts().iter().map(|&n| shift * n as f64).collect(),
    )?);
    let atomic = tape.add(scaled, offsets)?;
    let cluster = match out.h_clusters {
        Some(hc) => {
            let e_c = model.mlp(tape, bind, "mcgm.head.cluster", hc)?;
            let raw = tape.segment_sum(e_c, out.cluster_graph.clone(), g)?;
            tape.scale(raw, scale)
        }
        None => tape.constant(Tensor::zeros(vec![g, 1])),
    };
    let total = tape.add(atomic, cluster)?;
    let per_scaled = tape.scale(e_i, scale);
    let per_shift = tape.constant(Tensor::matrix(batch.n_atoms(), 1, vec![shift; batch.n_atoms()])?);
    let per_atom = tape.add(per_scaled, per_shift)?;
    Ok(EnergyTerms {
        total,
        atomic,
        cluster,
        per_atom,
    })
}

/// `-∂(Σ E)/∂R` by one reverse sweep.
pub fn forces(tape: &mut Tape, total: Value, positions: Value) -> Result<Tensor> {
    if !tape.requires_grad(positions) {
        return Err(Error::contract(
            "positions are not tracked; forces need a differentiable R",
        ));
    }
    let s = tape.sum(total);
    tape.backward(s)?;
    let g = tape
        .grad(positions)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(tape.shape(positions).to_vec()));
    Ok(Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| -v).collect())?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// meV per graph
    pub energy: Vec<f64>,
    pub energy_atomic: Vec<f64>,
    pub energy_cluster: Vec<f64>,
    /// meV per atom (atomic head only)
    pub atom_energies: Vec<f64>,
    /// meV/Å
    pub forces: Option<Vec<[f64; 3]>>,
}

impl Prediction {
    /// Per-graph lines `id energy_meV energy_atomic energy_cluster`, then an
    /// optional `id atom fx fy fz` block.
    pub fn dump(&self, batch: &Batch) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        for g in 0..self.energy.len() {
            let _ = writeln!(
                s,
                "{} {:?} {:?} {:?}",
                batch.graph_ids[g], self.energy[g], self.energy_atomic[g], self.energy_cluster[g]
            );
        }
        if let Some(f) = &self.forces {
            for g in 0..batch.n_graphs {
                for (k, i) in batch.atoms_of(g).enumerate() {
                    let _ = writeln!(
                        s,
                        "{} {} {:?} {:?} {:?}",
                        batch.graph_ids[g], k, f[i][0], f[i][1], f[i][2]
                    );
                }
            }
        }
        s
    }
}

/// Inference on frozen parameters.
pub fn predict(model: &Model, batch: &Batch, hierarchy: Option<&Hierarchy>, with_forces: bool) -> Result<Prediction> {
    let mut tape = Tape::new();
    let mut bind = Bindings::new(&model.params, false);
    let pos = tape.leaf(Tensor::from_rows(&batch.positions), with_forces);
    let out = model.forward(&mut tape, &mut bind, batch, hierarchy, pos, None)?;
    let terms = energy(&mut tape, &mut bind, model, &out, batch)?;
    let col = |t: &Tape, v: Value| t.value(v).data().to_vec();
    let energy = col(&tape, terms.total);
    if energy.iter().any(|e| !e.is_finite()) {
        return Err(Error::Numeric("non-finite predicted energy".into()));
    }
    let energy_atomic = col(&tape, terms.atomic);
    let energy_cluster = col(&tape, terms.cluster);
    let atom_energies = col(&tape, terms.per_atom);
    let forces = if with_forces {
        let f = forces(&mut tape, terms.total, pos)?;
        if !f.is_finite() {
            return Err(Error::Numeric("non-finite predicted forces".into()));
        }
        Some(f.to_rows3())
    } else {
        None
    };
    Ok(Prediction {
        energy,
        energy_atomic,
        energy_cluster,
        atom_energies,
        forces,
    })
}

fn targets(batch: &Batch, mode: LossMode) -> Result<(&[f64], Option<&[[f64; 3]]>)> {
    let e = batch
        .energies
        .as_deref()
        .ok_or_else(|| Error::Data("energy targets missing".into()))?;
    let f = match mode {
        LossMode::EnergyL1 => None,
        LossMode::EnergyForceMse => Some(
            batch
                .forces
                .as_deref()
                .ok_or_else(|| Error::Data("force targets required by energy_force_mse".into()))?,
        ),
    };
    Ok((e, f))
}

/// Loss as a tape value. Predicted forces enter as constants.
pub fn loss(
    tape: &mut Tape,
    total: Value,
    pred_forces: Option<&Tensor>,
    batch: &Batch,
    mode: LossMode,
) -> Result<Value> {
    let (e_star, f_star) = targets(batch, mode)?;
    let tgt = tape.constant(Tensor::matrix(e_star.len(), 1, e_star.to_vec())?);
    let diff = tape.sub(total, tgt)?;
    match mode {
        LossMode::EnergyL1 => {
            let a = tape.abs(diff);
            tape.mean(a)
        }
        LossMode::EnergyForceMse => {
            let f = pred_forces.ok_or_else(|| Error::contract("force loss needs predicted forces"))?;
            let sq = tape.mul(diff, diff)?;
            let le = tape.mean(sq)?;
            let le = tape.scale(le, LAMBDA_E);
            let lf = force_mse(f.data(), f_star.expect("checked"));
            let lf = tape.constant(Tensor::scalar(LAMBDA_F * lf));
            tape.add(le, lf)
        }
    }
}

fn force_mse(pred: &[f64], target: &[[f64; 3]]) -> f64 {
    let t = target.iter().flatten();
    pred.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len().max(1) as f64
}

/// Loss of an existing prediction, in plain arithmetic.
pub fn loss_value(pred: &Prediction, batch: &Batch, mode: LossMode) -> Result<f64> {
    let (e_star, f_star) = targets(batch, mode)?;
    let n = e_star.len() as f64;
    match mode {
        LossMode::EnergyL1 => Ok(pred.energy.iter().zip(e_star).map(|(a, b)| (a - b).abs()).sum::<f64>() / n),
        LossMode::EnergyForceMse => {
            let f = pred
                .forces
                .as_ref()
                .ok_or_else(|| Error::contract("force loss needs predicted forces"))?;
            let le = pred
                .energy
                .iter()
                .zip(e_star)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n;
            let flat: Vec<f64> = f.iter().flatten().copied().collect();
            Ok(LAMBDA_E * le + LAMBDA_F * force_mse(&flat, f_star.expect("checked")))
        }
    }
}

/// Loss, parameter gradients (store order) and the prediction they came from.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub prediction: Prediction,
}

/// Largest atom displacement of the finite-difference probe used for the
/// force-loss gradient (Å).
pub const FORCE_PROBE: f64 = 1e-4;

fn param_grad_of_energy(
    model: &Model,
    batch: &Batch,
    hierarchy: Option<&Hierarchy>,
    positions: Vec<[f64; 3]>,
) -> Result<Vec<Tensor>> {
    let edges = neighbor_list(batch, model.config.atom_cutoff)?;
    let moved = batch.with_positions(positions)?;
    let mut tape = Tape::new();
    let mut bind = Bindings::new(&model.params, true);
    let pos = tape.constant(Tensor::from_rows(&moved.positions));
    let out = model.forward(&mut tape, &mut bind, &moved, hierarchy, pos, Some(&edges))?;
    let terms = energy(&mut tape, &mut bind, model, &out, &moved)?;
    let s = tape.sum(terms.total);
    tape.backward(s)?;
    Ok(bind.grads(&tape))
}

/// Gradient of the loss with respect to every parameter.
///
/// In force mode the force term's parameter gradient is a Hessian-vector
/// product: with `v = F - F*`, `∂L_F/∂θ = -(2 λ_F / 3N) ∂/∂θ (v · ∇_R E)`,
/// evaluated by central differences of `∇_θ E` along `v` on the fixed
/// neighbor list and hierarchy.
pub fn loss_and_grad(model: &Model, batch: &Batch, hierarchy: Option<&Hierarchy>, mode: LossMode) -> Result<LossGrad> {
    let mut tape = Tape::new();
    let mut bind = Bindings::new(&model.params, true);
    let pos = tape.leaf(Tensor::from_rows(&batch.positions), mode.needs_forces());
    let out = model.forward(&mut tape, &mut bind, batch, hierarchy, pos, None)?;
    let terms = energy(&mut tape, &mut bind, model, &out, batch)?;
    let pred_forces = if mode.needs_forces() {
        let f = forces(&mut tape, terms.total, pos)?;
        tape.zero_grad();
        Some(f)
    } else {
        None
    };
    let l = loss(&mut tape, terms.total, pred_forces.as_ref(), batch, mode)?;
    let loss_v = tape.value(l).item();
    if !loss_v.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    tape.backward(l)?;
    let mut grads = bind.grads(&tape);

    if let (Some(f), Some(f_star)) = (&pred_forces, batch.forces.as_ref()) {
        let v: Vec<[f64; 3]> = f
            .to_rows3()
            .iter()
            .zip(f_star)
            .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
            .collect();
        let vmax = v.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        if vmax > 0.0 {
            let eps = FORCE_PROBE / vmax;
            let shifted = |sign: f64| -> Vec<[f64; 3]> {
                batch
                    .positions
                    .iter()
                    .zip(&v)
                    .map(|(r, d)| {
                        [
                            r[0] + sign * eps * d[0],
                            r[1] + sign * eps * d[1],
                            r[2] + sign * eps * d[2],
                        ]
                    })
                    .collect()
            };
            let gp = param_grad_of_energy(model, batch, hierarchy, shifted(1.0))?;
            let gm = param_grad_of_energy(model, batch, hierarchy, shifted(-1.0))?;
            let c = LAMBDA_F * 2.0 / (3.0 * batch.n_atoms() as f64);
            let k = -c / (2.0 * eps);
            for ((g, p), m) in grads.iter_mut().zip(&gp).zip(&gm) {
                for ((o, a), b) in g.data_mut().iter_mut().zip(p.data()).zip(m.data()) {
                    *o += k * (a - b);
                }
            }
        }
    }

    let col = |v: Value| tape.value(v).data().to_vec();
    let prediction = Prediction {
        energy: col(terms.total),
        energy_atomic: col(terms.atomic),
        energy_cluster: col(terms.cluster),
        atom_energies: col(terms.per_atom),
        forces: pred_forces.map(|f| f.to_rows3()),
    };
    Ok(LossGrad {
        loss: loss_v,
        grads,
        prediction,
    })
}

#[cfg(test)]
mod tests;
