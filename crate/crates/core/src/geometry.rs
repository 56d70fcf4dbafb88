//! Neighbor lists, differentiable distances and Gaussian radial bases.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::moldata::Batch;
use crate::numcore::{Tape, Value};

/// Directed edges; atom-atom lists contain both directions and no self loops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeList {
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
}

impl EdgeList {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Gaussian basis: `n_rbf` centers evenly spaced on `[0, gamma]`, width `gamma / n_rbf`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RbfSpec {
    pub gamma: f64,
    pub n_rbf: usize,
}

impl RbfSpec {
    pub fn new(gamma: f64, n_rbf: usize) -> Result<Self> {
        if !(gamma > 0.0) || n_rbf == 0 {
            return Err(Error::contract(format!("invalid RBF spec gamma={gamma} n_rbf={n_rbf}")));
        }
        Ok(RbfSpec { gamma, n_rbf })
    }

    pub fn centers(&self) -> Vec<f64> {
        if self.n_rbf == 1 {
            return vec![0.0];
        }
        let step = self.gamma / (self.n_rbf - 1) as f64;
        (0..self.n_rbf).map(|k| k as f64 * step).collect()
    }

    pub fn width(&self) -> f64 {
        self.gamma / self.n_rbf as f64
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// All ordered intra-graph pairs within `cutoff`, sorted by source then destination.
pub fn neighbor_list(batch: &Batch, cutoff: f64) -> Result<EdgeList> {
    if !(cutoff > 0.0) {
        return Err(Error::contract(format!("cutoff must be positive, got {cutoff}")));
    }
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for g in 0..batch.n_graphs {
        let atoms = batch.atoms_of(g);
        for i in atoms.clone() {
            for j in atoms.clone() {
                if i != j && dist(&batch.positions[i], &batch.positions[j]) <= cutoff {
                    src.push(i);
                    dst.push(j);
                }
            }
        }
    }
    Ok(EdgeList {
        src: src.into(),
        dst: dst.into(),
    })
}

/// `‖r_src − r_dst‖` per edge, differentiable in the positions.
pub fn edge_distances(tape: &mut Tape, positions: Value, edges: &EdgeList) -> Result<Value> {
    pair_distances(tape, positions, edges.src.clone(), positions, edges.dst.clone())
}

/// Row-wise distance between `a[ia[k]]` and `b[ib[k]]`.
pub fn pair_distances(tape: &mut Tape, a: Value, ia: Arc<[usize]>, b: Value, ib: Arc<[usize]>) -> Result<Value> {
    let ra = tape.gather(a, ia)?;
    let rb = tape.gather(b, ib)?;
    let diff = tape.sub(ra, rb)?;
    Ok(tape.row_norm(diff))
}

/// `[E] -> [E x n_rbf]` with entry `exp(-(d - mu_k)^2 / (2 s^2))`.
pub fn rbf_expand(tape: &mut Tape, d: Value, spec: &RbfSpec) -> Result<Value> {
    tape.gaussian_basis(d, spec.centers().into(), spec.width())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::moldata::{batch, Molecule};
    use crate::numcore::{grad_check_report, Tensor};

    fn two_atoms(d: f64) -> Batch {
        batch(&[Molecule::new(vec![1, 1], vec![[0.0; 3], [d, 0.0, 0.0]]).unwrap()]).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, sizes: &[usize], side: f64) -> Batch {
        let mols: Vec<Molecule> = sizes
            .iter()
            .map(|&n| {
                let pos = (0..n)
                    .map(|_| {
                        [
                            rng.random_range(0.0..side),
                            rng.random_range(0.0..side),
                            rng.random_range(0.0..side),
                        ]
                    })
                    .collect();
                Molecule::new(vec![6; n], pos).unwrap()
            })
            .collect();
        batch(&mols).unwrap()
    }

    #[test]
    fn pair_inside_and_outside_cutoff() {
        let e = neighbor_list(&two_atoms(3.0), 6.0).unwrap();
        assert_eq!((&*e.src, &*e.dst), (&[0, 1][..], &[1, 0][..]));
        assert!(neighbor_list(&two_atoms(7.0), 6.0).unwrap().is_empty());
        assert!(neighbor_list(&two_atoms(1.0), 0.0).is_err());
    }

    #[test]
    fn matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_batch(&mut rng, &[20], 8.0);
        let e = neighbor_list(&b, 4.0).unwrap();
        let mut brute = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                let d = dist(&b.positions[i], &b.positions[j]);
                if i != j && d <= 4.0 {
                    brute.push((i, j));
                }
            }
        }
        let got: Vec<(usize, usize)> = e.src.iter().copied().zip(e.dst.iter().copied()).collect();
        assert_eq!(got, brute);
    }

    #[test]
    fn never_crosses_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = random_batch(&mut rng, &[5, 7, 3], 3.0);
        let e = neighbor_list(&b, 10.0).unwrap();
        for (s, d) in e.src.iter().zip(e.dst.iter()) {
            assert_eq!(b.graph_index[*s], b.graph_index[*d]);
        }
        assert_eq!(e.len(), 5 * 4 + 7 * 6 + 3 * 2);
    }

    #[test]
    fn distances_and_gradients() {
        let b = batch(&[Molecule::new(vec![1, 1], vec![[0.0; 3], [0.0, 0.0, 2.0]]).unwrap()]).unwrap();
        let e = neighbor_list(&b, 6.0).unwrap();
        let mut t = Tape::new();
        let r = t.leaf(Tensor::from_rows(&b.positions), true);
        let d = edge_distances(&mut t, r, &e).unwrap();
        assert_eq!(t.value(d).data(), &[2.0, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let b = random_batch(&mut rng, &[9], 5.0);
        let e = neighbor_list(&b, 4.0).unwrap();
        let rep = grad_check_report(
            |t, r| {
                let d = edge_distances(t, r, &e)?;
                Ok(t.sum(d))
            },
            &Tensor::from_rows(&b.positions),
            1e-5,
        )
        .unwrap();
        let scale = rep.finite_diff.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for (a, n) in rep.autodiff.iter().zip(&rep.finite_diff) {
            assert!((a - n).abs() <= 1e-8 * scale, "{a} vs {n}");
        }
    }

    #[test]
    fn coincident_points_have_zero_gradient() {
        let mut t = Tape::new();
        let r = t.leaf(Tensor::from_rows(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]), true);
        let d = pair_distances(&mut t, r, Arc::from(vec![0]), r, Arc::from(vec![1])).unwrap();
        assert_eq!(t.value(d).data(), &[0.0]);
        let s = t.sum(d);
        t.backward(s).unwrap();
        assert!(t.grad(r).unwrap().data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn rbf_endpoints_and_formula() {
        let spec = RbfSpec::new(4.0, 4).unwrap();
        let mut t = Tape::new();
        let d = t.constant(Tensor::vector(vec![0.0, 4.0]));
        let ev = rbf_expand(&mut t, d, &spec).unwrap();
        let e = t.value(ev).clone();
        assert_eq!(e.row(0)[0], 1.0);
        assert!(e.row(0).windows(2).all(|w| w[1] < w[0]));
        assert_eq!(e.row(1)[3], 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = RbfSpec::new(6.0, 32).unwrap();
        let ds: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..8.0)).collect();
        let mut t = Tape::new();
        let d = t.constant(Tensor::vector(ds.clone()));
        let ev = rbf_expand(&mut t, d, &spec).unwrap();
        let e = t.value(ev).clone();
        let s = 6.0 / 32.0;
        for (i, x) in ds.iter().enumerate() {
            for k in 0..32 {
                let mu = k as f64 * 6.0 / 31.0;
                let direct = (-(x - mu).powi(2) / (2.0 * s * s)).exp();
                assert!((e.row(i)[k] - direct).abs() <= 1e-14);
            }
        }
    }

    fn rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
        // random unit quaternion
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - z * w),
                2.0 * (x * z + y * w),
            ],
            [
                2.0 * (x * y + z * w),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - x * w),
            ],
            [
                2.0 * (x * z - y * w),
                2.0 * (y * z + x * w),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn rigid_motion_keeps_edges(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_batch(&mut rng, &[12], 6.0);
            let q = rotation(&mut rng);
            let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
            let moved: Vec<[f64; 3]> = b.positions.iter()
                .map(|p| std::array::from_fn(|r| (0..3).map(|c| q[r][c] * p[c]).sum::<f64>() + t[r]))
                .collect();
            let b2 = b.with_positions(moved).unwrap();
            // cutoff chosen away from any pair distance to avoid boundary round-off
            let mut ds: Vec<f64> = Vec::new();
            for i in 0..12 { for j in 0..i { ds.push(dist(&b.positions[i], &b.positions[j])); } }
            prop_assume!(ds.iter().all(|d| (d - 3.5).abs() > 1e-9));
            prop_assert_eq!(neighbor_list(&b, 3.5).unwrap(), neighbor_list(&b2, 3.5).unwrap());
        }

        #[test]
        fn rbf_in_unit_interval_peaks_at_nearest_center(d in 0.0f64..6.0) {
            let spec = RbfSpec::new(6.0, 16).unwrap();
            let mut t = Tape::new();
            let dv = t.constant(Tensor::vector(vec![d]));
            let ev = rbf_expand(&mut t, dv, &spec).unwrap();
        let e = t.value(ev).clone();
            prop_assert!(e.data().iter().all(|v| *v > 0.0 && *v <= 1.0));
            let centers = spec.centers();
            let nearest = (0..16).min_by(|&a, &b| (centers[a] - d).abs().total_cmp(&(centers[b] - d).abs())).unwrap();
            let argmax = (0..16).max_by(|&a, &b| e.data()[a].total_cmp(&e.data()[b])).unwrap();
            prop_assert_eq!(nearest, argmax);
        }

        #[test]
        fn distances_permutation_equivariant(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_batch(&mut rng, &[8], 5.0);
            let e = neighbor_list(&b, 10.0).unwrap();
            let mut perm: Vec<usize> = (0..8).collect();
            for i in (1..8).rev() { perm.swap(i, rng.random_range(0..=i)); }
            // new atom perm[i] holds old atom i
            let mut newpos = vec![[0.0; 3]; 8];
            for i in 0..8 { newpos[perm[i]] = b.positions[i]; }
            let e2 = EdgeList {
                src: e.src.iter().map(|s| perm[*s]).collect(),
                dst: e.dst.iter().map(|s| perm[*s]).collect(),
            };
            let mut t = Tape::new();
            let r1 = t.constant(Tensor::from_rows(&b.positions));
            let r2 = t.constant(Tensor::from_rows(&newpos));
            let d1 = edge_distances(&mut t, r1, &e).unwrap();
            let d2 = edge_distances(&mut t, r2, &e2).unwrap();
            prop_assert_eq!(t.value(d1), t.value(d2));
        }
    }
}
