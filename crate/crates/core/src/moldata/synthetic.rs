//! Synthetic long-range benchmark: uncut Coulomb plus Lennard-Jones on random
//! point clouds in a 12 Å box.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::molecule::Molecule;
use crate::error::{Error, Result};

pub const BOX_LENGTH: f64 = 12.0;
pub const MIN_SEPARATION: f64 = 0.8;
pub const LJ_SIGMA: f64 = 1.5;
pub const ELEMENTS: [u32; 4] = [1, 6, 7, 8];
const MAX_ATTEMPTS: usize = 10_000;

/// Partial charge used by the synthetic energy (H, C, N, O).
pub fn partial_charge(z: u32) -> Option<f64> {
    match z {
        1 => Some(0.2),
        6 => Some(-0.1),
        7 => Some(0.3),
        8 => Some(-0.4),
        _ => None,
    }
}

/// Energy and its negative gradient, summed over all pairs without cutoff.
pub fn synthetic_energy_forces(z: &[u32], positions: &[[f64; 3]]) -> Result<(f64, Vec<[f64; 3]>)> {
    let q: Vec<f64> = z
        .iter()
        .map(|&z| partial_charge(z).ok_or_else(|| Error::Data(format!("no synthetic charge for Z={z}"))))
        .collect::<Result<_>>()?;
    let n = z.len();
    let s6 = LJ_SIGMA.powi(6);
    let mut energy = 0.0;
    let mut forces = vec![[0.0; 3]; n];
    for i in 0..n {
        for j in i + 1..n {
            let dv = [
                positions[i][0] - positions[j][0],
                positions[i][1] - positions[j][1],
                positions[i][2] - positions[j][2],
            ];
            let d2 = dv[0] * dv[0] + dv[1] * dv[1] + dv[2] * dv[2];
            let d = d2.sqrt();
            let inv6 = s6 / (d2 * d2 * d2);
            let qq = q[i] * q[j];
            energy += qq / d + inv6 * inv6 - 2.0 * inv6;
            // dE/dd
            let de = -qq / d2 + (-12.0 * inv6 * inv6 + 12.0 * inv6) / d;
            for c in 0..3 {
                let f = -de * dv[c] / d;
                forces[i][c] += f;
                forces[j][c] -= f;
            }
        }
    }
    Ok((energy, forces))
}

/// Rejection-samples `n` points with the minimum separation, drawing an element
/// after each accepted point. On failure returns how many atoms were placed.
fn place_atoms(rng: &mut ChaCha8Rng, n: usize, box_len: f64, z: &mut Vec<u32>) -> Result<Vec<[f64; 3]>, usize> {
    let mut positions: Vec<[f64; 3]> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let p = [
                rng.random_range(0.0..box_len),
                rng.random_range(0.0..box_len),
                rng.random_range(0.0..box_len),
            ];
            let ok = positions.iter().all(|o| {
                let d2 = (p[0] - o[0]).powi(2) + (p[1] - o[1]).powi(2) + (p[2] - o[2]).powi(2);
                d2 >= MIN_SEPARATION * MIN_SEPARATION
            });
            if ok {
                positions.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(positions.len());
        }
        z.push(ELEMENTS[rng.random_range(0..ELEMENTS.len())]);
    }
    Ok(positions)
}

/// Deterministic synthetic dataset; atom counts drawn uniformly from `[min, max]`.
pub fn make_synthetic(n_molecules: usize, n_atoms_range: [usize; 2], seed: u64) -> Result<Vec<Molecule>> {
    let [lo, hi] = n_atoms_range;
    if lo < 2 || hi < lo {
        return Err(Error::contract(format!("invalid atom-count range [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_molecules);
    for m in 0..n_molecules {
        let n = rng.random_range(lo..=hi);
        let mut z = Vec::with_capacity(n);
        let positions = place_atoms(&mut rng, n, BOX_LENGTH, &mut z).map_err(|placed| {
            Error::Generation(format!(
                "molecule {m}: could not place atom {placed} after {MAX_ATTEMPTS} attempts"
            ))
        })?;
        let (energy, forces) = synthetic_energy_forces(&z, &positions)?;
        out.push(Molecule::new(z, positions)?.with_targets(energy, Some(forces))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_charges_closed_form() {
        let (e, f) = synthetic_energy_forces(&[1, 1], &[[0.0; 3], [0.0, 0.0, 2.0]]).unwrap();
        let coulomb: f64 = 0.2 * 0.2 / 2.0;
        assert!((coulomb - 0.02).abs() < 1e-15);
        let x: f64 = 1.5 / 2.0;
        let lj = x.powi(12) - 2.0 * x.powi(6);
        assert!((e - (coulomb + lj)).abs() < 1e-14);
        assert!((f[0][2] + f[1][2]).abs() < 1e-14);
    }

    #[test]
    fn forces_match_finite_differences() {
        let mols = make_synthetic(20, [2, 10], 7).unwrap();
        let h = 1e-6;
        for m in &mols {
            let f = m.forces.as_ref().unwrap();
            let fmax = f.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
            let mut worst = 0.0f64;
            for i in 0..m.len() {
                for c in 0..3 {
                    let mut p = m.positions.clone();
                    p[i][c] += h;
                    let (ep, _) = synthetic_energy_forces(&m.z, &p).unwrap();
                    p[i][c] -= 2.0 * h;
                    let (em, _) = synthetic_energy_forces(&m.z, &p).unwrap();
                    let fd = -(ep - em) / (2.0 * h);
                    worst = worst.max((fd - f[i][c]).abs());
                }
            }
            assert!(worst <= 1e-7 * fmax.max(1.0), "worst {worst} vs scale {fmax}");
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = make_synthetic(16, [3, 9], 42).unwrap();
        let b = make_synthetic(16, [3, 9], 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_synthetic(16, [3, 9], 43).unwrap());
        for m in &a {
            assert!((3..=9).contains(&m.len()));
            assert!(m.z.iter().all(|z| ELEMENTS.contains(z)));
            for i in 0..m.len() {
                assert!(m.positions[i].iter().all(|x| (0.0..BOX_LENGTH).contains(x)));
                for j in 0..i {
                    let d2: f64 = (0..3).map(|c| (m.positions[i][c] - m.positions[j][c]).powi(2)).sum();
                    assert!(d2.sqrt() >= MIN_SEPARATION);
                }
            }
        }
    }

    #[test]
    fn infeasible_packing_is_reported() {
        // a 1 Å box holds at most a handful of atoms 0.8 Å apart
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut z = Vec::new();
        let placed = place_atoms(&mut rng, 50, 1.0, &mut z).unwrap_err();
        assert!(placed < 50 && z.len() == placed);
        assert!(matches!(make_synthetic(1, [1, 3], 0), Err(Error::Contract(_))));
    }
}
