use super::molecule::Molecule;
use crate::error::{Error, Result};

/// Molecules concatenated along the atom axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub z: Vec<u32>,
    pub positions: Vec<[f64; 3]>,
    /// Per-atom graph id, non-decreasing.
    pub graph_index: Vec<usize>,
    pub n_graphs: usize,
    /// Dataset ordinal of every graph; seeds per-graph clustering.
    pub graph_ids: Vec<u64>,
    pub energies: Option<Vec<f64>>,
    pub forces: Option<Vec<[f64; 3]>>,
    offsets: Vec<usize>,
}

impl Batch {
    pub fn n_atoms(&self) -> usize {
        self.z.len()
    }

    /// Atom range of graph `g`.
    pub fn atoms_of(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn with_graph_ids(mut self, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != self.n_graphs {
            return Err(Error::contract("one graph id per molecule required"));
        }
        self.graph_ids = ids;
        Ok(self)
    }

    /// Same batch with new positions (same atom order).
    pub fn with_positions(&self, positions: Vec<[f64; 3]>) -> Result<Self> {
        if positions.len() != self.n_atoms() {
            return Err(Error::contract("position count differs from atom count"));
        }
        let mut b = self.clone();
        b.positions = positions;
        Ok(b)
    }

    pub fn unbatch(&self) -> Vec<Molecule> {
        (0..self.n_graphs)
            .map(|g| {
                let r = self.atoms_of(g);
                Molecule {
                    z: self.z[r.clone()].to_vec(),
                    positions: self.positions[r.clone()].to_vec(),
                    energy: self.energies.as_ref().map(|e| e[g]),
                    forces: self.forces.as_ref().map(|f| f[r].to_vec()),
                }
            })
            .collect()
    }
}

/// Concatenates molecules in order; graph ids default to `0..n`.
pub fn batch<M: std::borrow::Borrow<Molecule>>(molecules: &[M]) -> Result<Batch> {
    if molecules.is_empty() {
        return Err(Error::contract("cannot batch an empty list"));
    }
    let total: usize = molecules.iter().map(|m| m.borrow().len()).sum();
    let mut z = Vec::with_capacity(total);
    let mut positions = Vec::with_capacity(total);
    let mut graph_index = Vec::with_capacity(total);
    let mut offsets = vec![0];
    let all_energy = molecules.iter().all(|m| m.borrow().energy.is_some());
    let all_forces = molecules.iter().all(|m| m.borrow().forces.is_some());
    let mut energies = Vec::new();
    let mut forces = Vec::new();
    for (g, m) in molecules.iter().enumerate() {
        let m = m.borrow();
        m.validate()?;
        z.extend_from_slice(&m.z);
        positions.extend_from_slice(&m.positions);
        graph_index.extend(std::iter::repeat_n(g, m.len()));
        offsets.push(z.len());
        if all_energy {
            energies.push(m.energy.unwrap_or_default());
        }
        if all_forces {
            forces.extend_from_slice(m.forces.as_deref().unwrap_or_default());
        }
    }
    Ok(Batch {
        z,
        positions,
        graph_index,
        n_graphs: molecules.len(),
        graph_ids: (0..molecules.len() as u64).collect(),
        energies: all_energy.then_some(energies),
        forces: all_forces.then_some(forces),
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moldata::make_synthetic;

    fn mol(n: usize) -> Molecule {
        Molecule::new(vec![1; n], (0..n).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap()
    }

    #[test]
    fn graph_index_layout() {
        let b = batch(&[mol(3), mol(2)]).unwrap();
        assert_eq!(b.graph_index, vec![0, 0, 0, 1, 1]);
        assert_eq!(b.counts(), vec![3, 2]);
        let b = batch(&[mol(4)]).unwrap();
        assert!(b.graph_index.iter().all(|g| *g == 0));
        assert!(b.energies.is_none());
    }

    #[test]
    fn empty_is_an_error() {
        assert!(batch::<Molecule>(&[]).is_err());
    }

    #[test]
    fn unbatch_round_trip() {
        let mols = make_synthetic(5, [2, 6], 1).unwrap();
        let b = batch(&mols).unwrap();
        assert_eq!(b.counts().iter().sum::<usize>(), b.n_atoms());
        assert_eq!(b.unbatch(), mols);
    }
}
