use crate::error::{Error, Result};

/// One structure: atomic numbers, positions in Å, optional targets in meV and meV/Å.
#[derive(Clone, Debug, PartialEq)]
pub struct Molecule {
    pub z: Vec<u32>,
    pub positions: Vec<[f64; 3]>,
    pub energy: Option<f64>,
    pub forces: Option<Vec<[f64; 3]>>,
}

impl Molecule {
    pub fn new(z: Vec<u32>, positions: Vec<[f64; 3]>) -> Result<Self> {
        let m = Molecule {
            z,
            positions,
            energy: None,
            forces: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_targets(mut self, energy: f64, forces: Option<Vec<[f64; 3]>>) -> Result<Self> {
        self.energy = Some(energy);
        self.forces = forces;
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.z.is_empty() {
            return Err(Error::Data("molecule has no atoms".into()));
        }
        if self.z.len() != self.positions.len() {
            return Err(Error::Data(format!(
                "{} atomic numbers but {} positions",
                self.z.len(),
                self.positions.len()
            )));
        }
        if self.z.iter().any(|&z| z == 0) {
            return Err(Error::Data("atomic number 0".into()));
        }
        if self.positions.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Data("non-finite position".into()));
        }
        if let Some(e) = self.energy {
            if !e.is_finite() {
                return Err(Error::Data("non-finite energy".into()));
            }
        }
        if let Some(f) = &self.forces {
            if self.energy.is_none() {
                return Err(Error::Data("forces given without an energy".into()));
            }
            if f.len() != self.z.len() {
                return Err(Error::Data("force block length differs from atom count".into()));
            }
            if f.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Data("non-finite force".into()));
            }
        }
        Ok(())
    }
}
