//! Molecules, XYZ ingestion, the synthetic benchmark, splits and batching.

mod batch;
mod elements;
mod molecule;
mod split;
mod synthetic;
mod xyz;

pub use batch::{batch, Batch};
pub use elements::{atomic_number, symbol};
pub use molecule::Molecule;
pub use split::{read_manifest, split, write_manifest, DatasetSplit, DEFAULT_FRACTIONS};
pub use synthetic::{
    make_synthetic, partial_charge, synthetic_energy_forces, BOX_LENGTH, ELEMENTS, LJ_SIGMA, MIN_SEPARATION,
};
pub use xyz::{parse_xyz, write_xyz};
