//! Shared helpers for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::moldata::{make_synthetic, Molecule};

/// Uniform random rotation from a normalized quaternion.
pub fn rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        q.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let n: f64 = q.iter().map(|v| v * v).sum();
        if n > 1e-3 && n <= 1.0 {
            let n = n.sqrt();
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub fn apply(q: &[[f64; 3]; 3], t: [f64; 3], p: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| (0..3).map(|j| q[i][j] * p[j]).sum::<f64>() + t[i])
}

pub fn molecules(n: usize, atoms: [usize; 2], seed: u64) -> Vec<Molecule> {
    make_synthetic(n, atoms, seed).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
