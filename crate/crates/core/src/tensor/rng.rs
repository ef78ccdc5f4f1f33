//! Counter-based random numbers: every value is a pure function of
//! `(seed, row, col)`, so matrices come out identical whatever order they
//! are filled in.

use super::{orthonormal_columns, Matrix};
use crate::error::{PaluError, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keyed, stateless generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng {
            key: mix64(seed.wrapping_add(GOLDEN)),
        }
    }

    /// Independent generator for a named sub-stream.
    pub fn substream(&self, tag: u64) -> Self {
        CounterRng {
            key: mix64(self.key ^ mix64(tag.wrapping_mul(GOLDEN))),
        }
    }

    #[inline]
    pub fn bits(&self, row: u64, col: u64, lane: u64) -> u64 {
        let h = mix64(self.key ^ row.wrapping_mul(GOLDEN));
        let h = mix64(h ^ col.wrapping_mul(0xD1B5_4A32_D192_ED03));
        mix64(h ^ lane.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7))
    }

    /// Uniform in the open interval (0, 1).
    #[inline]
    pub fn uniform(&self, row: u64, col: u64, lane: u64) -> f64 {
        ((self.bits(row, col, lane) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box–Muller on two lanes of the same counter.
    pub fn normal(&self, row: u64, col: u64) -> f64 {
        let u1 = self.uniform(row, col, 0);
        let u2 = self.uniform(row, col, 1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Derives a stage-local seed by hashing `(seed, name)`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the seed.
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix64(mix64(seed) ^ h)
}

/// Matrix of independent standard normals.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let rng = CounterRng::new(seed);
    Matrix::from_fn(rows, cols, |r, c| rng.normal(r as u64, c as u64))
}

/// Seeded random matrix.
///
/// Without `spectrum` the entries are i.i.d. standard normals. With a decay
/// `γ ∈ (0, 1]` the matrix is `U · diag(γ⁰, γ¹, …) · Vᵀ` for seeded
/// orthonormal `U`, `V`, so its singular values are exactly that geometric
/// sequence.
pub fn random_matrix(rows: usize, cols: usize, seed: u64, spectrum: Option<f64>) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(PaluError::invalid(format!(
            "random_matrix dimensions must be positive, got {rows}x{cols}"
        )));
    }
    let Some(gamma) = spectrum else {
        return Ok(gaussian_matrix(rows, cols, seed));
    };
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(PaluError::invalid(format!(
            "spectrum decay must lie in (0, 1], got {gamma}"
        )));
    }
    let k = rows.min(cols);
    let root = CounterRng::new(seed);
    let left = root.substream(1);
    let right = root.substream(2);
    let u = orthonormal_columns(&Matrix::from_fn(rows, k, |r, c| left.normal(r as u64, c as u64)))?;
    let v = orthonormal_columns(&Matrix::from_fn(cols, k, |r, c| right.normal(r as u64, c as u64)))?;
    let sigma: Vec<f64> = (0..k).map(|i| gamma.powi(i as i32)).collect();
    u.scale_columns(&sigma)?.matmul(&v.transpose())
}
