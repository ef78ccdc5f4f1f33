//! Multi-head attention decoding: a plain reference path that caches full
//! keys and values, and the low-rank paths that cache latents `h = x·A`
//! and fold the reconstruction factors into the query and output
//! projections.
//!
//! Layers are stacked without residuals or norms: the attention output of
//! layer `l` is the input token of layer `l + 1`.

mod latent;
mod reference;
mod sequence;

pub use latent::{
    explicit_weights, palu_decode_step, palu_decode_step_norope, palu_decode_step_quantized,
    palu_decode_step_rope, palu_prefill, CacheMode, FusedLayer, FusedWeights, LatentKVCache,
    LatentLayerCache, LatentStore, PaluModel,
};
pub use reference::{reference_decode, KvCache, ReferenceDecoder};
pub(crate) use sequence::LayerTrace;

use serde::{Deserialize, Serialize};

use crate::error::{PaluError, Result};
use crate::tensor::{gaussian_matrix, random_matrix, CounterRng, Matrix};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rope {
    Off,
    On { base: f64 },
}

impl Rope {
    pub fn is_on(&self) -> bool {
        matches!(self, Rope::On { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub rope: Rope,
    pub layers: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.head_dim == 0 || self.layers == 0 {
            return Err(PaluError::invalid("attention dimensions and layer count must be positive"));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(PaluError::invalid(format!(
                "d_model {} != n_heads {} x head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if let Rope::On { base } = self.rope {
            if !(base > 1.0 && base.is_finite()) {
                return Err(PaluError::invalid(format!("rope base must exceed 1, got {base}")));
            }
            if !self.head_dim.is_multiple_of(2) {
                return Err(PaluError::invalid("rope needs an even head_dim"));
            }
        }
        Ok(())
    }

    pub fn head_shape(&self) -> crate::decomposition::HeadShape {
        crate::decomposition::HeadShape {
            d_model: self.d_model,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
        }
    }
}

/// Projections of one layer. All are d × d; head `i` owns columns
/// `i·d_h..(i+1)·d_h` of wq/wk/wv and the same rows of wo.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub layers: Vec<LayerWeights>,
}

impl ModelWeights {
    pub fn validate(&self, config: &AttentionConfig) -> Result<()> {
        config.validate()?;
        if self.layers.len() != config.layers {
            return Err(PaluError::invalid(format!(
                "config has {} layers, weights have {}",
                config.layers,
                self.layers.len()
            )));
        }
        let d = config.d_model;
        for (l, lw) in self.layers.iter().enumerate() {
            for (name, m) in [("wq", &lw.wq), ("wk", &lw.wk), ("wv", &lw.wv), ("wo", &lw.wo)] {
                if m.rows() != d || m.cols() != d {
                    return Err(PaluError::shape("model weights", format!("layer {l} {name} {}", m.shape()), format!("{d}x{d}")));
                }
                if !m.is_finite() {
                    return Err(PaluError::NonFinite(format!("layer {l} {name}")));
                }
            }
        }
        Ok(())
    }

    /// Seeded synthetic model. Query/output projections are Gaussian with
    /// variance 1/d. Each head slice of wk and wv has singular values
    /// exactly `γ⁰, γ¹, …` when `spectrum` is given.
    pub fn synthetic(config: &AttentionConfig, spectrum: Option<f64>, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let root = CounterRng::new(seed);
        let inv = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers as u64 {
            let stream = |tag: u64| root.substream(l * 16 + tag).bits(0, 0, 0);
            let wq = gaussian_matrix(d, d, stream(0)).scale(inv);
            let wo = gaussian_matrix(d, d, stream(3)).scale(inv);
            let headed = |tag: u64| -> Result<Matrix> {
                let slices = (0..config.n_heads as u64)
                    .map(|h| random_matrix(d, config.head_dim, root.substream(l * 16 + tag).bits(h, 1, 0), spectrum))
                    .collect::<Result<Vec<_>>>()?;
                Matrix::hcat(&slices)
            };
            let (wk, wv) = match spectrum {
                Some(_) => (headed(1)?, headed(2)?),
                None => (
                    gaussian_matrix(d, d, stream(1)).scale(inv),
                    gaussian_matrix(d, d, stream(2)).scale(inv),
                ),
            };
            layers.push(LayerWeights { wq, wk, wv, wo });
        }
        Ok(ModelWeights { layers })
    }
}

/// Seeded stream of `len` token vectors of width `d`.
pub fn token_stream(d: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
    let rng = CounterRng::new(seed);
    (0..len)
        .map(|t| (0..d).map(|c| rng.normal(t as u64, c as u64)).collect())
        .collect()
}

/// Rotary embedding with half-split pairing: dimension `i` rotates with
/// `i + d_h/2` by angle `position · base^(−2i/d_h)`.
pub fn rope_apply(v: &[f64], position: usize, base: f64) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    rope_in_place(&mut out, position, base)?;
    Ok(out)
}

pub(crate) fn rope_in_place(v: &mut [f64], position: usize, base: f64) -> Result<()> {
    let dh = v.len();
    if !dh.is_multiple_of(2) {
        return Err(PaluError::invalid(format!("rope needs an even dimension, got {dh}")));
    }
    let half = dh / 2;
    for i in 0..half {
        let freq = base.powf(-2.0 * i as f64 / dh as f64);
        let angle = position as f64 * freq;
        let (sin, cos) = angle.sin_cos();
        let (a, b) = (v[i], v[i + half]);
        v[i] = a * cos - b * sin;
        v[i + half] = a * sin + b * cos;
    }
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Growable row-major store of fixed-width rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RowBuffer {
    width: usize,
    data: Vec<f64>,
}

impl RowBuffer {
    pub fn new(width: usize) -> Self {
        RowBuffer { width, data: Vec::new() }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.width, "row width");
        self.data.extend_from_slice(row);
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    /// Contents as a matrix, or `None` when empty.
    pub fn to_matrix(&self) -> Option<Matrix> {
        Matrix::new(self.len(), self.width, self.data.clone()).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rope_identity_at_zero() {
        let v = [0.3, -1.0, 2.0, 0.5];
        assert_eq!(rope_apply(&v, 0, 10_000.0).unwrap(), v.to_vec());
    }

    #[test]
    fn rope_single_frequency() {
        let r = rope_apply(&[1.0, 0.0], 1, 10_000.0).unwrap();
        assert!((r[0] - 1f64.cos()).abs() < 1e-15);
        assert!((r[1] - 1f64.sin()).abs() < 1e-15);
        assert!((r[0] - 0.5403).abs() < 1e-4 && (r[1] - 0.8415).abs() < 1e-4);
    }

    #[test]
    fn rope_preserves_norm() {
        let v: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let n0: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for p in [1, 5, 1000] {
            let r = rope_apply(&v, p, 10_000.0).unwrap();
            let n1: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n0 - n1).abs() < 1e-12);
        }
        assert!(rope_apply(&[1.0, 2.0, 3.0], 1, 10_000.0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&[1.0, 1.0]);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        let p = softmax(&[1000.0, -1000.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = AttentionConfig {
            d_model: 16,
            n_heads: 4,
            head_dim: 4,
            rope: Rope::On { base: 10_000.0 },
            layers: 1,
        };
        assert!(c.validate().is_ok());
        c.head_dim = 5;
        assert!(c.validate().is_err());
        c.head_dim = 4;
        c.rope = Rope::On { base: 1.0 };
        assert!(c.validate().is_err());
        c.rope = Rope::Off;
        c.layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn synthetic_head_slices_have_geometric_spectra() {
        let c = AttentionConfig {
            d_model: 16,
            n_heads: 2,
            head_dim: 8,
            rope: Rope::Off,
            layers: 1,
        };
        let w = ModelWeights::synthetic(&c, Some(0.5), 3).unwrap();
        let slice = w.layers[0].wk.col_slice(8..16).unwrap();
        let s = crate::tensor::svd(&slice).unwrap().singular_values;
        for (i, v) in s.iter().enumerate() {
            assert!((v - 0.5f64.powi(i as i32)).abs() < 1e-8);
        }
        assert_eq!(w, ModelWeights::synthetic(&c, Some(0.5), 3).unwrap());
    }
}
