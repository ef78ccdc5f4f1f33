//! Per-token asymmetric integer quantization of latent caches, and the
//! offline Hadamard rotation that is folded into the factor pairs to flatten
//! SVD-induced outlier channels before quantizing.

use crate::decomposition::{DecomposedLayer, FactorPair};
use crate::error::{PaluError, Result};
use crate::tensor::{hadamard, Matrix};

/// Smallest scale numerator; keeps constant rows representable.
pub const MIN_RANGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantParams {
    bits: u8,
}

impl QuantParams {
    pub fn new(bits: u8) -> Result<Self> {
        match bits {
            2 | 3 | 4 | 8 => Ok(QuantParams { bits }),
            _ => Err(PaluError::invalid(format!("unsupported bit width {bits}; use 2, 3, 4 or 8"))),
        }
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn qmax(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

/// Round half away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Per-row scale and zero point for one latent row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowParams {
    pub scale: f64,
    pub zero_point: i64,
}

impl RowParams {
    pub fn fit(row: &[f64], params: QuantParams) -> Self {
        let (lo, hi) = row
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        let scale = (hi - lo).max(MIN_RANGE) / f64::from(params.qmax());
        let zero_point = round_half_away(-lo / scale) as i64;
        RowParams { scale, zero_point }
    }

    #[inline]
    pub fn code(&self, x: f64, qmax: u32) -> u8 {
        let q = round_half_away(x / self.scale) + self.zero_point as f64;
        q.clamp(0.0, f64::from(qmax)) as u8
    }

    #[inline]
    pub fn value(&self, code: u8) -> f64 {
        (i64::from(code) - self.zero_point) as f64 * self.scale
    }
}

/// Quantized n_tokens × width latent: one scale/zero point per row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLatent {
    params: QuantParams,
    width: usize,
    codes: Vec<u8>,
    scales: Vec<f64>,
    zero_points: Vec<i64>,
}

impl QuantizedLatent {
    pub fn empty(width: usize, params: QuantParams) -> Self {
        QuantizedLatent {
            params,
            width,
            codes: Vec::new(),
            scales: Vec::new(),
            zero_points: Vec::new(),
        }
    }

    /// Rebuilds from stored parts, validating every invariant.
    pub fn from_parts(
        params: QuantParams,
        width: usize,
        codes: Vec<u8>,
        scales: Vec<f64>,
        zero_points: Vec<i64>,
    ) -> Result<Self> {
        let rows = scales.len();
        if width == 0 || codes.len() != rows * width || zero_points.len() != rows {
            return Err(PaluError::invalid("quantized latent parts have inconsistent lengths"));
        }
        if codes.iter().any(|c| u32::from(*c) > params.qmax()) {
            return Err(PaluError::invalid("code exceeds 2^bits - 1"));
        }
        if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(PaluError::invalid("scales must be positive and finite"));
        }
        Ok(QuantizedLatent {
            params,
            width,
            codes,
            scales,
            zero_points,
        })
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn bits(&self) -> u8 {
        self.params.bits
    }

    pub fn rows(&self) -> usize {
        self.scales.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i64] {
        &self.zero_points
    }

    pub fn row_params(&self, r: usize) -> RowParams {
        RowParams {
            scale: self.scales[r],
            zero_point: self.zero_points[r],
        }
    }

    /// Quantizes and appends one token row.
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.width {
            return Err(PaluError::shape("push_row", format!("1x{}", row.len()), format!("width {}", self.width)));
        }
        let rp = RowParams::fit(row, self.params);
        let qmax = self.params.qmax();
        self.codes.extend(row.iter().map(|x| rp.code(*x, qmax)));
        self.scales.push(rp.scale);
        self.zero_points.push(rp.zero_point);
        Ok(())
    }

    /// Dequantized row `r`.
    pub fn row(&self, r: usize) -> Vec<f64> {
        let rp = self.row_params(r);
        self.codes[r * self.width..(r + 1) * self.width]
            .iter()
            .map(|c| rp.value(*c))
            .collect()
    }

    pub fn dequantize(&self) -> Result<Matrix> {
        let data = (0..self.rows()).flat_map(|r| self.row(r)).collect();
        Matrix::new(self.rows(), self.width, data)
    }
}

/// Quantizes every row of `latent` independently.
pub fn quantize(latent: &Matrix, params: QuantParams) -> Result<QuantizedLatent> {
    if !latent.is_finite() {
        return Err(PaluError::NonFinite("latent to quantize".into()));
    }
    let mut q = QuantizedLatent::empty(latent.cols(), params);
    for r in 0..latent.rows() {
        q.push_row(latent.row(r))?;
    }
    Ok(q)
}

pub fn dequantize(q: &QuantizedLatent) -> Result<Matrix> {
    q.dequantize()
}

/// Number of bytes `count` codes occupy when packed at `bits`.
pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * usize::from(bits)).div_ceil(8)
}

/// Packs codes LSB-first into a little-endian bit stream. For 2/4/8 bits
/// codes never straddle a byte; 3-bit codes fill 8 codes per 3 bytes.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mask = (1u16 << bits) - 1;
    for (i, &c) in codes.iter().enumerate() {
        let bit = i * usize::from(bits);
        let v = (u16::from(c) & mask) << (bit % 8);
        out[bit / 8] |= v as u8;
        if bit % 8 + usize::from(bits) > 8 {
            out[bit / 8 + 1] |= (v >> 8) as u8;
        }
    }
    out
}

pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    if bytes.len() < packed_len(count, bits) {
        return Err(PaluError::Format(format!(
            "{} bytes cannot hold {count} {bits}-bit codes",
            bytes.len()
        )));
    }
    let mask = (1u16 << bits) - 1;
    Ok((0..count)
        .map(|i| {
            let bit = i * usize::from(bits);
            let lo = u16::from(bytes[bit / 8]);
            let hi = if bit % 8 + usize::from(bits) > 8 {
                u16::from(bytes[bit / 8 + 1])
            } else {
                0
            };
            (((hi << 8 | lo) >> (bit % 8)) & mask) as u8
        })
        .collect())
}

/// A decomposed layer whose factors carry a folded-in Hadamard rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedLayer {
    pub layer: DecomposedLayer,
    pub rotation_dims: Vec<usize>,
}

/// Replaces every `(A, B)` by `(A·R, Rᵀ·B)` with `R = hadamard(r_g)`.
pub fn fuse_hadamard(layer: &DecomposedLayer) -> Result<RotatedLayer> {
    let groups = layer
        .groups
        .iter()
        .map(|g| {
            let r = hadamard(g.rank())?;
            Ok(FactorPair {
                a: g.a.matmul(&r)?,
                b: r.transpose().matmul(&g.b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RotatedLayer {
        layer: DecomposedLayer {
            granularity: layer.granularity,
            shape: layer.shape,
            groups,
        },
        rotation_dims: layer.ranks(),
    })
}

/// Mean over rows of ‖row‖∞ / RMS(row). All-zero rows count as 1.
pub fn outlier_metric(latent: &Matrix) -> f64 {
    let n = latent.cols() as f64;
    let total: f64 = (0..latent.rows())
        .map(|r| {
            let row = latent.row(r);
            let inf = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            if rms == 0.0 {
                1.0
            } else {
                inf / rms
            }
        })
        .sum();
    total / latent.rows() as f64
}

/// Mean squared dequantization error.
pub fn quantization_mse(latent: &Matrix, params: QuantParams) -> Result<f64> {
    let back = quantize(latent, params)?.dequantize()?;
    let diff = latent.sub(&back)?;
    Ok(diff.as_slice().iter().map(|v| v * v).sum::<f64>() / diff.as_slice().len() as f64)
}
