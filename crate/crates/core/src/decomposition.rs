//! Low-rank factorization of concatenated per-head key/value projections.
//!
//! A projection `W` (d × d_h·n) is split column-wise into groups of `s`
//! heads. Each group slice is replaced by a factor pair `(A, B)` from its
//! truncated SVD, `A = U_r √Σ_r` and `B = √Σ_r V_rᵀ`. Multi-head (`s = 1`),
//! group-head and joint-head (`s = n`) decompositions differ only in `s`.
//!
//! In whitened mode each slice is decomposed in the metric of a calibration
//! set `X`, which minimizes `‖X (W − AB)‖_F` instead of `‖W − AB‖_F`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PaluError, Result};
use crate::tensor::{cholesky, solve_upper, svd, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GranularityKind {
    MultiHead,
    GroupHead,
    JointHead,
}

/// How many heads share one factor pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Granularity {
    pub kind: GranularityKind,
    pub group_size: usize,
}

impl Granularity {
    pub fn multi_head() -> Self {
        Granularity {
            kind: GranularityKind::MultiHead,
            group_size: 1,
        }
    }

    pub fn group_head(group_size: usize) -> Self {
        Granularity {
            kind: GranularityKind::GroupHead,
            group_size,
        }
    }

    pub fn joint_head(n_heads: usize) -> Self {
        Granularity {
            kind: GranularityKind::JointHead,
            group_size: n_heads,
        }
    }

    /// Builds from a kind name and group size, filling in the implied size
    /// for multi/joint-head.
    pub fn from_kind(kind: GranularityKind, group_size: Option<usize>, n_heads: usize) -> Result<Self> {
        let g = match kind {
            GranularityKind::MultiHead => Self::multi_head(),
            GranularityKind::JointHead => Self::joint_head(n_heads),
            GranularityKind::GroupHead => Self::group_head(
                group_size.ok_or_else(|| PaluError::invalid("group_head needs a group_size"))?,
            ),
        };
        g.validate(n_heads)?;
        Ok(g)
    }

    pub fn validate(&self, n_heads: usize) -> Result<()> {
        let s = self.group_size;
        if s == 0 || n_heads == 0 || !n_heads.is_multiple_of(s) {
            return Err(PaluError::invalid(format!(
                "group size {s} must divide the head count {n_heads}"
            )));
        }
        let consistent = match self.kind {
            GranularityKind::MultiHead => s == 1,
            GranularityKind::JointHead => s == n_heads,
            GranularityKind::GroupHead => true,
        };
        if !consistent {
            return Err(PaluError::invalid(format!(
                "{:?} is inconsistent with group size {s} over {n_heads} heads",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn n_groups(&self, n_heads: usize) -> usize {
        n_heads / self.group_size
    }

    /// Short label used in reports: M-LRD, G-LRD(s) or J-LRD.
    pub fn label(&self) -> String {
        match self.kind {
            GranularityKind::MultiHead => "M-LRD".into(),
            GranularityKind::GroupHead => format!("G-LRD(gs={})", self.group_size),
            GranularityKind::JointHead => "J-LRD".into(),
        }
    }
}

/// Head layout of the projection being decomposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl HeadShape {
    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

/// One factor pair: `a` is d × r, `b` is r × (d_h·s).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub a: Matrix,
    pub b: Matrix,
}

impl FactorPair {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// Columns of `b` that reconstruct head `h` of the group (r × d_h).
    pub fn head_block(&self, h: usize, head_dim: usize) -> Result<Matrix> {
        self.b.col_slice(h * head_dim..(h + 1) * head_dim)
    }
}

/// Factor pairs for one K or V projection at a chosen granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedLayer {
    pub granularity: Granularity,
    pub shape: HeadShape,
    pub groups: Vec<FactorPair>,
}

impl DecomposedLayer {
    /// Assembles a layer from existing factors, checking every shape
    /// invariant.
    pub fn from_parts(granularity: Granularity, shape: HeadShape, groups: Vec<FactorPair>) -> Result<Self> {
        granularity.validate(shape.n_heads)?;
        let expected = granularity.n_groups(shape.n_heads);
        if groups.len() != expected {
            return Err(PaluError::invalid(format!(
                "expected {expected} factor groups, got {}",
                groups.len()
            )));
        }
        let width = shape.head_dim * granularity.group_size;
        for (j, g) in groups.iter().enumerate() {
            let r = g.a.cols();
            if g.a.rows() != shape.d_model || g.b.rows() != r || g.b.cols() != width {
                return Err(PaluError::shape(
                    "DecomposedLayer group",
                    format!("A {} / B {}", g.a.shape(), g.b.shape()),
                    format!("group {j}: d={} width={width}", shape.d_model),
                ));
            }
            if r > shape.d_model.min(width) {
                return Err(PaluError::invalid(format!("group {j} rank {r} exceeds min(d, width)")));
            }
        }
        Ok(DecomposedLayer {
            granularity,
            shape,
            groups,
        })
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.groups.iter().map(FactorPair::rank).collect()
    }

    /// Σ r over groups: the latent width cached per token.
    pub fn latent_width(&self) -> usize {
        self.ranks().iter().sum()
    }

    pub fn group_width(&self) -> usize {
        self.shape.head_dim * self.granularity.group_size
    }

    /// Group index and in-group position of head `i`.
    pub fn head_location(&self, head: usize) -> (usize, usize) {
        (head / self.granularity.group_size, head % self.granularity.group_size)
    }
}

/// Calibration inputs for whitened decomposition.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    /// n_samples × d_model.
    pub x: Matrix,
    pub source: String,
}

/// Decomposition metric.
#[derive(Debug, Clone, Copy)]
pub enum Whitening<'a> {
    Plain,
    Whitened(&'a CalibrationSet),
}

/// Same rank for every group.
pub fn equal_ranks(granularity: Granularity, n_heads: usize, rank: usize) -> Vec<usize> {
    vec![rank; granularity.n_groups(n_heads)]
}

/// Decomposes `w` (d × d_h·n) group by group at the given ranks.
pub fn decompose(
    w: &Matrix,
    shape: HeadShape,
    granularity: Granularity,
    ranks: &[usize],
    whitening: Whitening<'_>,
) -> Result<DecomposedLayer> {
    granularity.validate(shape.n_heads)?;
    if w.rows() != shape.d_model || w.cols() != shape.width() {
        return Err(PaluError::shape(
            "decompose",
            w.shape(),
            format!("{}x{}", shape.d_model, shape.width()),
        ));
    }
    let n_groups = granularity.n_groups(shape.n_heads);
    if ranks.len() != n_groups {
        return Err(PaluError::invalid(format!(
            "got {} ranks for {n_groups} groups",
            ranks.len()
        )));
    }
    let width = shape.head_dim * granularity.group_size;
    let max_rank = shape.d_model.min(width);
    if let Some((j, r)) = ranks.iter().enumerate().find(|(_, r)| **r == 0 || **r > max_rank) {
        return Err(PaluError::invalid(format!(
            "rank {r} for group {j} is outside [1, {max_rank}]"
        )));
    }

    let whitener = match whitening {
        Whitening::Plain => None,
        Whitening::Whitened(calib) => Some(Whitener::new(calib, shape.d_model)?),
    };

    let groups = (0..n_groups)
        .into_par_iter()
        .map(|j| {
            let slice = w.col_slice(j * width..(j + 1) * width)?;
            factor_slice(&slice, ranks[j], whitener.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(DecomposedLayer {
        granularity,
        shape,
        groups,
    })
}

/// `Lᵀ` for `L Lᵀ = XᵀX + jitter·I`.
struct Whitener {
    lt: Matrix,
}

impl Whitener {
    fn new(calib: &CalibrationSet, d_model: usize) -> Result<Self> {
        let x = &calib.x;
        if x.cols() != d_model {
            return Err(PaluError::shape("calibration set", x.shape(), format!("n x {d_model}")));
        }
        if x.rows() < d_model {
            return Err(PaluError::invalid(format!(
                "whitening needs at least {d_model} calibration samples, got {}",
                x.rows()
            )));
        }
        let gram = x.transpose().matmul(x)?;
        let jitter = 1e-6 * gram.trace() / d_model as f64;
        let l = cholesky(&gram, jitter)?;
        Ok(Whitener { lt: l.transpose() })
    }
}

fn factor_slice(slice: &Matrix, rank: usize, whitener: Option<&Whitener>) -> Result<FactorPair> {
    let target = match whitener {
        Some(wh) => wh.lt.matmul(slice)?,
        None => slice.clone(),
    };
    let dec = svd(&target)?;
    let root: Vec<f64> = dec.singular_values[..rank].iter().map(|s| s.sqrt()).collect();
    let us = dec.u.leading_cols(rank)?.scale_columns(&root)?;
    let b = dec.vt.row_slice(0..rank)?.scale_rows(&root)?;
    let a = match whitener {
        Some(wh) => solve_upper(&wh.lt, &us)?,
        None => us,
    };
    Ok(FactorPair { a, b })
}

/// Horizontal concatenation of `A_j B_j` over groups (d × d_h·n).
pub fn reconstruct(layer: &DecomposedLayer) -> Result<Matrix> {
    let parts = layer
        .groups
        .iter()
        .map(|g| g.a.matmul(&g.b))
        .collect::<Result<Vec<_>>>()?;
    Matrix::hcat(&parts)
}

/// `‖w − reconstruct(layer)‖_F`.
pub fn frobenius_error(layer: &DecomposedLayer, w: &Matrix) -> Result<f64> {
    let approx = reconstruct(layer)?;
    Ok(w.sub(&approx)?.frobenius_norm())
}

/// `‖X (w − reconstruct(layer))‖_F`.
pub fn activation_error(layer: &DecomposedLayer, w: &Matrix, x: &Matrix) -> Result<f64> {
    let diff = w.sub(&reconstruct(layer)?)?;
    Ok(x.matmul(&diff)?.frobenius_norm())
}
