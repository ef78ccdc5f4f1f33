//! One-sided (Hestenes) Jacobi SVD.

use super::Matrix;
use crate::error::{PaluError, Result};

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 60;
const ROTATION_TOL: f64 = 1e-12;

/// Thin SVD `m = u · diag(singular_values) · vt` with `k = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// rows × k, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    /// k × cols, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `u · diag(σ) · vt` restricted to the leading `r` triplets.
    pub fn truncated_product(&self, r: usize) -> Result<Matrix> {
        let u = self.u.leading_cols(r)?;
        let vt = self.vt.row_slice(0..r)?;
        u.scale_columns(&self.singular_values[..r])?.matmul(&vt)
    }
}

/// Full thin SVD.
///
/// Signs are normalized so that the largest-magnitude entry of every left
/// singular vector is non-negative (first such entry on ties).
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(PaluError::NonFinite("svd input".into()));
    }
    if m.rows() >= m.cols() {
        let (u, s, v) = jacobi_tall(m)?;
        Ok(finish(u, s, v))
    } else {
        // m = (mᵀ)ᵀ = (U S Vᵀ)ᵀ = V S Uᵀ
        let (u, s, v) = jacobi_tall(&m.transpose())?;
        Ok(finish(v, s, u))
    }
}

/// Column-major working storage: `cols[j]` is column j.
type Columns = Vec<Vec<f64>>;

/// Jacobi on a tall (rows ≥ cols) matrix. Returns left vectors (not yet
/// completed for zero singular values), singular values, right vectors,
/// all sorted by decreasing singular value.
fn jacobi_tall(m: &Matrix) -> Result<(Columns, Vec<f64>, Columns)> {
    let (rows, n) = (m.rows(), m.cols());
    let mut a: Columns = (0..n).map(|c| m.column(c)).collect();
    let mut v: Columns = (0..n)
        .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    for _sweep in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(PaluError::NonConvergence { sweeps: MAX_SWEEPS });
    }

    let sigma: Vec<f64> = a.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    let floor = smax * f64::EPSILON * rows.max(n) as f64;
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut v_sorted = Vec::with_capacity(n);
    let mut s_sorted = Vec::with_capacity(n);
    for &i in &order {
        let s = sigma[i];
        if s > floor && s > 0.0 {
            u_cols.push(Some(a[i].iter().map(|x| x / s).collect()));
        } else {
            u_cols.push(None);
        }
        v_sorted.push(std::mem::take(&mut v[i]));
        s_sorted.push(s);
    }
    let u = complete_basis(u_cols, rows);
    Ok((u, s_sorted, v_sorted))
}

fn rotate(cols: &mut Columns, p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills missing left vectors (numerically zero singular values) with
/// unit vectors orthogonal to everything before them.
fn complete_basis(cols: Vec<Option<Vec<f64>>>, rows: usize) -> Columns {
    let mut basis: Columns = Vec::with_capacity(cols.len());
    let mut candidate = 0usize;
    for col in cols {
        match col {
            Some(c) => basis.push(c),
            None => loop {
                let mut e = vec![0.0; rows];
                e[candidate % rows] = 1.0;
                candidate += 1;
                for _ in 0..2 {
                    for b in basis.iter() {
                        let proj: f64 = b.iter().zip(&e).map(|(x, y)| x * y).sum();
                        for (x, y) in e.iter_mut().zip(b) {
                            *x -= proj * y;
                        }
                    }
                }
                let nrm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nrm > 1e-6 {
                    e.iter_mut().for_each(|x| *x /= nrm);
                    basis.push(e);
                    break;
                }
            },
        }
    }
    basis
}

fn finish(mut u: Columns, s: Vec<f64>, mut v: Columns) -> SvdResult {
    let k = s.len();
    for j in 0..k {
        let mut best = 0usize;
        for (i, x) in u[j].iter().enumerate() {
            if x.abs() > u[j][best].abs() {
                best = i;
            }
        }
        if u[j][best] < 0.0 {
            u[j].iter_mut().for_each(|x| *x = -*x);
            v[j].iter_mut().for_each(|x| *x = -*x);
        }
    }
    let rows = u.first().map_or(0, Vec::len);
    let cols = v.first().map_or(0, Vec::len);
    SvdResult {
        u: Matrix::from_fn(rows, k, |r, c| u[c][r]),
        singular_values: s,
        vt: Matrix::from_fn(k, cols, |r, c| v[r][c]),
    }
}
