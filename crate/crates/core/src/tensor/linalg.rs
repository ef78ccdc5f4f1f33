use super::Matrix;
use crate::error::{PaluError, Result};

/// Cholesky factor `L` (lower triangular) of `g + jitter·I`.
pub fn cholesky(g: &Matrix, jitter: f64) -> Result<Matrix> {
    let n = g.rows();
    if g.cols() != n {
        return Err(PaluError::shape("cholesky", g.shape(), "a square matrix"));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(PaluError::invalid(format!("jitter must be finite and >= 0, got {jitter}")));
    }
    let scale = g.max_abs().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (g.get(i, j) - g.get(j, i)).abs() > 1e-10 * scale {
                return Err(PaluError::invalid(format!(
                    "cholesky input is not symmetric at ({i}, {j})"
                )));
            }
        }
    }

    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = g.get(j, j) + jitter;
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if !(diag > 0.0) {
            return Err(PaluError::NotPositiveDefinite { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut acc = g.get(i, j);
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, acc / ljj);
        }
    }
    Ok(l)
}

/// Solves `L · X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = l.rows();
    if l.cols() != n || b.rows() != n {
        return Err(PaluError::shape("solve_lower", l.shape(), b.shape()));
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut acc = x.get(i, c);
            for k in 0..i {
                acc -= l.get(i, k) * x.get(k, c);
            }
            let d = l.get(i, i);
            if d == 0.0 {
                return Err(PaluError::NonFinite(format!("zero pivot {i} in triangular solve")));
            }
            x.set(i, c, acc / d);
        }
    }
    Ok(x)
}

/// Solves `U · X = B` for upper-triangular `U`.
pub fn solve_upper(u: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = u.rows();
    if u.cols() != n || b.rows() != n {
        return Err(PaluError::shape("solve_upper", u.shape(), b.shape()));
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in (0..n).rev() {
            let mut acc = x.get(i, c);
            for k in (i + 1)..n {
                acc -= u.get(i, k) * x.get(k, c);
            }
            let d = u.get(i, i);
            if d == 0.0 {
                return Err(PaluError::NonFinite(format!("zero pivot {i} in triangular solve")));
            }
            x.set(i, c, acc / d);
        }
    }
    Ok(x)
}

/// Orthonormalizes the columns of `a` (rows ≥ cols) with modified
/// Gram–Schmidt, run twice for stability. Column order and direction are
/// kept, so the implied `R` has a positive diagonal.
pub fn orthonormal_columns(a: &Matrix) -> Result<Matrix> {
    let (m, k) = (a.rows(), a.cols());
    if k > m {
        return Err(PaluError::shape("orthonormal_columns", a.shape(), "rows >= cols"));
    }
    let mut cols: Vec<Vec<f64>> = (0..k).map(|c| a.column(c)).collect();
    for j in 0..k {
        let original = norm(&cols[j]);
        for _pass in 0..2 {
            for i in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let proj = super::dot(&done[i], &rest[0]);
                for (x, q) in rest[0].iter_mut().zip(&done[i]) {
                    *x -= proj * q;
                }
            }
        }
        let nrm = norm(&cols[j]);
        if !(nrm > 1e-12 * original.max(f64::MIN_POSITIVE)) {
            return Err(PaluError::invalid(format!("column {j} is linearly dependent")));
        }
        cols[j].iter_mut().for_each(|x| *x /= nrm);
    }
    Ok(Matrix::from_fn(m, k, |r, c| cols[c][r]))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
