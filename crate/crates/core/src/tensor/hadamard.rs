use super::Matrix;
use crate::error::{PaluError, Result};

/// Orthonormal Walsh–Hadamard rotation of size `dim`.
///
/// Powers of two give the Sylvester matrix scaled by `1/√dim`. Other sizes
/// are block-diagonal over the binary decomposition of `dim`, largest block
/// first (12 → H₈ ⊕ H₄), which keeps the result exactly orthogonal.
pub fn hadamard(dim: usize) -> Result<Matrix> {
    if dim == 0 {
        return Err(PaluError::invalid("hadamard dimension must be positive"));
    }
    let mut out = Matrix::zeros(dim, dim);
    let mut offset = 0;
    for bit in (0..usize::BITS).rev() {
        let block = 1usize << bit;
        if dim & block == 0 {
            continue;
        }
        let scale = 1.0 / (block as f64).sqrt();
        for r in 0..block {
            for c in 0..block {
                // Sylvester entry: (-1)^popcount(r & c)
                let sign = if (r & c).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                out.set(offset + r, offset + c, sign * scale);
            }
        }
        offset += block;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_cases() {
        assert_eq!(hadamard(1).unwrap().as_slice(), &[1.0]);
        let h = 1.0 / 2f64.sqrt();
        assert_eq!(hadamard(2).unwrap().as_slice(), &[h, h, h, -h]);
        assert!(hadamard(0).is_err());
    }

    #[test]
    fn orthogonal_for_all_sizes() {
        for d in [1, 2, 4, 8, 16, 32, 12, 24, 3, 7, 13] {
            let h = hadamard(d).unwrap();
            let err = h.matmul(&h.transpose()).unwrap().sub(&Matrix::identity(d)).unwrap().max_abs();
            assert!(err < 1e-10, "dim {d}: {err}");
        }
    }

    #[test]
    fn twelve_is_block_diagonal() {
        let h = hadamard(12).unwrap();
        let h8 = hadamard(8).unwrap();
        let h4 = hadamard(4).unwrap();
        for r in 0..12 {
            for c in 0..12 {
                let expect = match (r < 8, c < 8) {
                    (true, true) => h8.get(r, c),
                    (false, false) => h4.get(r - 8, c - 8),
                    _ => 0.0,
                };
                assert_eq!(h.get(r, c), expect);
            }
        }
    }

    #[test]
    fn sylvester_is_symmetric() {
        let h = hadamard(16).unwrap();
        assert_eq!(h, h.transpose());
    }
}
