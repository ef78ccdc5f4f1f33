//! One reference layer evaluated over a whole causal sequence, keeping each
//! head's output so that a change to a single head's key or value
//! projection can be re-evaluated without redoing the other heads.

use super::{rope_in_place, softmax, AttentionConfig, LayerWeights, Rope};
use crate::error::{PaluError, Result};
use crate::rank::KvRole;
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    /// Per head: queries, keys (both after RoPE) and values, each T × d_h.
    q: Vec<Vec<Vec<f64>>>,
    k: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
    /// Per head attention output, T × d_h.
    heads: Vec<Vec<Vec<f64>>>,
}

fn project(xs: &[Vec<f64>], w: &Matrix, h: usize, cfg: &AttentionConfig, rope: bool) -> Result<Vec<Vec<f64>>> {
    let dh = cfg.head_dim;
    let w_h = w.col_slice(h * dh..(h + 1) * dh)?;
    xs.iter()
        .enumerate()
        .map(|(pos, x)| {
            let mut r = w_h.left_mul_vec(x)?;
            if let (true, Rope::On { base }) = (rope, cfg.rope) {
                rope_in_place(&mut r, pos, base)?;
            }
            Ok(r)
        })
        .collect()
}

fn attend(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], dh: usize) -> Vec<Vec<f64>> {
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    (0..q.len())
        .map(|t| {
            let scores: Vec<f64> = (0..=t).map(|s| dot(&q[t], &k[s]) * inv_sqrt).collect();
            let mut head = vec![0.0; dh];
            for (s, p) in softmax(&scores).iter().enumerate() {
                for (a, vv) in head.iter_mut().zip(&v[s]) {
                    *a += p * vv;
                }
            }
            head
        })
        .collect()
}

impl LayerTrace {
    pub(crate) fn new(lw: &LayerWeights, cfg: &AttentionConfig, xs: &[Vec<f64>]) -> Result<Self> {
        if let Some(x) = xs.iter().find(|x| x.len() != cfg.d_model) {
            return Err(PaluError::shape("layer trace", format!("1x{}", x.len()), format!("1x{}", cfg.d_model)));
        }
        let per_head = |w: &Matrix, rope: bool| (0..cfg.n_heads).map(|h| project(xs, w, h, cfg, rope)).collect::<Result<Vec<_>>>();
        let q = per_head(&lw.wq, true)?;
        let k = per_head(&lw.wk, true)?;
        let v = per_head(&lw.wv, false)?;
        let heads = (0..cfg.n_heads).map(|h| attend(&q[h], &k[h], &v[h], cfg.head_dim)).collect();
        Ok(LayerTrace { q, k, v, heads })
    }

    /// Layer output (T × d) with the given heads' outputs substituted.
    fn combine(&self, lw: &LayerWeights, cfg: &AttentionConfig, replaced: &[(usize, Vec<Vec<f64>>)]) -> Vec<Vec<f64>> {
        let dh = cfg.head_dim;
        let t_len = self.heads.first().map_or(0, Vec::len);
        (0..t_len)
            .map(|t| {
                let mut out = vec![0.0; cfg.d_model];
                for h in 0..cfg.n_heads {
                    let head = replaced
                        .iter()
                        .find(|(r, _)| *r == h)
                        .map_or(&self.heads[h][t], |(_, rows)| &rows[t]);
                    for (j, a) in head.iter().enumerate() {
                        for (o, w) in out.iter_mut().zip(lw.wo.row(h * dh + j)) {
                            *o += a * w;
                        }
                    }
                }
                out
            })
            .collect()
    }

    pub(crate) fn output(&self, lw: &LayerWeights, cfg: &AttentionConfig) -> Vec<Vec<f64>> {
        self.combine(lw, cfg, &[])
    }

    /// Output with the key or value projection of each listed head `h`
    /// replaced by its d × d_h block.
    pub(crate) fn output_with_heads(
        &self,
        lw: &LayerWeights,
        cfg: &AttentionConfig,
        xs: &[Vec<f64>],
        role: KvRole,
        updates: &[(usize, Matrix)],
    ) -> Result<Vec<Vec<f64>>> {
        let dh = cfg.head_dim;
        let mut replaced = Vec::with_capacity(updates.len());
        for (h, w_head) in updates {
            let h = *h;
            if w_head.rows() != cfg.d_model || w_head.cols() != dh || h >= cfg.n_heads {
                return Err(PaluError::invalid(format!("head block {h} must be {}x{dh}", cfg.d_model)));
            }
            let fresh = project(xs, w_head, 0, cfg, role == KvRole::Key)?;
            let rows = match role {
                KvRole::Key => attend(&self.q[h], &fresh, &self.v[h], dh),
                KvRole::Value => attend(&self.q[h], &self.k[h], &fresh, dh),
            };
            replaced.push((h, rows));
        }
        Ok(self.combine(lw, cfg, &replaced))
    }
}
