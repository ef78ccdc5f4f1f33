use super::{rope_in_place, softmax, AttentionConfig, ModelWeights, Rope, RowBuffer};
use crate::error::{PaluError, Result};
use crate::tensor::dot;

/// Full key/value cache: per layer, one d-wide row per token. Keys are
/// stored after RoPE.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub keys: Vec<RowBuffer>,
    pub values: Vec<RowBuffer>,
}

impl KvCache {
    pub fn new(config: &AttentionConfig) -> Self {
        KvCache {
            keys: (0..config.layers).map(|_| RowBuffer::new(config.d_model)).collect(),
            values: (0..config.layers).map(|_| RowBuffer::new(config.d_model)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, RowBuffer::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Standard incremental decoder: each step projects the new token, appends
/// its key and value and attends over everything cached so far.
#[derive(Debug, Clone)]
pub struct ReferenceDecoder<'w> {
    config: AttentionConfig,
    weights: &'w ModelWeights,
    cache: KvCache,
}

impl<'w> ReferenceDecoder<'w> {
    pub fn new(weights: &'w ModelWeights, config: AttentionConfig) -> Result<Self> {
        weights.validate(&config)?;
        Ok(ReferenceDecoder {
            config,
            weights,
            cache: KvCache::new(&config),
        })
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn into_cache(self) -> KvCache {
        self.cache
    }

    pub fn step(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let cfg = self.config;
        if x.len() != cfg.d_model {
            return Err(PaluError::shape("reference step", format!("1x{}", x.len()), format!("1x{}", cfg.d_model)));
        }
        let dh = cfg.head_dim;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut hidden = x.to_vec();
        for (l, lw) in self.weights.layers.iter().enumerate() {
            let pos = self.cache.keys[l].len();
            let mut q = lw.wq.left_mul_vec(&hidden)?;
            let mut k = lw.wk.left_mul_vec(&hidden)?;
            let v = lw.wv.left_mul_vec(&hidden)?;
            if let Rope::On { base } = cfg.rope {
                for h in 0..cfg.n_heads {
                    rope_in_place(&mut q[h * dh..(h + 1) * dh], pos, base)?;
                    rope_in_place(&mut k[h * dh..(h + 1) * dh], pos, base)?;
                }
            }
            self.cache.keys[l].push(&k);
            self.cache.values[l].push(&v);
            let keys = &self.cache.keys[l];
            let values = &self.cache.values[l];

            let mut out = vec![0.0; cfg.d_model];
            for h in 0..cfg.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = &q[cols.clone()];
                let scores: Vec<f64> = (0..keys.len())
                    .map(|t| dot(qh, &keys.row(t)[cols.clone()]) * inv_sqrt)
                    .collect();
                let probs = softmax(&scores);
                let mut head = vec![0.0; dh];
                for (t, p) in probs.iter().enumerate() {
                    for (a, vv) in head.iter_mut().zip(&values.row(t)[cols.clone()]) {
                        *a += p * vv;
                    }
                }
                for (j, a) in head.iter().enumerate() {
                    for (o, w) in out.iter_mut().zip(lw.wo.row(h * dh + j)) {
                        *o += a * w;
                    }
                }
            }
            hidden = out;
        }
        Ok(hidden)
    }
}

/// Decodes a whole token stream, returning per-step outputs and the final
/// cache.
pub fn reference_decode(
    weights: &ModelWeights,
    config: &AttentionConfig,
    tokens: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, KvCache)> {
    let mut dec = ReferenceDecoder::new(weights, *config)?;
    let outputs = tokens.iter().map(|x| dec.step(x)).collect::<Result<Vec<_>>>()?;
    Ok((outputs, dec.into_cache()))
}
