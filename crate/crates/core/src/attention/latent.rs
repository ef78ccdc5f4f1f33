use super::{rope_in_place, softmax, AttentionConfig, LayerWeights, ModelWeights, Rope, RowBuffer};
use crate::decomposition::{reconstruct, DecomposedLayer};
use crate::error::{PaluError, Result};
use crate::quant::{QuantParams, QuantizedLatent};
use crate::tensor::{dot, Matrix};

/// Offline-fused projections for one layer, one block per head.
///
/// `wq_fused[i] = W^q_i · (B^k_{g,i})ᵀ` (d × r_g) exists only without RoPE.
/// `wo_fused[i] = B^v_{g,i} · W^o_i` (r_g × d) where `B_{g,i}` is the
/// column block of the group factor that rebuilds head `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedLayer {
    pub wq_fused: Option<Vec<Matrix>>,
    pub wo_fused: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedWeights {
    pub layers: Vec<FusedLayer>,
}

impl FusedWeights {
    pub fn build(
        config: &AttentionConfig,
        weights: &ModelWeights,
        keys: &[DecomposedLayer],
        values: &[DecomposedLayer],
    ) -> Result<Self> {
        let dh = config.head_dim;
        let layers = weights
            .layers
            .iter()
            .zip(keys.iter().zip(values))
            .map(|(lw, (k, v))| {
                let wq_fused = if config.rope.is_on() {
                    None
                } else {
                    Some(
                        (0..config.n_heads)
                            .map(|h| {
                                let (g, pos) = k.head_location(h);
                                let bk = k.groups[g].head_block(pos, dh)?;
                                lw.wq.col_slice(h * dh..(h + 1) * dh)?.matmul(&bk.transpose())
                            })
                            .collect::<Result<Vec<_>>>()?,
                    )
                };
                let wo_fused = (0..config.n_heads)
                    .map(|h| {
                        let (g, pos) = v.head_location(h);
                        let bv = v.groups[g].head_block(pos, dh)?;
                        bv.matmul(&lw.wo.row_slice(h * dh..(h + 1) * dh)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(FusedLayer { wq_fused, wo_fused })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FusedWeights { layers })
    }
}

/// Everything the latent decode paths need: original query/output
/// projections, the K/V factorizations and the fused blocks.
#[derive(Debug, Clone)]
pub struct PaluModel {
    pub config: AttentionConfig,
    pub wq: Vec<Matrix>,
    pub wo: Vec<Matrix>,
    pub keys: Vec<DecomposedLayer>,
    pub values: Vec<DecomposedLayer>,
    pub fused: FusedWeights,
}

impl PaluModel {
    pub fn new(
        config: AttentionConfig,
        weights: &ModelWeights,
        keys: Vec<DecomposedLayer>,
        values: Vec<DecomposedLayer>,
    ) -> Result<Self> {
        weights.validate(&config)?;
        if keys.len() != config.layers || values.len() != config.layers {
            return Err(PaluError::invalid(format!(
                "need {} decomposed key and value layers, got {} and {}",
                config.layers,
                keys.len(),
                values.len()
            )));
        }
        let expect = config.head_shape();
        for (l, dl) in keys.iter().chain(&values).enumerate() {
            if dl.shape != expect {
                return Err(PaluError::shape(
                    "palu model",
                    format!("decomposed layer {} {:?}", l % config.layers, dl.shape),
                    format!("{expect:?}"),
                ));
            }
        }
        let fused = FusedWeights::build(&config, weights, &keys, &values)?;
        Ok(PaluModel {
            config,
            wq: weights.layers.iter().map(|l| l.wq.clone()).collect(),
            wo: weights.layers.iter().map(|l| l.wo.clone()).collect(),
            keys,
            values,
            fused,
        })
    }
}

/// Replaces wk/wv with their low-rank reconstructions: running the
/// reference decoder on these weights is the explicit
/// reconstruct-then-attend path.
pub fn explicit_weights(weights: &ModelWeights, keys: &[DecomposedLayer], values: &[DecomposedLayer]) -> Result<ModelWeights> {
    let layers = weights
        .layers
        .iter()
        .zip(keys.iter().zip(values))
        .map(|(lw, (k, v))| {
            Ok(LayerWeights {
                wq: lw.wq.clone(),
                wk: reconstruct(k)?,
                wv: reconstruct(v)?,
                wo: lw.wo.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelWeights { layers })
}

/// Latents of one decomposition group.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentStore {
    Full(RowBuffer),
    Quantized {
        codes: QuantizedLatent,
        /// Dequantized mirror of `codes`, filled on append.
        restored: RowBuffer,
    },
}

impl LatentStore {
    fn new(width: usize, bits: Option<QuantParams>) -> Self {
        match bits {
            None => LatentStore::Full(RowBuffer::new(width)),
            Some(p) => LatentStore::Quantized {
                codes: QuantizedLatent::empty(width, p),
                restored: RowBuffer::new(width),
            },
        }
    }

    fn push(&mut self, row: &[f64]) -> Result<()> {
        match self {
            LatentStore::Full(buf) => buf.push(row),
            LatentStore::Quantized { codes, restored } => {
                codes.push_row(row)?;
                restored.push(&codes.row(codes.rows() - 1));
            }
        }
        Ok(())
    }

    /// Row values as used by attention (dequantized when quantized).
    pub fn rows(&self) -> &RowBuffer {
        match self {
            LatentStore::Full(buf) => buf,
            LatentStore::Quantized { restored, .. } => restored,
        }
    }

    pub fn width(&self) -> usize {
        self.rows().width()
    }

    pub fn bits(&self) -> Option<u8> {
        match self {
            LatentStore::Full(_) => None,
            LatentStore::Quantized { codes, .. } => Some(codes.bits()),
        }
    }

    pub fn quantized(&self) -> Option<&QuantizedLatent> {
        match self {
            LatentStore::Full(_) => None,
            LatentStore::Quantized { codes, .. } => Some(codes),
        }
    }
}

/// Per-layer latent stores, one per key group and one per value group.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentLayerCache {
    pub hk: Vec<LatentStore>,
    pub hv: Vec<LatentStore>,
}

/// Which latents are stored quantized. `None` keeps full precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheMode {
    pub key_bits: Option<QuantParams>,
    pub value_bits: Option<QuantParams>,
}

impl CacheMode {
    pub fn full_precision() -> Self {
        Self::default()
    }

    /// `bits = 16` bypasses quantization entirely.
    pub fn from_bits(bits: u8, quantize_keys: bool) -> Result<Self> {
        if bits == 16 {
            return Ok(Self::default());
        }
        let p = QuantParams::new(bits)?;
        Ok(CacheMode {
            key_bits: quantize_keys.then_some(p),
            value_bits: Some(p),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentKVCache {
    pub layers: Vec<LatentLayerCache>,
    tokens: usize,
}

impl LatentKVCache {
    pub fn new(model: &PaluModel, mode: CacheMode) -> Self {
        let layers = model
            .keys
            .iter()
            .zip(&model.values)
            .map(|(k, v)| LatentLayerCache {
                hk: k.ranks().into_iter().map(|r| LatentStore::new(r, mode.key_bits)).collect(),
                hv: v.ranks().into_iter().map(|r| LatentStore::new(r, mode.value_bits)).collect(),
            })
            .collect();
        LatentKVCache { layers, tokens: 0 }
    }

    /// Tokens cached so far.
    pub fn len(&self) -> usize {
        self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens == 0
    }

    /// Horizontal concatenation of a layer's key (or value) group latents.
    pub fn latent_matrix(&self, layer: usize, keys: bool) -> Option<Matrix> {
        let stores = if keys { &self.layers[layer].hk } else { &self.layers[layer].hv };
        let parts: Option<Vec<Matrix>> = stores.iter().map(|s| s.rows().to_matrix()).collect();
        Matrix::hcat(&parts?).ok()
    }

    fn check_against(&self, model: &PaluModel) -> Result<()> {
        if self.layers.len() != model.config.layers {
            return Err(PaluError::invalid("cache layer count does not match model"));
        }
        for (l, (lc, (k, v))) in self.layers.iter().zip(model.keys.iter().zip(&model.values)).enumerate() {
            let widths = |s: &[LatentStore]| s.iter().map(LatentStore::width).collect::<Vec<_>>();
            if widths(&lc.hk) != k.ranks() || widths(&lc.hv) != v.ranks() {
                return Err(PaluError::shape(
                    "latent cache",
                    format!("layer {l} widths {:?}/{:?}", widths(&lc.hk), widths(&lc.hv)),
                    format!("ranks {:?}/{:?}", k.ranks(), v.ranks()),
                ));
            }
        }
        Ok(())
    }

    fn uniform_bits(&self) -> Result<Option<u8>> {
        let mut seen: Option<u8> = None;
        for lc in &self.layers {
            for s in lc.hk.iter().chain(&lc.hv) {
                if let Some(b) = s.bits() {
                    match seen {
                        Some(prev) if prev != b => {
                            return Err(PaluError::invalid(format!(
                                "cache mixes {prev}-bit and {b}-bit latents"
                            )))
                        }
                        _ => seen = Some(b),
                    }
                }
            }
        }
        Ok(seen)
    }
}

#[derive(Clone, Copy)]
enum KeyPath {
    Fused,
    Reconstruct { base: f64, tile_len: usize },
}

fn run_layers(model: &PaluModel, cache: &mut LatentKVCache, x: &[f64], path: KeyPath) -> Result<Vec<f64>> {
    let cfg = model.config;
    if x.len() != cfg.d_model {
        return Err(PaluError::shape("palu step", format!("1x{}", x.len()), format!("1x{}", cfg.d_model)));
    }
    cache.check_against(model)?;
    let pos = cache.tokens;
    let mut hidden = x.to_vec();
    for l in 0..cfg.layers {
        hidden = layer_step(model, &mut cache.layers[l], l, &hidden, pos, path)?;
    }
    cache.tokens += 1;
    Ok(hidden)
}

fn layer_step(
    model: &PaluModel,
    lc: &mut LatentLayerCache,
    l: usize,
    x: &[f64],
    pos: usize,
    path: KeyPath,
) -> Result<Vec<f64>> {
    let cfg = model.config;
    let dh = cfg.head_dim;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let key = &model.keys[l];
    let value = &model.values[l];
    let fused = &model.fused.layers[l];

    // h = x·A for every group; stored (quantized if configured) before use.
    for (store, g) in lc.hk.iter_mut().zip(&key.groups) {
        store.push(&g.a.left_mul_vec(x)?)?;
    }
    for (store, g) in lc.hv.iter_mut().zip(&value.groups) {
        store.push(&g.a.left_mul_vec(x)?)?;
    }
    let t = pos + 1;

    let q_full = match path {
        KeyPath::Fused => None,
        KeyPath::Reconstruct { .. } => Some(model.wq[l].left_mul_vec(x)?),
    };

    let mut out = vec![0.0; cfg.d_model];
    for h in 0..cfg.n_heads {
        let (kg, kpos) = key.head_location(h);
        let hk = lc.hk[kg].rows();
        let scores: Vec<f64> = match path {
            KeyPath::Fused => {
                let wq_fused = fused
                    .wq_fused
                    .as_ref()
                    .ok_or_else(|| PaluError::invalid("fused query projection is unavailable with RoPE"))?;
                if wq_fused[h].cols() != hk.width() {
                    return Err(PaluError::shape("fused score", wq_fused[h].shape(), format!("latent width {}", hk.width())));
                }
                let q_lat = wq_fused[h].left_mul_vec(x)?;
                (0..t).map(|tau| dot(&q_lat, hk.row(tau)) * inv_sqrt).collect()
            }
            KeyPath::Reconstruct { base, tile_len } => {
                let mut q = q_full.as_ref().expect("query computed")[h * dh..(h + 1) * dh].to_vec();
                rope_in_place(&mut q, pos, base)?;
                let bk = key.groups[kg].head_block(kpos, dh)?;
                let mut scores = Vec::with_capacity(t);
                let mut start = 0;
                while start < t {
                    let end = start.saturating_add(tile_len).min(t);
                    for tau in start..end {
                        let mut k = bk.left_mul_vec(hk.row(tau))?;
                        rope_in_place(&mut k, tau, base)?;
                        scores.push(dot(&q, &k) * inv_sqrt);
                    }
                    start = end;
                }
                scores
            }
        };
        let probs = softmax(&scores);

        let (vg, _) = value.head_location(h);
        let hv = lc.hv[vg].rows();
        let mut weighted = vec![0.0; hv.width()];
        for (tau, p) in probs.iter().enumerate() {
            for (a, v) in weighted.iter_mut().zip(hv.row(tau)) {
                *a += p * v;
            }
        }
        let wo = &fused.wo_fused[h];
        if wo.rows() != weighted.len() {
            return Err(PaluError::shape("fused output", wo.shape(), format!("latent width {}", weighted.len())));
        }
        for (o, v) in out.iter_mut().zip(wo.left_mul_vec(&weighted)?) {
            *o += v;
        }
    }
    Ok(out)
}

/// One decode step without RoPE: scores in latent space through the fused
/// query blocks, values through the fused output blocks.
pub fn palu_decode_step_norope(model: &PaluModel, cache: &mut LatentKVCache, x: &[f64]) -> Result<Vec<f64>> {
    if model.config.rope.is_on() {
        return Err(PaluError::invalid("model uses RoPE; use the reconstructing key path"));
    }
    run_layers(model, cache, x, KeyPath::Fused)
}

/// One decode step with RoPE: keys are rebuilt from latents tile by tile,
/// rotated at their absolute positions and scored against the rotated
/// query. The value path is the same fused one as without RoPE.
pub fn palu_decode_step_rope(model: &PaluModel, cache: &mut LatentKVCache, x: &[f64], tile_len: usize) -> Result<Vec<f64>> {
    let Rope::On { base } = model.config.rope else {
        return Err(PaluError::invalid("model has RoPE disabled"));
    };
    if tile_len == 0 {
        return Err(PaluError::invalid("tile_len must be at least 1"));
    }
    run_layers(model, cache, x, KeyPath::Reconstruct { base, tile_len })
}

/// Quantized-cache step. Same algebra as the full-precision paths; cached
/// latents are read back dequantized and new latents are quantized on
/// append.
pub fn palu_decode_step_quantized(model: &PaluModel, cache: &mut LatentKVCache, x: &[f64], tile_len: usize) -> Result<Vec<f64>> {
    cache.uniform_bits()?;
    palu_decode_step(model, cache, x, tile_len)
}

/// Dispatches on the model's RoPE setting.
pub fn palu_decode_step(model: &PaluModel, cache: &mut LatentKVCache, x: &[f64], tile_len: usize) -> Result<Vec<f64>> {
    if model.config.rope.is_on() {
        palu_decode_step_rope(model, cache, x, tile_len)
    } else {
        palu_decode_step_norope(model, cache, x)
    }
}

/// Builds a latent cache for `prompt`, feeding tokens one at a time.
pub fn palu_prefill(model: &PaluModel, mode: CacheMode, prompt: &[Vec<f64>]) -> Result<LatentKVCache> {
    let mut cache = LatentKVCache::new(model, mode);
    for x in prompt {
        palu_decode_step(model, &mut cache, x, usize::MAX)?;
    }
    Ok(cache)
}
