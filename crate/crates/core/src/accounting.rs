//! Analytic memory and compute accounting: KV-cache sizes, compression
//! rates, factor-pair weight overhead and reconstruction MACs.
//!
//! Sizes use binary units throughout: "GB" is 2³⁰ bytes and "128K" tokens
//! is 131072.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decomposition::Granularity;
use crate::error::{PaluError, Result};
use crate::quant::round_half_away;
use crate::rank::{kv_targets, uniform_plan, RankPlan, Rounding};

pub const GIB: f64 = (1u64 << 30) as f64;
/// Quantization metadata per token per group: one 32-bit scale and one
/// 32-bit zero point.
pub const METADATA_BYTES_PER_GROUP: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPreset {
    pub name: String,
    pub layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    #[serde(default = "default_kv_bits")]
    pub kv_dtype_bits: u32,
    /// MLP hidden width; only used for whole-model weight totals.
    #[serde(default)]
    pub ffn_dim: usize,
    #[serde(default)]
    pub vocab: usize,
}

fn default_kv_bits() -> u32 {
    16
}

impl ModelPreset {
    pub fn llama2_7b() -> Self {
        ModelPreset {
            name: "llama2-7b".into(),
            layers: 32,
            n_heads: 32,
            head_dim: 128,
            d_model: 4096,
            kv_dtype_bits: 16,
            ffn_dim: 11008,
            vocab: 32000,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "llama2-7b" => Ok(Self::llama2_7b()),
            other => Err(PaluError::Config(format!("unknown model preset {other:?}; known: llama2-7b"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.n_heads == 0 || self.head_dim == 0 || self.kv_dtype_bits == 0 {
            return Err(PaluError::invalid(format!("preset {}: sizes must be positive", self.name)));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(PaluError::invalid(format!(
                "preset {}: d_model {} != {} heads x {}",
                self.name, self.d_model, self.n_heads, self.head_dim
            )));
        }
        Ok(())
    }

    /// Key and value targets at the given granularity.
    pub fn targets(&self, granularity: Granularity) -> Result<Vec<(String, usize)>> {
        granularity.validate(self.n_heads)?;
        Ok(kv_targets(
            self.layers,
            granularity.n_groups(self.n_heads),
            granularity.group_size * self.head_dim,
        ))
    }

    /// Equal-score plan keeping `rate` of the KV width.
    pub fn uniform_plan(&self, granularity: Granularity, rate: f64) -> Result<RankPlan> {
        uniform_plan(&self.targets(granularity)?, self.d_model, rate, 1, Rounding::None)
    }

    /// Bytes of all model weights at `kv_dtype_bits`, ignoring norms and
    /// biases.
    pub fn weight_bytes(&self) -> u64 {
        let d = self.d_model as u64;
        let per_layer = 4 * d * d + 3 * d * self.ffn_dim as u64;
        let params = self.layers as u64 * per_layer + 2 * self.vocab as u64 * d;
        params * self.kv_dtype_bits as u64 / 8
    }
}

fn bits_to_bytes(bits: u128) -> u64 {
    bits.div_ceil(8) as u64
}

/// Cache sizes for one sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvBytes {
    pub baseline: u64,
    pub compressed: u64,
    /// Scale/zero-point bytes; zero unless requested and quantized.
    pub metadata: u64,
}

impl KvBytes {
    /// 1 − compressed/baseline, metadata excluded.
    pub fn compression_rate(&self) -> f64 {
        if self.baseline == 0 {
            return 0.0;
        }
        1.0 - self.compressed as f64 / self.baseline as f64
    }

    pub fn compression_rate_with_metadata(&self) -> f64 {
        if self.baseline == 0 {
            return 0.0;
        }
        1.0 - (self.compressed + self.metadata) as f64 / self.baseline as f64
    }
}

/// KV-cache bytes for `tokens` tokens. Without a plan every head keeps its
/// full width. Metadata (8 bytes per token per cached group) is counted
/// only when `with_metadata` is set and `bits` is below the preset's dtype.
pub fn kv_cache_bytes(
    preset: &ModelPreset,
    tokens: u64,
    plan: Option<&RankPlan>,
    bits: u32,
    with_metadata: bool,
) -> Result<KvBytes> {
    preset.validate()?;
    if bits == 0 {
        return Err(PaluError::invalid("bits must be positive"));
    }
    let full_width = 2 * preset.layers as u128 * preset.d_model as u128;
    let baseline = bits_to_bytes(full_width * tokens as u128 * preset.kv_dtype_bits as u128);
    let (width, groups) = match plan {
        Some(p) => (p.total_rank() as u128, p.entries.len() as u64),
        None => (full_width, 2 * (preset.layers * preset.n_heads) as u64),
    };
    let compressed = bits_to_bytes(width * tokens as u128 * bits as u128);
    let metadata = if with_metadata && bits < preset.kv_dtype_bits {
        groups * tokens * METADATA_BYTES_PER_GROUP
    } else {
        0
    };
    Ok(KvBytes {
        baseline,
        compressed,
        metadata,
    })
}

/// Storage of a rank-`r` factor pair relative to the dense m × n matrix.
pub fn weight_ratio(m: f64, n: f64, r: f64) -> f64 {
    (m * r + r * n) / (m * n)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconMacs {
    /// Per head, in head order.
    pub per_head: Vec<u64>,
    /// Per group.
    pub per_group: Vec<u64>,
    pub total: u64,
}

/// Multiply-accumulates to rebuild one token's keys from its latent:
/// every head in a group reads the whole group latent, so a head costs
/// `r_g·d_h` and a group `r_g·d_h·s`.
pub fn recon_macs(granularity: Granularity, ranks: &[usize], head_dim: usize, n_heads: usize) -> Result<ReconMacs> {
    granularity.validate(n_heads)?;
    let groups = granularity.n_groups(n_heads);
    if ranks.len() != groups {
        return Err(PaluError::invalid(format!("{} ranks for {groups} groups", ranks.len())));
    }
    let s = granularity.group_size as u64;
    let per_group: Vec<u64> = ranks.iter().map(|&r| r as u64 * head_dim as u64 * s).collect();
    let per_head = (0..n_heads)
        .map(|h| ranks[h / granularity.group_size] as u64 * head_dim as u64)
        .collect();
    Ok(ReconMacs {
        per_head,
        total: per_group.iter().sum(),
        per_group,
    })
}

/// Desk-scale comparison of the three granularities at equal total latent
/// width `total_rank`, as printed by `report --recon-macs`.
pub fn recon_macs_table(n_heads: usize, head_dim: usize, total_rank: usize, group_size: usize) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "reconstruction MACs per token: n_heads={n_heads} head_dim={head_dim} total latent width={total_rank}"
    );
    let _ = writeln!(out, "{:<14} {:>8} {:>10} {:>10} {:>10}", "granularity", "rank/grp", "per-head", "total", "vs M-LRD");
    let m = Granularity::multi_head();
    let mut grans = vec![m];
    if group_size > 1 && group_size < n_heads {
        grans.push(Granularity::group_head(group_size));
    }
    grans.push(Granularity::joint_head(n_heads));
    let mut base = None;
    for g in grans {
        let groups = g.n_groups(n_heads);
        if !total_rank.is_multiple_of(groups) {
            return Err(PaluError::invalid(format!("total rank {total_rank} does not split over {groups} groups")));
        }
        let r = total_rank / groups;
        let macs = recon_macs(g, &vec![r; groups], head_dim, n_heads)?;
        let head = macs.per_head[0];
        let b = *base.get_or_insert(head);
        let _ = writeln!(
            out,
            "{:<14} {:>8} {:>10} {:>10} {:>9}x",
            g.label(),
            r,
            head,
            macs.total,
            format_ratio(head as f64 / b as f64)
        );
    }
    Ok(out)
}

fn format_ratio(x: f64) -> String {
    let v = round_half_away(x * 100.0) / 100.0;
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Percentage with two decimals, rounded half away from zero; whole
/// percentages drop the decimals ("30%", "86.87%").
pub fn format_percent(rate: f64) -> String {
    format!("{}%", format_ratio(rate * 100.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetWeightRatio {
    pub target_id: String,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub ratio: f64,
}

/// Accounting summary for one plan and bit width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub preset: String,
    pub tokens: u64,
    pub bits: u32,
    pub kv_bytes_baseline: u64,
    pub kv_bytes_compressed: u64,
    pub compression_rate: f64,
    pub compression_rate_with_metadata: f64,
    pub weight_ratio_per_target: Vec<TargetWeightRatio>,
    /// Key-side reconstruction MACs for one cached token (RoPE path).
    pub recon_macs_per_step: u64,
    /// Bytes of the per-head fused value/output blocks.
    pub fused_weight_bytes: u64,
    pub metadata_bytes: u64,
    pub total_bytes_without_metadata: u64,
    pub total_bytes_with_metadata: u64,
}

impl CostReport {
    pub fn build(preset: &ModelPreset, tokens: u64, plan: &RankPlan, bits: u32, with_metadata: bool) -> Result<Self> {
        let kv = kv_cache_bytes(preset, tokens, Some(plan), bits, with_metadata)?;
        let d = preset.d_model;
        let dh = preset.head_dim;
        let weight_ratio_per_target = plan
            .entries
            .iter()
            .map(|e| TargetWeightRatio {
                target_id: e.target_id.clone(),
                rows: d,
                cols: e.full_width,
                rank: e.allocated_rank,
                ratio: weight_ratio(d as f64, e.full_width as f64, e.allocated_rank as f64),
            })
            .collect();
        let mut recon = 0u64;
        let mut fused = 0u64;
        for e in &plan.entries {
            if e.full_width % dh != 0 {
                return Err(PaluError::invalid(format!(
                    "target {} width {} is not a multiple of head_dim {dh}",
                    e.target_id, e.full_width
                )));
            }
            let s = (e.full_width / dh) as u64;
            match crate::rank::kv_role(&e.target_id) {
                Some(crate::rank::KvRole::Key) => recon += e.allocated_rank as u64 * dh as u64 * s,
                Some(crate::rank::KvRole::Value) => fused += e.allocated_rank as u64 * s * d as u64,
                None => {}
            }
        }
        let fused_weight_bytes = fused * preset.kv_dtype_bits as u64 / 8;
        Ok(CostReport {
            preset: preset.name.clone(),
            tokens,
            bits,
            kv_bytes_baseline: kv.baseline,
            kv_bytes_compressed: kv.compressed,
            compression_rate: kv.compression_rate(),
            compression_rate_with_metadata: kv.compression_rate_with_metadata(),
            weight_ratio_per_target,
            recon_macs_per_step: recon,
            fused_weight_bytes,
            metadata_bytes: kv.metadata,
            total_bytes_without_metadata: kv.compressed,
            total_bytes_with_metadata: kv.compressed + kv.metadata,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One `key,value` line per scalar field; per-target ratios follow as
    /// `target,rows,cols,rank,ratio` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("field,value\n");
        for (k, v) in self.scalars() {
            let _ = writeln!(out, "{k},{v}");
        }
        out.push_str("target,rows,cols,rank,ratio\n");
        for t in &self.weight_ratio_per_target {
            let _ = writeln!(out, "{},{},{},{},{}", t.target_id, t.rows, t.cols, t.rank, t.ratio);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "cost report: {} at {} tokens, {}-bit latents", self.preset, self.tokens, self.bits);
        for (k, v) in self.scalars() {
            let _ = writeln!(out, "  {k:<32} {v}");
        }
        let ratios: Vec<f64> = self.weight_ratio_per_target.iter().map(|t| t.ratio).collect();
        if !ratios.is_empty() {
            let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
            let _ = writeln!(out, "  {:<32} {:.6}", "mean factor-pair weight ratio", mean);
        }
        out
    }

    fn scalars(&self) -> Vec<(&'static str, String)> {
        vec![
            ("kv_bytes_baseline", self.kv_bytes_baseline.to_string()),
            ("kv_bytes_compressed", self.kv_bytes_compressed.to_string()),
            ("kv_gb_baseline", format!("{:.4}", self.kv_bytes_baseline as f64 / GIB)),
            ("kv_gb_compressed", format!("{:.4}", self.kv_bytes_compressed as f64 / GIB)),
            ("compression_rate", format!("{:.6}", self.compression_rate)),
            ("compression_rate_with_metadata", format!("{:.6}", self.compression_rate_with_metadata)),
            ("recon_macs_per_step", self.recon_macs_per_step.to_string()),
            ("fused_weight_bytes", self.fused_weight_bytes.to_string()),
            ("metadata_bytes", self.metadata_bytes.to_string()),
            ("total_bytes_without_metadata", self.total_bytes_without_metadata.to_string()),
            ("total_bytes_with_metadata", self.total_bytes_with_metadata.to_string()),
        ]
    }
}

/// Whole-model memory at one sequence length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub tokens: u64,
    pub weight_bytes_baseline: u64,
    pub weight_bytes_compressed: u64,
    pub kv_bytes_baseline: u64,
    pub kv_bytes_compressed: u64,
    /// baseline KV / compressed KV.
    pub kv_reduction: f64,
    /// (weights + KV) baseline over compressed.
    pub total_reduction: f64,
}

/// Weights stay at the preset dtype; the dense wk/wv are replaced by their
/// factor pairs (`d·r + r·width` per target).
pub fn total_memory_breakdown(preset: &ModelPreset, tokens: u64, plan: &RankPlan, bits: u32) -> Result<MemoryBreakdown> {
    let kv = kv_cache_bytes(preset, tokens, Some(plan), bits, false)?;
    let d = preset.d_model as u64;
    let wbytes = preset.kv_dtype_bits as u64;
    let dense_kv = 2 * preset.layers as u64 * d * d * wbytes / 8;
    let factors: u64 = plan
        .entries
        .iter()
        .map(|e| (d * e.allocated_rank as u64 + e.allocated_rank as u64 * e.full_width as u64) * wbytes / 8)
        .sum();
    let base_w = preset.weight_bytes();
    let comp_w = base_w - dense_kv + factors;
    let ratio = |a: u64, b: u64| if b == 0 { f64::INFINITY } else { a as f64 / b as f64 };
    Ok(MemoryBreakdown {
        tokens,
        weight_bytes_baseline: base_w,
        weight_bytes_compressed: comp_w,
        kv_bytes_baseline: kv.baseline,
        kv_bytes_compressed: kv.compressed,
        kv_reduction: if kv.baseline == 0 { 1.0 } else { ratio(kv.baseline, kv.compressed) },
        total_reduction: ratio(base_w + kv.baseline, comp_w + kv.compressed),
    })
}

pub fn memory_table(rows: &[MemoryBreakdown]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>8} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8}",
        "tokens", "w_base_gb", "w_palu_gb", "kv_base_gb", "kv_palu_gb", "kv_x", "total_x"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>8} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>8.2} {:>8.2}",
            r.tokens,
            r.weight_bytes_baseline as f64 / GIB,
            r.weight_bytes_compressed as f64 / GIB,
            r.kv_bytes_baseline as f64 / GIB,
            r.kv_bytes_compressed as f64 / GIB,
            r.kv_reduction,
            r.total_reduction
        );
    }
    out
}

/// Sequence length of the KV-size comparison table.
pub const TABLE2_TOKENS: u64 = 128 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub method: String,
    pub bits: u32,
    pub kv_bytes: u64,
    pub compression_rate: Option<f64>,
}

impl Table2Row {
    pub fn size_gb(&self) -> f64 {
        self.kv_bytes as f64 / GIB
    }
}

/// Baseline plus uniform 30%/50% plans (group size 4) at 16, 3 and 2 bits.
pub fn table2_rows(preset: &ModelPreset) -> Result<Vec<Table2Row>> {
    let gran = Granularity::group_head(4);
    let base = kv_cache_bytes(preset, TABLE2_TOKENS, None, preset.kv_dtype_bits, false)?;
    let mut rows = vec![Table2Row {
        method: "Baseline".into(),
        bits: preset.kv_dtype_bits,
        kv_bytes: base.baseline,
        compression_rate: None,
    }];
    let plans = [(30, preset.uniform_plan(gran, 0.7)?), (50, preset.uniform_plan(gran, 0.5)?)];
    for bits in [16, 3, 2] {
        for (pct, plan) in &plans {
            let kv = kv_cache_bytes(preset, TABLE2_TOKENS, Some(plan), bits, false)?;
            rows.push(Table2Row {
                method: format!("Palu-{pct}%"),
                bits,
                kv_bytes: kv.compressed,
                compression_rate: Some(kv.compression_rate()),
            });
        }
    }
    Ok(rows)
}

/// The KV-size block as printed by `report` and the `palu-table2` preset.
pub fn table2_text(preset: &ModelPreset) -> Result<String> {
    let rows = table2_rows(preset)?;
    let mut out = String::new();
    let _ = writeln!(out, "KV-cache size: {}, {} tokens, GB = 2^30 bytes, metadata excluded", preset.name, TABLE2_TOKENS);
    let _ = writeln!(out, "{:<10} {:>4} {:>8} {:>10}", "method", "bit", "size_gb", "comp_rate");
    for r in rows {
        let rate = r.compression_rate.map_or_else(|| "-".to_string(), format_percent);
        let _ = writeln!(out, "{:<10} {:>4} {:>8.1} {:>10}", r.method, r.bits, r.size_gb(), rate);
    }
    Ok(out)
}

/// Expected block, transcribed from the published table.
pub const TABLE2_GOLDEN: &str = include_str!("../golden/table2.txt");

/// Compares a rendered report against a named golden text.
pub fn check_golden(name: &str, actual: &str) -> Result<()> {
    let expected = match name {
        "table2" => TABLE2_GOLDEN,
        other => return Err(PaluError::Config(format!("unknown golden {other:?}; known: table2"))),
    };
    if actual == expected {
        return Ok(());
    }
    let diff: Vec<String> = expected
        .lines()
        .zip(actual.lines())
        .enumerate()
        .filter(|(_, (e, a))| e != a)
        .map(|(i, (e, a))| format!("line {}: expected {e:?}, got {a:?}", i + 1))
        .collect();
    let msg = if diff.is_empty() {
        format!("{name}: line count differs")
    } else {
        format!("{name}: {}", diff.join("; "))
    };
    Err(PaluError::GoldenMismatch(msg))
}
