//! Pipeline configuration. The JSON layout is published as
//! `schema/pipeline-config.schema.json`; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accounting::ModelPreset;
use crate::attention::{AttentionConfig, Rope, DEFAULT_ROPE_BASE};
use crate::decomposition::{Granularity, GranularityKind};
use crate::error::{PaluError, Result};
use crate::quant::QuantParams;
use crate::rank::Rounding;

pub const SCHEMA: &str = include_str!("../schema/pipeline-config.schema.json");

/// Quantization preset that adds the KV-size comparison block to reports.
pub const PRESET_TABLE2: &str = "palu-table2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticModel {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    /// Geometric singular-value decay of each wk/wv head slice; Gaussian
    /// weights when absent.
    #[serde(default)]
    pub spectrum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Synthetic(SyntheticModel),
    /// Named preset; accounting only.
    Preset(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountingOptions {
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default = "default_tokens")]
    pub tokens: u64,
    #[serde(default)]
    pub metadata: bool,
}

impl Default for AccountingOptions {
    fn default() -> Self {
        AccountingOptions {
            preset: default_preset(),
            tokens: default_tokens(),
            metadata: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSource,
    #[serde(default = "default_granularity")]
    pub granularity: GranularityKind,
    #[serde(default)]
    pub group_size: Option<usize>,
    /// Fraction of the KV width kept, in (0, 1].
    #[serde(default = "default_rate")]
    pub budget_rate: f64,
    #[serde(default = "one")]
    pub min_rank: usize,
    #[serde(default)]
    pub rounding: Rounding,
    /// Fisher-weighted allocation; equal scores otherwise.
    #[serde(default)]
    pub fisher: bool,
    #[serde(default)]
    pub whitened: bool,
    #[serde(default = "default_calib_tokens")]
    pub calibration_tokens: usize,
    #[serde(default = "default_calib_batches")]
    pub calibration_batches: usize,
    /// Latent bit width; 16 disables quantization.
    #[serde(default = "default_bits")]
    pub bits: u8,
    #[serde(default = "yes")]
    pub quantize_keys: bool,
    #[serde(default)]
    pub hadamard: bool,
    #[serde(default)]
    pub rope: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_tile")]
    pub tile_len: usize,
    #[serde(default = "default_stream")]
    pub stream_len: usize,
    #[serde(default)]
    pub quant_preset: Option<String>,
    #[serde(default)]
    pub accounting: AccountingOptions,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_preset() -> String {
    "llama2-7b".into()
}
fn default_tokens() -> u64 {
    131_072
}
fn default_granularity() -> GranularityKind {
    GranularityKind::GroupHead
}
fn default_rate() -> f64 {
    0.5
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_calib_tokens() -> usize {
    64
}
fn default_calib_batches() -> usize {
    4
}
fn default_bits() -> u8 {
    16
}
fn default_rope_base() -> f64 {
    DEFAULT_ROPE_BASE
}
fn default_tile() -> usize {
    16
}
fn default_stream() -> usize {
    32
}
fn default_out() -> PathBuf {
    PathBuf::from("palu-out")
}

impl PipelineConfig {
    /// Small synthetic model with group size 2, used when no config file
    /// is given.
    pub fn desk_default() -> Self {
        PipelineConfig {
            seed: 0,
            model: ModelSource::Synthetic(SyntheticModel {
                d_model: 32,
                n_heads: 4,
                head_dim: 8,
                layers: 2,
                spectrum: Some(0.8),
            }),
            granularity: GranularityKind::GroupHead,
            group_size: Some(2),
            budget_rate: default_rate(),
            min_rank: 1,
            rounding: Rounding::None,
            fisher: false,
            whitened: false,
            calibration_tokens: default_calib_tokens(),
            calibration_batches: default_calib_batches(),
            bits: 16,
            quantize_keys: true,
            hadamard: false,
            rope: false,
            rope_base: DEFAULT_ROPE_BASE,
            tile_len: default_tile(),
            stream_len: default_stream(),
            quant_preset: None,
            accounting: AccountingOptions::default(),
            out_dir: default_out(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| PaluError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PaluError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(PaluError::Config(m));
        if !(self.budget_rate > 0.0 && self.budget_rate <= 1.0) {
            return cfg(format!("budget_rate {} must be in (0, 1]", self.budget_rate));
        }
        if self.min_rank == 0 {
            return cfg("min_rank must be at least 1".into());
        }
        if let Rounding::Block(0) = self.rounding {
            return cfg("block rounding needs a positive block".into());
        }
        if self.bits != 16 {
            QuantParams::new(self.bits).map_err(|_| PaluError::Config(format!("bits must be 2, 3, 4, 8 or 16, got {}", self.bits)))?;
        }
        if self.tile_len == 0 {
            return cfg("tile_len must be positive".into());
        }
        if self.calibration_tokens == 0 || self.calibration_batches == 0 || self.calibration_batches > self.calibration_tokens {
            return cfg("need 1 <= calibration_batches <= calibration_tokens".into());
        }
        if let Some(p) = &self.quant_preset {
            if p != PRESET_TABLE2 {
                return cfg(format!("unknown quant_preset {p:?}; known: {PRESET_TABLE2}"));
            }
        }
        ModelPreset::by_name(&self.accounting.preset)?;
        let n_heads = match &self.model {
            ModelSource::Synthetic(s) => {
                if let Some(g) = s.spectrum {
                    if !(g > 0.0 && g <= 1.0) {
                        return cfg(format!("spectrum {g} must be in (0, 1]"));
                    }
                }
                self.attention()?;
                s.n_heads
            }
            ModelSource::Preset(name) => ModelPreset::by_name(name)?.n_heads,
        };
        self.granularity_for(n_heads).map_err(|e| PaluError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn granularity_for(&self, n_heads: usize) -> Result<Granularity> {
        Granularity::from_kind(self.granularity, self.group_size, n_heads)
    }

    pub fn synthetic(&self) -> Result<&SyntheticModel> {
        match &self.model {
            ModelSource::Synthetic(s) => Ok(s),
            ModelSource::Preset(p) => Err(PaluError::Config(format!(
                "model preset {p:?} is accounting-only; this command needs a synthetic model"
            ))),
        }
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        let s = self.synthetic()?;
        let c = AttentionConfig {
            d_model: s.d_model,
            n_heads: s.n_heads,
            head_dim: s.head_dim,
            rope: if self.rope {
                Rope::On { base: self.rope_base }
            } else {
                Rope::Off
            },
            layers: s.layers,
        };
        c.validate().map_err(|e| PaluError::Config(e.to_string()))?;
        Ok(c)
    }

    /// The synthetic model as an accounting preset.
    pub fn model_preset(&self) -> Result<ModelPreset> {
        match &self.model {
            ModelSource::Synthetic(s) => Ok(ModelPreset {
                name: "synthetic".into(),
                layers: s.layers,
                n_heads: s.n_heads,
                head_dim: s.head_dim,
                d_model: s.d_model,
                kv_dtype_bits: 16,
                ffn_dim: 0,
                vocab: 0,
            }),
            ModelSource::Preset(p) => ModelPreset::by_name(p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = PipelineConfig::from_json(
            r#"{"model": {"synthetic": {"d_model": 16, "n_heads": 4, "head_dim": 4, "layers": 1}}, "group_size": 2}"#,
        )
        .unwrap();
        assert_eq!(c.bits, 16);
        assert_eq!(c.budget_rate, 0.5);
        assert_eq!(c.accounting.tokens, 131072);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let base = serde_json::to_value(PipelineConfig::desk_default()).unwrap();
        let mut v = base.clone();
        v["colour"] = "red".into();
        assert!(PipelineConfig::from_json(&v.to_string()).is_err());
        let mut v = base.clone();
        v["model"]["synthetic"]["layers"] = 0.into();
        let err = PipelineConfig::from_json(&v.to_string()).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let mut v = base.clone();
        v["bits"] = 5.into();
        assert!(PipelineConfig::from_json(&v.to_string()).is_err());
        let mut v = base;
        v["group_size"] = 3.into();
        assert!(PipelineConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn schema_lists_every_field() {
        let schema: serde_json::Value = serde_json::from_str(SCHEMA).unwrap();
        let props = schema["properties"].as_object().unwrap();
        let cfg = serde_json::to_value(PipelineConfig::desk_default()).unwrap();
        let mut fields: Vec<&String> = cfg.as_object().unwrap().keys().collect();
        let mut listed: Vec<&String> = props.keys().collect();
        fields.sort();
        listed.sort();
        assert_eq!(fields, listed);
        assert_eq!(schema["additionalProperties"], false);
        let synth = &schema["$defs"]["synthetic"]["properties"];
        for k in ["d_model", "n_heads", "head_dim", "layers", "spectrum"] {
            assert!(synth.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn preset_models_are_accounting_only() {
        let c = PipelineConfig::from_json(r#"{"model": {"preset": "llama2-7b"}, "group_size": 4}"#).unwrap();
        assert!(c.attention().is_err());
        assert_eq!(c.model_preset().unwrap().d_model, 4096);
    }
}
