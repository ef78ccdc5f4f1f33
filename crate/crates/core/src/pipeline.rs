//! End-to-end stages behind the CLI verbs. Every stage reads its inputs
//! from and writes its outputs to `out_dir`, so each can be run alone once
//! its predecessors have produced their files.
//!
//! All randomness comes from the config seed; each stage derives its own
//! stream with `derive_seed(seed, stage)`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::accounting::{check_golden, table2_rows, table2_text, CostReport, ModelPreset, Table2Row};
use crate::attention::{
    palu_decode_step, reference_decode, token_stream, AttentionConfig, LayerTrace, CacheMode, LayerWeights, ModelWeights,
    PaluModel, Rope,
};
use crate::config::{ModelSource, PipelineConfig, PRESET_TABLE2};
use crate::container::{Container, Tensor, TensorData};
use crate::decomposition::{
    decompose, frobenius_error, CalibrationSet, DecomposedLayer, FactorPair, Granularity, HeadShape, Whitening,
};
use crate::error::{PaluError, Result};
use crate::quant::{fuse_hadamard, outlier_metric, quantize, QuantParams, QuantizedLatent};
use crate::rank::{allocate, estimate_fisher, kv_targets, plan_report, target_id, FisherScore, KvRole, RankPlan};
use crate::tensor::{derive_seed, gaussian_matrix, relative_error_vec, Matrix};

pub const MODEL_FILE: &str = "model.palu";
pub const FISHER_FILE: &str = "fisher.json";
pub const PLAN_FILE: &str = "plan.json";
pub const DECOMPOSED_FILE: &str = "decomposed.palu";
pub const ROTATED_FILE: &str = "rotated.palu";
pub const ROTATION_FILE: &str = "rotation.json";
pub const QUANTIZED_FILE: &str = "quantized.palu";
pub const QUANTIZE_FILE: &str = "quantize.json";
pub const RUN_FILE: &str = "run.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TABLE2_FILE: &str = "table2.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenModel,
    Fisher,
    Allocate,
    Decompose,
    Rotate,
    Quantize,
    Run,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenModel => "gen-model",
            Stage::Fisher => "fisher",
            Stage::Allocate => "allocate",
            Stage::Decompose => "decompose",
            Stage::Rotate => "rotate",
            Stage::Quantize => "quantize",
            Stage::Run => "run",
            Stage::Report => "report",
        }
    }
}

/// Runs one stage, tagging any error with the stage name. Returns the
/// human-readable summary.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<String> {
    let out = match stage {
        Stage::GenModel => gen_model(cfg),
        Stage::Fisher => fisher(cfg),
        Stage::Allocate => allocate_stage(cfg),
        Stage::Decompose => decompose_stage(cfg),
        Stage::Rotate => rotate(cfg),
        Stage::Quantize => quantize_stage(cfg),
        Stage::Run => run(cfg),
        Stage::Report => report(cfg).map(|r| r.text),
    };
    out.map_err(|e| e.in_stage(stage.name()))
}

/// The full chain. Optional stages follow the config: fisher when
/// `fisher`, rotate when `hadamard`, quantize when `bits < 16`. Preset
/// models only allocate and report.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<String> {
    let stages: Vec<Stage> = match cfg.model {
        ModelSource::Preset(_) => vec![Stage::Allocate, Stage::Report],
        ModelSource::Synthetic(_) => {
            let mut s = vec![Stage::GenModel];
            if cfg.fisher {
                s.push(Stage::Fisher);
            }
            s.extend([Stage::Allocate, Stage::Decompose]);
            if cfg.hadamard {
                s.push(Stage::Rotate);
            }
            if cfg.bits < 16 {
                s.push(Stage::Quantize);
            }
            s.extend([Stage::Run, Stage::Report]);
            s
        }
    };
    let mut out = String::new();
    for stage in stages {
        let text = run_stage(stage, cfg)?;
        if stage == Stage::Report {
            out.push_str(&text);
        } else {
            let _ = writeln!(out, "[{}] {}", stage.name(), text.lines().next().unwrap_or(""));
        }
    }
    Ok(out)
}

fn path(cfg: &PipelineConfig, file: &str) -> PathBuf {
    cfg.out_dir.join(file)
}

fn ensure_out(cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<T> {
    let text = fs::read_to_string(p).map_err(|e| PaluError::Config(format!("{}: {e}", p.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(p: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(p, text)?;
    Ok(())
}

fn require(p: &Path, producer: &str) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(PaluError::Config(format!("{} not found; run `{producer}` first", p.display())))
    }
}

fn weight_name(layer: usize, w: &str) -> String {
    format!("l{layer}.{w}")
}

pub fn model_container(weights: &ModelWeights, config: &AttentionConfig, meta: serde_json::Value) -> Result<Container> {
    let mut c = Container::new();
    for (l, lw) in weights.layers.iter().enumerate() {
        for (name, m) in [("wq", &lw.wq), ("wk", &lw.wk), ("wv", &lw.wv), ("wo", &lw.wo)] {
            c.insert_matrix(weight_name(l, name), m)?;
        }
    }
    c.meta = json!({"kind": "model", "d_model": config.d_model, "n_heads": config.n_heads,
        "head_dim": config.head_dim, "layers": config.layers, "info": meta});
    Ok(c)
}

/// Loads the weights written by `gen-model`, checking them against the
/// config's shape.
pub fn load_model(cfg: &PipelineConfig) -> Result<(AttentionConfig, ModelWeights)> {
    let att = cfg.attention()?;
    let p = path(cfg, MODEL_FILE);
    require(&p, "gen-model")?;
    let c = Container::read(&p)?;
    for (k, v) in [("d_model", att.d_model), ("n_heads", att.n_heads), ("head_dim", att.head_dim), ("layers", att.layers)] {
        if c.meta.get(k).and_then(|x| x.as_u64()) != Some(v as u64) {
            return Err(PaluError::Config(format!("{}: {k} does not match the config", p.display())));
        }
    }
    let layers = (0..att.layers)
        .map(|l| {
            Ok(LayerWeights {
                wq: c.matrix(&weight_name(l, "wq"))?,
                wk: c.matrix(&weight_name(l, "wk"))?,
                wv: c.matrix(&weight_name(l, "wv"))?,
                wo: c.matrix(&weight_name(l, "wo"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = ModelWeights { layers };
    weights.validate(&att)?;
    Ok((att, weights))
}

fn gen_model(cfg: &PipelineConfig) -> Result<String> {
    let synth = cfg.synthetic()?;
    let att = cfg.attention()?;
    let seed = derive_seed(cfg.seed, "gen-model");
    let weights = ModelWeights::synthetic(&att, synth.spectrum, seed)?;
    ensure_out(cfg)?;
    let c = model_container(&weights, &att, json!({"seed": cfg.seed, "spectrum": synth.spectrum}))?;
    c.write(path(cfg, MODEL_FILE))?;
    let mut out = format!(
        "wrote {} (seed {}, {} layers, d_model {}, {} heads x {})\n",
        MODEL_FILE, cfg.seed, att.layers, att.d_model, att.n_heads, att.head_dim
    );
    for (name, t) in &c.tensors {
        let _ = writeln!(out, "  {name:<8} {:?}", t.shape);
    }
    Ok(out)
}

/// Per-layer calibration inputs: a seeded token stream pushed through the
/// reference model, recording each layer's input rows.
pub fn calibration_inputs(cfg: &PipelineConfig, att: &AttentionConfig, weights: &ModelWeights) -> Result<Vec<Matrix>> {
    let mut tokens = token_stream(att.d_model, cfg.calibration_tokens, derive_seed(cfg.seed, "calibration"));
    let single = AttentionConfig { layers: 1, ..*att };
    let mut inputs = Vec::with_capacity(att.layers);
    for lw in &weights.layers {
        inputs.push(Matrix::from_rows(&tokens)?);
        let one = ModelWeights { layers: vec![lw.clone()] };
        tokens = reference_decode(&one, &single, &tokens)?.0;
    }
    Ok(inputs)
}

struct Target {
    id: String,
    layer: usize,
    role: KvRole,
    group: usize,
}

fn targets(att: &AttentionConfig, g: Granularity) -> Vec<Target> {
    let mut out = Vec::new();
    for layer in 0..att.layers {
        for role in [KvRole::Key, KvRole::Value] {
            for group in 0..g.n_groups(att.n_heads) {
                out.push(Target {
                    id: target_id(layer, role, group),
                    layer,
                    role,
                    group,
                });
            }
        }
    }
    out
}

fn role_weight(lw: &LayerWeights, role: KvRole) -> &Matrix {
    match role {
        KvRole::Key => &lw.wk,
        KvRole::Value => &lw.wv,
    }
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn squared_error(out: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    out.iter()
        .zip(target)
        .flat_map(|(o, t)| o.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
        .sum()
}

/// Fisher scores under an end-to-end Gaussian model: each calibration batch
/// `X_b` (the inputs of the target's layer, as its own sequence) is decoded
/// through the remaining layers, `Y_b = f(X_b; W₀) + ε` with unit noise,
/// and the loss is `½‖f(X_b; W) − Y_b‖²`. Only the heads of the target's
/// `wk`/`wv` slice are re-evaluated when it is perturbed.
fn fisher(cfg: &PipelineConfig) -> Result<String> {
    let (att, weights) = load_model(cfg)?;
    let g = cfg.granularity_for(att.n_heads)?;
    let calib = calibration_inputs(cfg, &att, &weights)?;
    let dh = att.head_dim;
    let width = g.group_size * dh;
    let batches = cfg.calibration_batches;
    let seed = derive_seed(cfg.seed, "fisher");
    let scores = targets(&att, g)
        .par_iter()
        .map(|t| {
            let lw = &weights.layers[t.layer];
            let w0 = role_weight(lw, t.role).col_slice(t.group * width..(t.group + 1) * width)?;
            let rest = ModelWeights {
                layers: weights.layers[t.layer + 1..].to_vec(),
            };
            let rest_cfg = AttentionConfig {
                layers: rest.layers.len(),
                ..att
            };
            let finish = |rows: Vec<Vec<f64>>| -> Result<Vec<Vec<f64>>> {
                if rest.layers.is_empty() {
                    Ok(rows)
                } else {
                    reference_decode(&rest, &rest_cfg, &rows).map(|(out, _)| out)
                }
            };
            let x = &calib[t.layer];
            let n = x.rows();
            let xb: Vec<Vec<Vec<f64>>> = (0..batches)
                .map(|b| x.row_slice(b * n / batches..(b + 1) * n / batches).map(|m| rows_of(&m)))
                .collect::<Result<_>>()?;
            let traces: Vec<LayerTrace> = xb.iter().map(|xs| LayerTrace::new(lw, &att, xs)).collect::<Result<_>>()?;
            let yb: Vec<Vec<Vec<f64>>> = traces
                .iter()
                .enumerate()
                .map(|(b, tr)| {
                    let out = finish(tr.output(lw, &att))?;
                    let noise = gaussian_matrix(out.len(), att.d_model, derive_seed(seed, &format!("{}/{b}", t.id)));
                    Ok(out
                        .iter()
                        .enumerate()
                        .map(|(r, o)| o.iter().zip(noise.row(r)).map(|(a, e)| a + e).collect())
                        .collect())
                })
                .collect::<Result<_>>()?;
            let w0_heads: Vec<Matrix> = (0..g.group_size).map(|j| w0.col_slice(j * dh..(j + 1) * dh)).collect::<Result<_>>()?;
            let loss = |w: &Matrix, b: usize| -> Result<f64> {
                let mut updates = Vec::new();
                for (j, base) in w0_heads.iter().enumerate() {
                    let block = w.col_slice(j * dh..(j + 1) * dh)?;
                    if block != *base {
                        updates.push((t.group * g.group_size + j, block));
                    }
                }
                let out = finish(traces[b].output_with_heads(lw, &att, &xb[b], t.role, &updates)?)?;
                Ok(0.5 * squared_error(&out, &yb[b]))
            };
            estimate_fisher(&t.id, &w0, |w, b| loss(w, b).unwrap_or(f64::NAN), batches)
        })
        .collect::<Result<Vec<FisherScore>>>()?;
    write_json(&path(cfg, FISHER_FILE), &scores)?;
    let mut out = format!("wrote {FISHER_FILE} ({} targets)\n", scores.len());
    for s in &scores {
        let _ = writeln!(out, "  {:<10} {:.6e}", s.target_id, s.score);
    }
    Ok(out)
}

fn plan_targets(cfg: &PipelineConfig) -> Result<(Vec<(String, usize)>, usize)> {
    let preset = cfg.model_preset()?;
    let g = cfg.granularity_for(preset.n_heads)?;
    Ok((
        kv_targets(preset.layers, g.n_groups(preset.n_heads), g.group_size * preset.head_dim),
        preset.d_model,
    ))
}

/// The rank plan for the config: Fisher-weighted from `fisher.json` when
/// `fisher` is set, equal scores otherwise.
pub fn build_plan(cfg: &PipelineConfig) -> Result<RankPlan> {
    let (targets, d_model) = plan_targets(cfg)?;
    let scores: Vec<FisherScore> = if cfg.fisher {
        let p = path(cfg, FISHER_FILE);
        require(&p, "fisher")?;
        let scores: Vec<FisherScore> = read_json(&p)?;
        let ids: Vec<&str> = scores.iter().map(|s| s.target_id.as_str()).collect();
        let expect: Vec<&str> = targets.iter().map(|(id, _)| id.as_str()).collect();
        if ids != expect {
            return Err(PaluError::Config(format!("{} does not match the configured targets", p.display())));
        }
        scores
    } else {
        targets
            .iter()
            .map(|(id, _)| FisherScore {
                target_id: id.clone(),
                score: 1.0,
            })
            .collect()
    };
    let widths: Vec<usize> = targets.iter().map(|(_, w)| *w).collect();
    allocate(&scores, &widths, d_model, cfg.budget_rate, cfg.min_rank, cfg.rounding)
}

fn allocate_stage(cfg: &PipelineConfig) -> Result<String> {
    let plan = build_plan(cfg)?;
    ensure_out(cfg)?;
    write_json(&path(cfg, PLAN_FILE), &plan)?;
    Ok(format!(
        "wrote {PLAN_FILE} (total rank {} of {})\n{}",
        plan.total_rank(),
        plan.total_width(),
        plan_report(&plan).to_text()
    ))
}

fn load_plan(cfg: &PipelineConfig) -> Result<RankPlan> {
    let p = path(cfg, PLAN_FILE);
    require(&p, "allocate")?;
    read_json(&p)
}

fn group_ranks(plan: &RankPlan, layer: usize, role: KvRole, groups: usize) -> Result<Vec<usize>> {
    (0..groups)
        .map(|g| {
            let id = target_id(layer, role, g);
            plan.rank_of(&id)
                .ok_or_else(|| PaluError::Config(format!("plan has no entry for {id}")))
        })
        .collect()
}

/// Key and value factorizations, one `DecomposedLayer` per model layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Factors {
    pub keys: Vec<DecomposedLayer>,
    pub values: Vec<DecomposedLayer>,
}

fn factor_name(layer: usize, role: KvRole, group: usize, part: &str) -> String {
    format!("{}.{part}", target_id(layer, role, group))
}

pub fn factors_container(f: &Factors, meta: serde_json::Value) -> Result<Container> {
    let first = f.keys.first().ok_or_else(|| PaluError::invalid("no layers to store"))?;
    let mut c = Container::new();
    for (l, (k, v)) in f.keys.iter().zip(&f.values).enumerate() {
        for (role, dl) in [(KvRole::Key, k), (KvRole::Value, v)] {
            for (g, pair) in dl.groups.iter().enumerate() {
                c.insert_matrix(factor_name(l, role, g, "a"), &pair.a)?;
                c.insert_matrix(factor_name(l, role, g, "b"), &pair.b)?;
            }
        }
    }
    c.meta = json!({"kind": "factors", "granularity": first.granularity, "shape": first.shape,
        "layers": f.keys.len(), "info": meta});
    Ok(c)
}

pub fn factors_from_container(c: &Container) -> Result<Factors> {
    let field = |k: &str| c.meta.get(k).cloned().ok_or_else(|| PaluError::Format(format!("factor container lacks meta.{k}")));
    let granularity: Granularity = serde_json::from_value(field("granularity")?)?;
    let shape: HeadShape = serde_json::from_value(field("shape")?)?;
    let layers = field("layers")?.as_u64().ok_or_else(|| PaluError::Format("meta.layers".into()))? as usize;
    let groups = granularity.n_groups(shape.n_heads);
    let load = |l: usize, role: KvRole| -> Result<DecomposedLayer> {
        let pairs = (0..groups)
            .map(|g| {
                Ok(FactorPair {
                    a: c.matrix(&factor_name(l, role, g, "a"))?,
                    b: c.matrix(&factor_name(l, role, g, "b"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DecomposedLayer::from_parts(granularity, shape, pairs)
    };
    let mut f = Factors {
        keys: Vec::with_capacity(layers),
        values: Vec::with_capacity(layers),
    };
    for l in 0..layers {
        f.keys.push(load(l, KvRole::Key)?);
        f.values.push(load(l, KvRole::Value)?);
    }
    Ok(f)
}

fn decompose_stage(cfg: &PipelineConfig) -> Result<String> {
    let (att, weights) = load_model(cfg)?;
    let g = cfg.granularity_for(att.n_heads)?;
    let plan = load_plan(cfg)?;
    let calib = if cfg.whitened {
        Some(calibration_inputs(cfg, &att, &weights)?)
    } else {
        None
    };
    let shape = att.head_shape();
    let groups = g.n_groups(att.n_heads);
    let mut f = Factors {
        keys: Vec::new(),
        values: Vec::new(),
    };
    let mut out = format!("wrote {DECOMPOSED_FILE} ({}, {})\n", g.label(), if cfg.whitened { "whitened" } else { "plain" });
    for (l, lw) in weights.layers.iter().enumerate() {
        let set = calib.as_ref().map(|c| CalibrationSet {
            x: c[l].clone(),
            source: format!("layer {l} calibration stream"),
        });
        let mode = set.as_ref().map_or(Whitening::Plain, Whitening::Whitened);
        for role in [KvRole::Key, KvRole::Value] {
            let w = role_weight(lw, role);
            let ranks = group_ranks(&plan, l, role, groups)?;
            let dl = decompose(w, shape, g, &ranks, mode)?;
            let rel = frobenius_error(&dl, w)? / w.frobenius_norm().max(f64::MIN_POSITIVE);
            let _ = writeln!(out, "  l{l}.{} ranks {:?} relative error {rel:.6e}", role.tag(), ranks);
            match role {
                KvRole::Key => f.keys.push(dl),
                KvRole::Value => f.values.push(dl),
            }
        }
    }
    factors_container(&f, json!({"whitened": cfg.whitened, "seed": cfg.seed}))?.write(path(cfg, DECOMPOSED_FILE))?;
    Ok(out)
}

fn load_factors(cfg: &PipelineConfig, file: &str, producer: &str) -> Result<Factors> {
    let p = path(cfg, file);
    require(&p, producer)?;
    factors_from_container(&Container::read(&p)?)
}

/// Factors the decode stages use: rotated when `hadamard` is set.
fn active_factors(cfg: &PipelineConfig) -> Result<Factors> {
    if cfg.hadamard {
        load_factors(cfg, ROTATED_FILE, "rotate")
    } else {
        load_factors(cfg, DECOMPOSED_FILE, "decompose")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierRow {
    pub target_id: String,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationSummary {
    pub targets: Vec<OutlierRow>,
    pub mean_before: f64,
    pub mean_after: f64,
}

fn rotate(cfg: &PipelineConfig) -> Result<String> {
    let (att, weights) = load_model(cfg)?;
    let f = load_factors(cfg, DECOMPOSED_FILE, "decompose")?;
    let calib = calibration_inputs(cfg, &att, &weights)?;
    let mut rotated = Factors {
        keys: Vec::new(),
        values: Vec::new(),
    };
    let mut rows = Vec::new();
    for (l, x) in calib.iter().enumerate() {
        for role in [KvRole::Key, KvRole::Value] {
            let dl = if role == KvRole::Key { &f.keys[l] } else { &f.values[l] };
            let r = fuse_hadamard(dl)?.layer;
            for (g, (p, q)) in dl.groups.iter().zip(&r.groups).enumerate() {
                rows.push(OutlierRow {
                    target_id: target_id(l, role, g),
                    before: outlier_metric(&x.matmul(&p.a)?),
                    after: outlier_metric(&x.matmul(&q.a)?),
                });
            }
            match role {
                KvRole::Key => rotated.keys.push(r),
                KvRole::Value => rotated.values.push(r),
            }
        }
    }
    let n = rows.len() as f64;
    let summary = RotationSummary {
        mean_before: rows.iter().map(|r| r.before).sum::<f64>() / n,
        mean_after: rows.iter().map(|r| r.after).sum::<f64>() / n,
        targets: rows,
    };
    factors_container(&rotated, json!({"rotated": true, "seed": cfg.seed}))?.write(path(cfg, ROTATED_FILE))?;
    write_json(&path(cfg, ROTATION_FILE), &summary)?;
    Ok(format!(
        "wrote {ROTATED_FILE}; mean outlier metric {:.6} -> {:.6}\n",
        summary.mean_before, summary.mean_after
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantRow {
    pub target_id: String,
    pub mse: f64,
    /// MSE over the mean square of the latents.
    pub relative_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSummary {
    pub bits: u8,
    pub targets: Vec<QuantRow>,
    pub mean_relative_mse: f64,
}

/// Packs a quantized latent as codes plus f64 scale and zero-point rows.
pub fn insert_quantized(c: &mut Container, prefix: &str, q: &QuantizedLatent) -> Result<()> {
    let rows = q.rows();
    c.insert(format!("{prefix}.codes"), Tensor::packed(vec![rows, q.width()], q.bits(), q.codes().to_vec())?)?;
    c.insert(format!("{prefix}.scales"), Tensor::f64(vec![rows], q.scales().to_vec())?)?;
    let zp: Vec<f64> = q
        .zero_points()
        .iter()
        .map(|&z| {
            if z.unsigned_abs() > 1 << 53 {
                Err(PaluError::Format(format!("zero point {z} is not exactly representable")))
            } else {
                Ok(z as f64)
            }
        })
        .collect::<Result<_>>()?;
    c.insert(format!("{prefix}.zero_points"), Tensor::f64(vec![rows], zp)?)
}

pub fn read_quantized(c: &Container, prefix: &str) -> Result<QuantizedLatent> {
    let codes = c.get(&format!("{prefix}.codes"))?;
    let TensorData::Packed { bits, codes: data } = &codes.data else {
        return Err(PaluError::Format(format!("{prefix}.codes is not packed")));
    };
    let [_, width] = codes.shape[..] else {
        return Err(PaluError::Format(format!("{prefix}.codes must be 2-D")));
    };
    let scales = c.get(&format!("{prefix}.scales"))?.as_f64()?.to_vec();
    let zp = c
        .get(&format!("{prefix}.zero_points"))?
        .as_f64()?
        .iter()
        .map(|&z| {
            if z.fract() == 0.0 && z.abs() <= (1u64 << 53) as f64 {
                Ok(z as i64)
            } else {
                Err(PaluError::Format(format!("zero point {z} is not an integer")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizedLatent::from_parts(QuantParams::new(*bits)?, width, data.clone(), scales, zp)
}

fn quantize_stage(cfg: &PipelineConfig) -> Result<String> {
    if cfg.bits == 16 {
        return Err(PaluError::Config("bits is 16, quantization is off".into()));
    }
    let params = QuantParams::new(cfg.bits)?;
    let (att, weights) = load_model(cfg)?;
    let f = active_factors(cfg)?;
    let calib = calibration_inputs(cfg, &att, &weights)?;
    let mut c = Container::new();
    let mut rows = Vec::new();
    for (l, x) in calib.iter().enumerate() {
        for role in [KvRole::Key, KvRole::Value] {
            if role == KvRole::Key && !cfg.quantize_keys {
                continue;
            }
            let dl = if role == KvRole::Key { &f.keys[l] } else { &f.values[l] };
            for (g, pair) in dl.groups.iter().enumerate() {
                let h = x.matmul(&pair.a)?;
                let q = quantize(&h, params)?;
                let back = q.dequantize()?;
                let n = h.as_slice().len() as f64;
                let mse = h.sub(&back)?.as_slice().iter().map(|v| v * v).sum::<f64>() / n;
                let power = h.as_slice().iter().map(|v| v * v).sum::<f64>() / n;
                let id = target_id(l, role, g);
                insert_quantized(&mut c, &id, &q)?;
                rows.push(QuantRow {
                    target_id: id,
                    mse,
                    relative_mse: if power > 0.0 { mse / power } else { 0.0 },
                });
            }
        }
    }
    let summary = QuantSummary {
        bits: cfg.bits,
        mean_relative_mse: rows.iter().map(|r| r.relative_mse).sum::<f64>() / rows.len().max(1) as f64,
        targets: rows,
    };
    c.meta = json!({"kind": "quantized-latents", "bits": cfg.bits, "hadamard": cfg.hadamard, "seed": cfg.seed});
    c.write(path(cfg, QUANTIZED_FILE))?;
    write_json(&path(cfg, QUANTIZE_FILE), &summary)?;
    Ok(format!(
        "wrote {QUANTIZED_FILE}; {}-bit mean relative MSE {:.6e} on calibration latents\n",
        cfg.bits, summary.mean_relative_mse
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tokens: usize,
    pub bits: u8,
    pub rope: bool,
    pub tile_len: usize,
    /// Relative error of the low-rank output against the reference, per step.
    pub per_step: Vec<f64>,
    pub max_relative_error: f64,
    pub mean_relative_error: f64,
}

fn run(cfg: &PipelineConfig) -> Result<String> {
    let (att, weights) = load_model(cfg)?;
    let f = active_factors(cfg)?;
    let model = PaluModel::new(att, &weights, f.keys, f.values)?;
    let mode = CacheMode::from_bits(cfg.bits, cfg.quantize_keys)?;
    let stream = token_stream(att.d_model, cfg.stream_len, derive_seed(cfg.seed, "stream"));
    let (reference, _) = reference_decode(&weights, &att, &stream)?;
    let mut cache = crate::attention::LatentKVCache::new(&model, mode);
    let mut per_step = Vec::with_capacity(stream.len());
    for (x, r) in stream.iter().zip(&reference) {
        let y = palu_decode_step(&model, &mut cache, x, cfg.tile_len)?;
        let e = relative_error_vec(&y, r);
        if !e.is_finite() {
            return Err(PaluError::NonFinite(format!("decode step {}", per_step.len())));
        }
        per_step.push(e);
    }
    let summary = RunSummary {
        tokens: per_step.len(),
        bits: cfg.bits,
        rope: matches!(att.rope, Rope::On { .. }),
        tile_len: cfg.tile_len,
        max_relative_error: per_step.iter().cloned().fold(0.0, f64::max),
        mean_relative_error: per_step.iter().sum::<f64>() / per_step.len().max(1) as f64,
        per_step,
    };
    ensure_out(cfg)?;
    write_json(&path(cfg, RUN_FILE), &summary)?;
    Ok(format!(
        "wrote {RUN_FILE}; {} steps, max relative error {:.6e}, mean {:.6e}\n",
        summary.tokens, summary.max_relative_error, summary.mean_relative_error
    ))
}

/// Everything `report` gathers, as written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: String,
    pub granularity: String,
    pub budget_rate: f64,
    pub bits: u8,
    pub plan: RankPlan,
    pub cost: CostReport,
    pub rotation: Option<RotationSummary>,
    pub quantize: Option<QuantSummary>,
    pub run: Option<RunSummary>,
    pub table2: Option<Vec<Table2Row>>,
    #[serde(skip)]
    pub text: String,
}

fn optional<T: for<'de> Deserialize<'de>>(cfg: &PipelineConfig, file: &str) -> Result<Option<T>> {
    let p = path(cfg, file);
    if p.exists() {
        read_json(&p).map(Some)
    } else {
        Ok(None)
    }
}

/// Gathers the stage outputs present in `out_dir` into text, JSON and CSV
/// reports. Without a plan file the plan is rebuilt from the config.
pub fn report(cfg: &PipelineConfig) -> Result<Report> {
    let preset = cfg.model_preset()?;
    let g = cfg.granularity_for(preset.n_heads)?;
    let plan = match optional::<RankPlan>(cfg, PLAN_FILE)? {
        Some(p) => p,
        None => build_plan(cfg)?,
    };
    let cost = CostReport::build(&preset, cfg.accounting.tokens, &plan, u32::from(cfg.bits), cfg.accounting.metadata)?;
    let synthetic = matches!(cfg.model, ModelSource::Synthetic(_));
    let rotation = if synthetic && cfg.hadamard { optional::<RotationSummary>(cfg, ROTATION_FILE)? } else { None };
    let quantize = if synthetic && cfg.bits < 16 { optional::<QuantSummary>(cfg, QUANTIZE_FILE)? } else { None };
    let run = if synthetic { optional::<RunSummary>(cfg, RUN_FILE)? } else { None };
    let table2_preset = ModelPreset::by_name(&cfg.accounting.preset)?;
    let table2 = if cfg.quant_preset.as_deref() == Some(PRESET_TABLE2) {
        Some(table2_text(&table2_preset)?)
    } else {
        None
    };

    let mut text = String::new();
    let model = match &cfg.model {
        ModelSource::Synthetic(s) => format!(
            "synthetic d_model={} n_heads={} head_dim={} layers={} spectrum={}",
            s.d_model,
            s.n_heads,
            s.head_dim,
            s.layers,
            s.spectrum.map_or("none".into(), |v| v.to_string())
        ),
        ModelSource::Preset(p) => p.clone(),
    };
    let _ = writeln!(text, "model: {model}");
    let _ = writeln!(
        text,
        "granularity {}  budget_rate {}  bits {}  hadamard {}  rope {}  seed {}",
        g.label(),
        cfg.budget_rate,
        cfg.bits,
        if cfg.hadamard { "on" } else { "off" },
        if cfg.rope { "on" } else { "off" },
        cfg.seed
    );
    text.push_str("\n[plan]\n");
    text.push_str(&plan_report(&plan).to_text());
    text.push_str("\n[cost]\n");
    text.push_str(&cost.to_text());
    if let Some(r) = &rotation {
        let _ = write!(text, "\n[rotation]\nmean outlier metric before {:.6} after {:.6}\n", r.mean_before, r.mean_after);
    }
    if let Some(q) = &quantize {
        let _ = write!(text, "\n[quantize]\n{}-bit mean relative MSE {:.6e}\n", q.bits, q.mean_relative_mse);
    }
    if let Some(r) = &run {
        let _ = write!(
            text,
            "\n[run]\n{} steps, max relative error {:.6e}, mean {:.6e}\n",
            r.tokens, r.max_relative_error, r.mean_relative_error
        );
    }
    if let Some(t) = &table2 {
        text.push_str("\n[table2]\n");
        text.push_str(t);
    }

    let report = Report {
        model,
        granularity: g.label(),
        budget_rate: cfg.budget_rate,
        bits: cfg.bits,
        plan,
        cost,
        rotation,
        quantize,
        run,
        table2: if table2.is_some() { Some(table2_rows(&table2_preset)?) } else { None },
        text,
    };
    ensure_out(cfg)?;
    fs::write(path(cfg, REPORT_TEXT), &report.text)?;
    write_json(&path(cfg, REPORT_JSON), &report)?;
    let mut csv = report.cost.to_csv();
    if let Some(r) = &report.run {
        csv.push_str("step,relative_error\n");
        for (i, e) in r.per_step.iter().enumerate() {
            let _ = writeln!(csv, "{i},{e}");
        }
    }
    fs::write(path(cfg, REPORT_CSV), csv)?;
    if let Some(t) = &table2 {
        fs::write(path(cfg, TABLE2_FILE), t)?;
    }
    Ok(report)
}

/// Renders the named golden block and compares it with the embedded copy.
pub fn golden(name: &str, cfg: &PipelineConfig) -> Result<String> {
    let text = match name {
        "table2" => table2_text(&ModelPreset::by_name(&cfg.accounting.preset)?)?,
        other => return Err(PaluError::Config(format!("unknown golden {other:?}; known: table2"))),
    };
    check_golden(name, &text)?;
    Ok(text)
}
