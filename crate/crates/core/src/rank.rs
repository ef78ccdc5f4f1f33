//! Fisher-information importance and budgeted rank allocation.
//!
//! Each decomposition target gets a share of the global latent budget
//! proportional to its Fisher score (sum of squared loss gradients over its
//! weights). The budget is counted in latent columns per token, so a plan
//! at rate ρ keeps exactly ρ of the uncompressed KV width.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{PaluError, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherScore {
    pub target_id: String,
    pub score: f64,
}

/// Post-allocation rank rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    #[default]
    None,
    /// Round down to a power of two.
    Pow2,
    /// Round down to a multiple of k.
    Block(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub target_id: String,
    pub full_width: usize,
    pub allocated_rank: usize,
}

impl PlanEntry {
    pub fn compression(&self) -> f64 {
        1.0 - self.allocated_rank as f64 / self.full_width as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub entries: Vec<PlanEntry>,
    pub budget_rate: f64,
    pub rounding: Rounding,
}

impl RankPlan {
    pub fn total_rank(&self) -> usize {
        self.entries.iter().map(|e| e.allocated_rank).sum()
    }

    pub fn total_width(&self) -> usize {
        self.entries.iter().map(|e| e.full_width).sum()
    }

    pub fn rank_of(&self, target_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.target_id == target_id)
            .map(|e| e.allocated_rank)
    }
}

/// Central finite-difference Fisher estimate.
///
/// `loss(w, batch)` is evaluated at perturbed copies of `w`; the score is
/// Σ_batches Σ_entries g² with g the central difference at step
/// `1e-4·(1 + |w_ij|)`.
pub fn estimate_fisher<F>(target_id: &str, w: &Matrix, loss: F, calib_batches: usize) -> Result<FisherScore>
where
    F: Fn(&Matrix, usize) -> f64,
{
    if calib_batches == 0 {
        return Err(PaluError::invalid("calib_batches must be at least 1"));
    }
    let mut score = 0.0;
    let mut probe = w.clone();
    for batch in 0..calib_batches {
        let base = loss(w, batch);
        if !base.is_finite() {
            return Err(PaluError::NonFinite(format!("loss of batch {batch} for {target_id}")));
        }
        for i in 0..w.as_slice().len() {
            let orig = w.as_slice()[i];
            let h = 1e-4 * (1.0 + orig.abs());
            probe.data_mut()[i] = orig + h;
            let up = loss(&probe, batch);
            probe.data_mut()[i] = orig - h;
            let down = loss(&probe, batch);
            probe.data_mut()[i] = orig;
            if !(up.is_finite() && down.is_finite()) {
                return Err(PaluError::NonFinite(format!(
                    "perturbed loss of batch {batch} for {target_id}"
                )));
            }
            let g = (up - down) / (2.0 * h);
            score += g * g;
        }
    }
    Ok(FisherScore {
        target_id: target_id.to_string(),
        score,
    })
}

/// Splits `round(budget_rate · Σ full_widths)` latent columns across
/// targets in proportion to their scores.
///
/// Shares are clamped to `[min_rank, min(d_model, full_width)]`; budget freed
/// or consumed by clamping is re-spread over the unclamped targets. The
/// integer residual goes to the largest fractional remainders, ties to the
/// lower target id. Rounding is applied last and only ever lowers a rank.
pub fn allocate(
    scores: &[FisherScore],
    full_widths: &[usize],
    d_model: usize,
    budget_rate: f64,
    min_rank: usize,
    rounding: Rounding,
) -> Result<RankPlan> {
    let n = scores.len();
    if n == 0 {
        return Err(PaluError::invalid("no targets to allocate"));
    }
    if full_widths.len() != n {
        return Err(PaluError::invalid(format!(
            "{n} scores but {} widths",
            full_widths.len()
        )));
    }
    if !(budget_rate > 0.0 && budget_rate <= 1.0) {
        return Err(PaluError::invalid(format!("budget rate {budget_rate} is outside (0, 1]")));
    }
    if min_rank == 0 {
        return Err(PaluError::invalid("min_rank must be at least 1"));
    }
    if let Rounding::Block(0) = rounding {
        return Err(PaluError::invalid("block rounding needs k >= 1"));
    }
    if let Some(s) = scores.iter().find(|s| !(s.score >= 0.0 && s.score.is_finite())) {
        return Err(PaluError::invalid(format!("score of {} is not a finite non-negative value", s.target_id)));
    }
    let total_score: f64 = scores.iter().map(|s| s.score).sum();
    if !(total_score > 0.0) {
        return Err(PaluError::invalid("scores sum to zero"));
    }

    let caps: Vec<usize> = full_widths.iter().map(|w| (*w).min(d_model)).collect();
    if let Some(i) = caps.iter().position(|c| *c < min_rank) {
        return Err(PaluError::invalid(format!(
            "target {} cannot hold min_rank {min_rank}",
            scores[i].target_id
        )));
    }
    let total_width: usize = full_widths.iter().sum();
    let budget = (budget_rate * total_width as f64).round() as usize;
    if budget < n * min_rank {
        let min_rate = (n * min_rank) as f64 / total_width as f64;
        return Err(PaluError::InfeasibleBudget(format!(
            "budget of {budget} columns cannot give {n} targets {min_rank} each; minimum feasible rate is {min_rate:.6}"
        )));
    }
    let budget = budget.min(caps.iter().sum());

    let shares = water_fill(scores, &caps, min_rank, budget as f64);

    let mut ranks: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = ranks.iter().sum();
    let mut residual = budget.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let fi = shares[i] - shares[i].floor();
        let fj = shares[j] - shares[j].floor();
        fj.partial_cmp(&fi)
            .unwrap_or(Ordering::Equal)
            .then_with(|| scores[i].target_id.cmp(&scores[j].target_id))
            .then(i.cmp(&j))
    });
    while residual > 0 {
        let before = residual;
        for &i in &order {
            if residual == 0 {
                break;
            }
            if ranks[i] < caps[i] {
                ranks[i] += 1;
                residual -= 1;
            }
        }
        if residual == before {
            break;
        }
    }

    for r in ranks.iter_mut() {
        *r = apply_rounding(*r, rounding, min_rank);
    }

    let entries = scores
        .iter()
        .zip(full_widths)
        .zip(ranks)
        .map(|((s, w), r)| PlanEntry {
            target_id: s.target_id.clone(),
            full_width: *w,
            allocated_rank: r,
        })
        .collect();
    Ok(RankPlan {
        entries,
        budget_rate,
        rounding,
    })
}

/// Proportional shares with box constraints `[lo, cap_i]`, summing to
/// `budget` (the caller guarantees `n·lo ≤ budget ≤ Σ cap`).
fn water_fill(scores: &[FisherScore], caps: &[usize], lo: usize, budget: f64) -> Vec<f64> {
    let n = scores.len();
    // Sums run in target_id order so the result does not depend on the
    // order targets were passed in.
    let mut by_id: Vec<usize> = (0..n).collect();
    by_id.sort_by(|&i, &j| scores[i].target_id.cmp(&scores[j].target_id).then(i.cmp(&j)));
    let mut share = vec![0.0; n];
    let mut fixed = vec![false; n];
    loop {
        let fixed_sum: f64 = by_id.iter().filter(|&&i| fixed[i]).map(|&i| share[i]).sum();
        let free_score: f64 = by_id.iter().filter(|&&i| !fixed[i]).map(|&i| scores[i].score).sum();
        let remaining = budget - fixed_sum;
        let free: Vec<usize> = by_id.iter().copied().filter(|&i| !fixed[i]).collect();
        if free.is_empty() {
            return share;
        }
        for &i in &free {
            share[i] = if free_score > 0.0 {
                remaining * scores[i].score / free_score
            } else {
                remaining / free.len() as f64
            };
        }
        // Fix the most violated side first; fixing both at once can
        // overshoot in the other direction.
        let over: f64 = free.iter().map(|&i| (share[i] - caps[i] as f64).max(0.0)).sum();
        let under: f64 = free.iter().map(|&i| (lo as f64 - share[i]).max(0.0)).sum();
        if over == 0.0 && under == 0.0 {
            return share;
        }
        if over >= under {
            for &i in &free {
                if share[i] > caps[i] as f64 {
                    share[i] = caps[i] as f64;
                    fixed[i] = true;
                }
            }
        } else {
            for &i in &free {
                if share[i] < lo as f64 {
                    share[i] = lo as f64;
                    fixed[i] = true;
                }
            }
        }
    }
}

fn apply_rounding(rank: usize, rounding: Rounding, min_rank: usize) -> usize {
    let rounded = match rounding {
        Rounding::None => rank,
        Rounding::Pow2 => {
            if rank == 0 {
                0
            } else {
                1usize << (usize::BITS - 1 - rank.leading_zeros())
            }
        }
        Rounding::Block(k) => rank / k * k,
    };
    rounded.max(min_rank).min(rank.max(min_rank))
}

/// Builds an allocation where every target has the same score.
pub fn uniform_plan(
    targets: &[(String, usize)],
    d_model: usize,
    budget_rate: f64,
    min_rank: usize,
    rounding: Rounding,
) -> Result<RankPlan> {
    let scores: Vec<FisherScore> = targets
        .iter()
        .map(|(id, _)| FisherScore {
            target_id: id.clone(),
            score: 1.0,
        })
        .collect();
    let widths: Vec<usize> = targets.iter().map(|(_, w)| *w).collect();
    allocate(&scores, &widths, d_model, budget_rate, min_rank, rounding)
}

/// Key/value role parsed from a target id such as `l3.k.g0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvRole {
    Key,
    Value,
}

pub fn kv_role(target_id: &str) -> Option<KvRole> {
    target_id
        .split(['.', '/', ':'])
        .find_map(|seg| match seg.to_ascii_lowercase().as_str() {
            "k" | "key" | "k_proj" => Some(KvRole::Key),
            "v" | "value" | "v_proj" => Some(KvRole::Value),
            _ => None,
        })
}

impl KvRole {
    pub fn tag(self) -> &'static str {
        match self {
            KvRole::Key => "k",
            KvRole::Value => "v",
        }
    }
}

/// Canonical target id, e.g. `l3.k.g0`.
pub fn target_id(layer: usize, role: KvRole, group: usize) -> String {
    format!("l{layer}.{}.g{group}", role.tag())
}

/// Every key and value group of a model, in layer-major order, with its
/// full width `group_size · head_dim`.
pub fn kv_targets(layers: usize, n_groups: usize, group_width: usize) -> Vec<(String, usize)> {
    let mut out = Vec::with_capacity(layers * 2 * n_groups);
    for l in 0..layers {
        for role in [KvRole::Key, KvRole::Value] {
            for g in 0..n_groups {
                out.push((target_id(l, role, g), group_width));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanRow {
    pub target_id: String,
    pub full_width: usize,
    pub rank: usize,
    pub compression: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanReport {
    pub rows: Vec<PlanRow>,
    /// 1 − Σr / Σwidth over all targets.
    pub aggregate_compression: f64,
    pub key_mean_compression: Option<f64>,
    pub value_mean_compression: Option<f64>,
}

pub fn plan_report(plan: &RankPlan) -> PlanReport {
    let rows: Vec<PlanRow> = plan
        .entries
        .iter()
        .map(|e| PlanRow {
            target_id: e.target_id.clone(),
            full_width: e.full_width,
            rank: e.allocated_rank,
            compression: e.compression(),
        })
        .collect();
    let aggregate_compression = 1.0 - plan.total_rank() as f64 / plan.total_width().max(1) as f64;
    let mean_for = |role: KvRole| {
        let vals: Vec<f64> = plan
            .entries
            .iter()
            .filter(|e| kv_role(&e.target_id) == Some(role))
            .map(PlanEntry::compression)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    PlanReport {
        rows,
        aggregate_compression,
        key_mean_compression: mean_for(KvRole::Key),
        value_mean_compression: mean_for(KvRole::Value),
    }
}

impl PlanReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let id_w = self.rows.iter().map(|r| r.target_id.len()).max().unwrap_or(6).max(6);
        let _ = writeln!(out, "{:<id_w$}  {:>6}  {:>6}  {:>11}", "target", "width", "rank", "compression");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<id_w$}  {:>6}  {:>6}  {:>10.2}%",
                r.target_id,
                r.full_width,
                r.rank,
                100.0 * r.compression
            );
        }
        let _ = writeln!(out, "aggregate compression: {:.2}%", 100.0 * self.aggregate_compression);
        if let Some(k) = self.key_mean_compression {
            let _ = writeln!(out, "mean key compression: {:.2}%", 100.0 * k);
        }
        if let Some(v) = self.value_mean_compression {
            let _ = writeln!(out, "mean value compression: {:.2}%", 100.0 * v);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gaussian_matrix;

    fn scores(v: &[f64]) -> Vec<FisherScore> {
        v.iter()
            .enumerate()
            .map(|(i, s)| FisherScore {
                target_id: format!("t{i:03}"),
                score: *s,
            })
            .collect()
    }

    fn ranks(p: &RankPlan) -> Vec<usize> {
        p.entries.iter().map(|e| e.allocated_rank).collect()
    }

    #[test]
    fn equal_scores_split_evenly() {
        let p = allocate(&scores(&[1.0, 1.0]), &[8, 8], 64, 0.5, 1, Rounding::None).unwrap();
        assert_eq!(ranks(&p), vec![4, 4]);
    }

    #[test]
    fn three_to_one() {
        let p = allocate(&scores(&[3.0, 1.0]), &[8, 8], 64, 0.5, 1, Rounding::None).unwrap();
        assert_eq!(ranks(&p), vec![6, 2]);
        let p = allocate(&scores(&[3.0, 1.0]), &[8, 8], 64, 0.5, 1, Rounding::Pow2).unwrap();
        assert_eq!(ranks(&p), vec![4, 2]);
    }

    #[test]
    fn block_rounding_floors() {
        let p = allocate(&scores(&[3.0, 1.0]), &[16, 16], 64, 0.5, 1, Rounding::Block(4)).unwrap();
        assert_eq!(ranks(&p), vec![12, 4]);
        let p = allocate(&scores(&[5.0, 1.0]), &[16, 16], 64, 0.5, 1, Rounding::Block(4)).unwrap();
        // 13.33 / 2.67 -> 13 / 3 -> 12 / 0, lifted back to min_rank
        assert_eq!(ranks(&p), vec![12, 1]);
    }

    #[test]
    fn clamping_respreads_budget() {
        // 0.9 share would exceed the cap of 8; the excess moves to the others.
        let p = allocate(&scores(&[9.0, 0.5, 0.5]), &[8, 8, 8], 64, 0.75, 1, Rounding::None).unwrap();
        assert_eq!(p.total_rank(), 18);
        assert_eq!(ranks(&p), vec![8, 5, 5]);
        // d_model caps too
        let p = allocate(&scores(&[9.0, 1.0]), &[16, 16], 6, 0.5, 1, Rounding::None).unwrap();
        assert_eq!(ranks(&p), vec![6, 6]);
    }

    #[test]
    fn min_rank_floor() {
        let p = allocate(&scores(&[100.0, 0.0001]), &[8, 8], 64, 0.5, 2, Rounding::None).unwrap();
        assert_eq!(ranks(&p), vec![6, 2]);
    }

    #[test]
    fn infeasible_budget_reports_minimum_rate() {
        let err = allocate(&scores(&[1.0; 4]), &[8; 4], 64, 0.1, 2, Rounding::None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("0.25"), "{msg}");
    }

    #[test]
    fn bad_inputs() {
        assert!(allocate(&[], &[], 8, 0.5, 1, Rounding::None).is_err());
        assert!(allocate(&scores(&[0.0, 0.0]), &[8, 8], 8, 0.5, 1, Rounding::None).is_err());
        assert!(allocate(&scores(&[1.0]), &[8], 8, 0.0, 1, Rounding::None).is_err());
        assert!(allocate(&scores(&[1.0]), &[8], 8, 1.5, 1, Rounding::None).is_err());
        assert!(allocate(&scores(&[1.0]), &[8], 8, 0.5, 0, Rounding::None).is_err());
        assert!(allocate(&scores(&[f64::NAN]), &[8], 8, 0.5, 1, Rounding::None).is_err());
    }

    #[test]
    fn fisher_of_constant_loss_is_zero() {
        let w = gaussian_matrix(3, 4, 1);
        let s = estimate_fisher("c", &w, |_, _| 7.0, 2).unwrap();
        assert!(s.score.abs() < 1e-12);
    }

    #[test]
    fn fisher_matches_analytic_quadratic_gradient() {
        let x = gaussian_matrix(10, 4, 1);
        let y = gaussian_matrix(10, 3, 2);
        let w = gaussian_matrix(4, 3, 3);
        let loss = |w: &Matrix, _b: usize| 0.5 * x.matmul(w).unwrap().sub(&y).unwrap().frobenius_norm().powi(2);
        let fd = estimate_fisher("q", &w, loss, 1).unwrap().score;
        let grad = x.transpose().matmul(&x.matmul(&w).unwrap().sub(&y).unwrap()).unwrap();
        let analytic: f64 = grad.as_slice().iter().map(|g| g * g).sum();
        assert!((fd - analytic).abs() <= 1e-5 * analytic);
    }

    #[test]
    fn fisher_is_additive_over_identical_batches() {
        let w = gaussian_matrix(3, 3, 4);
        let loss = |w: &Matrix, _b: usize| w.as_slice().iter().map(|v| v.powi(3)).sum::<f64>();
        let one = estimate_fisher("a", &w, loss, 2).unwrap().score;
        let two = estimate_fisher("a", &w, loss, 4).unwrap().score;
        assert!((two - 2.0 * one).abs() <= 1e-9 * one);
    }

    #[test]
    fn fisher_rejects_non_finite_loss() {
        let w = gaussian_matrix(2, 2, 4);
        let err = estimate_fisher("bad", &w, |_, b| if b == 1 { f64::NAN } else { 0.0 }, 3).unwrap_err();
        assert!(err.to_string().contains("batch 1"));
    }

    #[test]
    fn report_rows() {
        let p = allocate(&scores(&[3.0, 1.0]), &[8, 8], 64, 0.5, 1, Rounding::None).unwrap();
        let r = plan_report(&p);
        assert_eq!(r.rows[0].compression, 0.25);
        assert_eq!(r.rows[1].compression, 0.75);
        assert_eq!(r.aggregate_compression, 0.5);

        let uniform = allocate(&scores(&[1.0; 4]), &[8; 4], 64, 0.5, 1, Rounding::None).unwrap();
        assert!(plan_report(&uniform).rows.iter().all(|row| row.compression == 0.5));

        let full = allocate(&scores(&[1.0, 2.0]), &[8, 8], 64, 1.0, 1, Rounding::None).unwrap();
        assert_eq!(plan_report(&full).aggregate_compression, 0.0);
    }

    #[test]
    fn report_splits_keys_and_values() {
        let plan = RankPlan {
            entries: vec![
                PlanEntry { target_id: "l0.k.g0".into(), full_width: 8, allocated_rank: 2 },
                PlanEntry { target_id: "l0.v.g0".into(), full_width: 8, allocated_rank: 6 },
            ],
            budget_rate: 0.5,
            rounding: Rounding::None,
        };
        let r = plan_report(&plan);
        assert_eq!(r.key_mean_compression, Some(0.75));
        assert_eq!(r.value_mean_compression, Some(0.25));
        assert!(r.to_text().contains("mean value compression: 25.00%"));
    }

    #[test]
    fn plan_json_round_trip() {
        let p = allocate(&scores(&[3.0, 1.0]), &[8, 8], 64, 0.5, 1, Rounding::Block(2)).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let back: RankPlan = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }
}
