//! Baselines, outage/power evaluation and report emission.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::RMat;
use crate::scenario::{db_to_linear, Codebook, ScenarioInstance};
use crate::solver::{power_weights, BeamformingSolution, SolverConfig, WeightMode};
use crate::stats::{mean, std_dev};
use crate::unrolled::{solve_with_coefficients, Model, ModelConfig, Variant, COEFFS};

/// Relative slack below the target that still counts as satisfied, so that
/// constraints met with equality survive round-off.
pub const SINR_SLACK: f64 = 1e-9;

/// Power and constraint outcome of one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceOutcome {
    /// `w^T p` averaged over realizations.
    pub power: f64,
    /// Satisfied (user, realization) pairs.
    pub satisfied: usize,
    pub total: usize,
    pub infeasible: bool,
}

impl InstanceOutcome {
    pub fn violations(&self) -> usize {
        self.total - self.satisfied
    }
}

/// Ratios `SINR_i / γ_i` against the true channels, one per (realization, user).
pub fn sinr_ratios(inst: &ScenarioInstance, outputs: &[BeamformingSolution]) -> Vec<f64> {
    let mut out = Vec::with_capacity(outputs.len() * inst.users());
    for (r, sol) in outputs.iter().enumerate() {
        let sinr = sol.downlink_sinr(&inst.eval_covs(r));
        out.extend(sinr.iter().zip(&inst.sinr_targets).map(|(s, g)| s / g));
    }
    out
}

/// Outcome of one instance; infeasible realizations put every user in
/// outage and contribute their projected power.
pub fn outcome(inst: &ScenarioInstance, outputs: &[BeamformingSolution], mode: WeightMode) -> InstanceOutcome {
    let n = inst.users();
    let mut satisfied = 0;
    let mut power = 0.0;
    let mut infeasible = false;
    for (r, sol) in outputs.iter().enumerate() {
        let w = power_weights(&sol.analog.matrix, &sol.b, mode);
        power += sol.p.iter().zip(&w).map(|(p, w)| p * w).sum::<f64>();
        if !sol.feasible {
            infeasible = true;
            continue;
        }
        let sinr = sol.downlink_sinr(&inst.eval_covs(r));
        satisfied += sinr.iter().zip(&inst.sinr_targets).filter(|(s, g)| **s >= **g * (1.0 - SINR_SLACK)).count();
    }
    InstanceOutcome { power: power / outputs.len() as f64, satisfied, total: n * outputs.len(), infeasible }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    /// Group index, or `None` for all groups pooled.
    pub group: Option<usize>,
    /// Mean `w^T p` over all instances of the group.
    pub mean_power: f64,
    pub outage_pct: f64,
    pub n: usize,
    pub infeasible: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub fold: usize,
    /// Per group in index order, then the pooled row.
    pub groups: Vec<GroupReport>,
}

pub const CSV_HEADER: &str = "method,fold,group,mean_power,outage_pct,n,infeasible";

impl EvalReport {
    pub fn pooled(&self) -> &GroupReport {
        self.groups.last().expect("report has a pooled row")
    }

    pub fn group(&self, g: usize) -> Option<&GroupReport> {
        self.groups.iter().find(|r| r.group == Some(g))
    }

    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for r in &self.groups {
            let group = r.group.map_or_else(|| "all".to_string(), |g| g.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.4},{},{}",
                self.method, self.fold, group, r.mean_power, r.outage_pct, r.n, r.infeasible
            );
        }
        s
    }
}

fn group_report(group: Option<usize>, items: &[&InstanceOutcome]) -> GroupReport {
    let satisfied: usize = items.iter().map(|o| o.satisfied).sum();
    let total: usize = items.iter().map(|o| o.total).sum();
    let powers: Vec<f64> = items.iter().map(|o| o.power).collect();
    GroupReport {
        group,
        mean_power: if powers.is_empty() { 0.0 } else { mean(&powers) },
        outage_pct: if total == 0 { 0.0 } else { 100.0 * (total - satisfied) as f64 / total as f64 },
        n: items.len(),
        infeasible: items.iter().filter(|o| o.infeasible).count(),
    }
}

/// Per-group and pooled report; `groups[k]` is the group of outcome `k`.
pub fn summarize(
    method: &str,
    fold: usize,
    groups: &[usize],
    outcomes: &[InstanceOutcome],
    num_groups: usize,
) -> EvalReport {
    let mut rows: Vec<GroupReport> = (0..num_groups)
        .map(|g| {
            let items: Vec<&InstanceOutcome> =
                outcomes.iter().zip(groups).filter(|(_, &k)| k == g).map(|(o, _)| o).collect();
            group_report(Some(g), &items)
        })
        .collect();
    rows.push(group_report(None, &outcomes.iter().collect::<Vec<_>>()));
    EvalReport { method: method.to_string(), fold, groups: rows }
}

/// Outage percentage per group, users and realizations pooled.
pub fn empirical_outage(groups: &[usize], outcomes: &[InstanceOutcome], num_groups: usize) -> Vec<f64> {
    summarize("", 0, groups, outcomes, num_groups).groups[..num_groups].iter().map(|r| r.outage_pct).collect()
}

pub fn write_reports_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut s = format!("{CSV_HEADER}\n");
    reports.iter().for_each(|r| s.push_str(&r.csv_rows()));
    std::fs::write(path, s)?;
    Ok(())
}

/// Plain greedy pipeline with model-free channels: analog search on the
/// (true or estimated) covariances, targets scaled by `target_factor`.
pub struct Greedy {
    pub rf_chains: usize,
    pub steps: usize,
    pub solver: SolverConfig,
}

impl Greedy {
    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: Variant::Gcn,
            rf_chains: self.rf_chains,
            greedy_steps: self.steps,
            solver: self.solver,
            ..ModelConfig::default()
        }
    }

    pub fn solve(
        &self,
        inst: &ScenarioInstance,
        codebook: &Codebook,
        perfect: bool,
        target_factor: f64,
    ) -> Result<Vec<BeamformingSolution>> {
        let view = if perfect { inst.perfect_csi() } else { inst.clone() }.with_scaled_targets(target_factor);
        let plain = RMat::from_fn(inst.users(), COEFFS, |_, c| if c % 2 == 0 { 1.0 } else { 0.0 });
        let z_bb = if inst.samples.is_some() { vec![plain.clone(); inst.realizations()] } else { Vec::new() };
        Ok(solve_with_coefficients(&self.model_config(), &view, codebook, &plain, &z_bb)?.outputs)
    }

    /// Outcomes against the original targets and true channels.
    pub fn outcomes(
        &self,
        data: &[ScenarioInstance],
        codebook: &Codebook,
        perfect: bool,
        target_factor: f64,
    ) -> Result<Vec<InstanceOutcome>> {
        data.par_iter()
            .map(|inst| {
                let out = self.solve(inst, codebook, perfect, target_factor)?;
                Ok(outcome(inst, &out, self.solver.weight_mode))
            })
            .collect()
    }
}

fn groups_of(data: &[ScenarioInstance]) -> Vec<usize> {
    data.iter().map(|s| s.group_id).collect()
}

fn num_groups(data: &[ScenarioInstance]) -> usize {
    data.iter().map(|s| s.group_id + 1).max().unwrap_or(0)
}

/// Perfect-CSI greedy benchmark.
pub fn run_ghbf_perf(
    data: &[ScenarioInstance],
    codebook: &Codebook,
    greedy: &Greedy,
    fold: usize,
) -> Result<EvalReport> {
    let outcomes = greedy.outcomes(data, codebook, true, 1.0)?;
    Ok(summarize("ghbf_perf", fold, &groups_of(data), &outcomes, num_groups(data)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginResult {
    pub margin_db: f64,
    /// Pooled validation outage at the chosen margin, in percent.
    pub val_outage_pct: f64,
    pub evaluations: usize,
    /// Whether the outage landed within tolerance of the nominal level.
    pub converged: bool,
    pub report: EvalReport,
}

/// Margin benchmark: one common dB margin on every target, chosen on `val`
/// by bracketing and bisection of the pooled outage, then evaluated on
/// `test`.
///
/// The bracket grows upward from 0 dB (1, 2, 4, … dB, capped at
/// `max_margin_db`) until the outage drops to the nominal level, because
/// very large margins make instances infeasible and raise the outage again.
#[allow(clippy::too_many_arguments)]
pub fn run_ghbf_marg(
    val: &[ScenarioInstance],
    test: &[ScenarioInstance],
    codebook: &Codebook,
    greedy: &Greedy,
    p_out: f64,
    tol: f64,
    max_margin_db: f64,
    fold: usize,
) -> Result<MarginResult> {
    if val.is_empty() {
        return Err(Error::Config("margin bisection needs validation data".into()));
    }
    let groups = groups_of(val);
    let ng = num_groups(val);
    let mut evaluations = 0;
    let mut outage = |margin: f64| -> Result<f64> {
        evaluations += 1;
        let o = greedy.outcomes(val, codebook, false, db_to_linear(margin))?;
        Ok(summarize("", 0, &groups, &o, ng).pooled().outage_pct / 100.0)
    };
    let mut best = (0.0, outage(0.0)?);
    let close = |f: f64| (f - p_out).abs() <= tol;
    let mut converged = best.1 <= p_out || close(best.1);
    if !converged {
        let (mut lo, mut hi) = (0.0, 1.0f64.min(max_margin_db));
        let mut f_hi = outage(hi)?;
        let mut guard = 0;
        while f_hi > p_out && !close(f_hi) && hi < max_margin_db && guard < 40 {
            lo = hi;
            hi = (2.0 * hi).min(max_margin_db);
            f_hi = outage(hi)?;
            guard += 1;
        }
        if (f_hi - p_out).abs() < (best.1 - p_out).abs() {
            best = (hi, f_hi);
        }
        converged = close(f_hi);
        if f_hi <= p_out && !converged {
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                let f = outage(mid)?;
                if (f - p_out).abs() < (best.1 - p_out).abs() || (close(f) && f <= p_out) {
                    best = (mid, f);
                }
                if close(f) {
                    converged = true;
                    break;
                }
                if f > p_out {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
    }
    let (margin_db, f) = best;
    if !converged {
        log::warn!("margin bisection ended at {margin_db:.4} dB with outage {:.3}%", 100.0 * f);
    }
    let outcomes = greedy.outcomes(test, codebook, false, db_to_linear(margin_db))?;
    let report = summarize("ghbf_marg", fold, &groups_of(test), &outcomes, num_groups(test));
    Ok(MarginResult { margin_db, val_outage_pct: 100.0 * f, evaluations, converged, report })
}

/// Outcomes of a learned model on estimated CSI.
pub fn learned_outcomes(model: &Model, data: &[ScenarioInstance], codebook: &Codebook) -> Result<Vec<InstanceOutcome>> {
    let refs: Vec<&ScenarioInstance> = data.iter().collect();
    let solves = model.predict_batch(&refs, codebook)?;
    Ok(data.iter().zip(&solves).map(|(inst, s)| outcome(inst, &s.outputs, model.cfg.solver.weight_mode)).collect())
}

pub fn run_learned(model: &Model, data: &[ScenarioInstance], codebook: &Codebook, fold: usize) -> Result<EvalReport> {
    if let Some(inst) = data.first() {
        if inst.antennas() != codebook.antennas() {
            return Err(Error::Dimension("dataset and codebook antenna counts differ".into()));
        }
        if model.cfg.variant != Variant::Fdbf && model.cfg.rf_chains > codebook.len() {
            return Err(Error::Dimension("model uses more RF chains than codewords".into()));
        }
        if model.cfg.variant == Variant::TwoGcn && inst.samples.is_none() {
            return Err(Error::Config("the two_gcn variant needs sampled channels".into()));
        }
    }
    let outcomes = learned_outcomes(model, data, codebook)?;
    let method = format!("u_{}", model.cfg.variant.name());
    Ok(summarize(&method, fold, &groups_of(data), &outcomes, num_groups(data)))
}

/// Group of a report row with (mean, sample std) of power and of outage.
pub type AggregateRow = (Option<usize>, (f64, f64), (f64, f64));

/// Mean and sample standard deviation per report row across folds.
pub fn aggregate(reports: &[EvalReport]) -> Vec<AggregateRow> {
    let Some(first) = reports.first() else { return Vec::new() };
    first
        .groups
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let p: Vec<f64> = reports.iter().map(|r| r.groups[k].mean_power).collect();
            let o: Vec<f64> = reports.iter().map(|r| r.groups[k].outage_pct).collect();
            (row.group, (mean(&p), std_dev(&p)), (mean(&o), std_dev(&o)))
        })
        .collect()
}
