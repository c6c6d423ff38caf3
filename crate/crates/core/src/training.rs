//! Primal-dual training with outage constraints.
//!
//! Each step draws a minibatch stratified over constraint groups, takes one
//! Adam step on the Lagrangian (with adaptive gradient clipping) and one
//! projected dual ascent step per group. The constraint is either the
//! logistic surrogate with an adaptive sharpness `β_c` per group, or the
//! empirical quantile of `γ − SINR`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{learned_outcomes, summarize, EvalReport, InstanceOutcome};
use crate::error::{config_err, Error, Result};
use crate::neural::{
    adam_update, clip_gradient_adaptive, read_checkpoint, write_checkpoint, AdamConfig, AdamState, ClipHistory,
};
use crate::scenario::dataset::Dataset;
use crate::scenario::{Codebook, ScenarioInstance};
use crate::solver::power_weights;
use crate::stats::{quantile, quantile_support};
use crate::unrolled::{downlink_sinr_vjp, flatten_gradient, power_vjp, InstanceSolve, Model, ModelConfig, OutputGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// Logistic surrogate of the outage indicator.
    Annealed,
    /// Empirical quantile of `γ − SINR`.
    Quantile,
}

impl std::str::FromStr for ConstraintMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "annealed" => Ok(Self::Annealed),
            "quantile" => Ok(Self::Quantile),
            _ => Err(config_err(format!("unknown constraint mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub p_out: f64,
    pub constraint: ConstraintMode,
    pub lr_primal: f64,
    pub dual_step: f64,
    /// Dual step used with [`ConstraintMode::Quantile`].
    pub dual_step_quantile: f64,
    /// One-time step size decay factor `η_a`.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub beta_bar: f64,
    pub eta_c: f64,
    /// Steps between validations.
    pub val_interval: usize,
    pub lambda_bar: f64,
    /// Steps without a new best `J_cm` before the decay and before stopping.
    pub patience: [usize; 2],
    pub max_steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Abort when `J_cm` exceeds this multiple of its initial value.
    pub divergence_factor: f64,
    pub folds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            p_out: 0.1,
            constraint: ConstraintMode::Annealed,
            lr_primal: 5e-4,
            dual_step: 0.1,
            dual_step_quantile: 0.002,
            lr_decay: 0.2,
            batch_size: 200,
            beta_bar: 50.0,
            eta_c: 0.01,
            val_interval: 100,
            lambda_bar: 100.0,
            patience: [5000, 10000],
            max_steps: 100_000,
            adam: AdamConfig::default(),
            seed: 0,
            divergence_factor: 10.0,
            folds: 5,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if !(self.p_out > 0.0 && self.p_out < 1.0) {
            return Err(config_err("p_out must lie in (0, 1)"));
        }
        if !pos(self.lr_primal) || !pos(self.dual_step) || !pos(self.dual_step_quantile) {
            return Err(config_err("step sizes must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(config_err("lr_decay must lie in (0, 1]"));
        }
        if !pos(self.beta_bar) || !(0.0..=1.0).contains(&self.eta_c) || !pos(self.lambda_bar) {
            return Err(config_err("beta_bar and lambda_bar must be positive and eta_c in [0, 1]"));
        }
        if self.batch_size == 0 || self.val_interval == 0 {
            return Err(config_err("batch_size and val_interval must be positive"));
        }
        if self.patience[0] > self.patience[1] {
            return Err(config_err("decay patience exceeds stopping patience"));
        }
        if !(self.divergence_factor > 1.0) || self.folds < 2 {
            return Err(config_err("divergence_factor must exceed 1 and folds must be at least 2"));
        }
        Ok(())
    }

    fn dual_eta(&self) -> f64 {
        match self.constraint {
            ConstraintMode::Annealed => self.dual_step,
            ConstraintMode::Quantile => self.dual_step_quantile,
        }
    }
}

/// Logistic step `1 / (1 + e^{−βx})`.
pub fn annealed_unit_step(x: f64, beta: f64) -> f64 {
    let t = beta * x;
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Derivative of [`annealed_unit_step`] in `x`.
pub fn annealed_unit_step_grad(x: f64, beta: f64) -> f64 {
    let u = annealed_unit_step(x, beta);
    beta * u * (1.0 - u)
}

fn nonempty(ratios: &[f64]) -> Result<()> {
    if ratios.is_empty() {
        return Err(config_err("constraint estimate over an empty batch"));
    }
    Ok(())
}

/// `1 − P_out − mean ũ_β(ratio − 1)`; positive means violated.
pub fn constraint_annealed(ratios: &[f64], p_out: f64, beta: f64) -> Result<f64> {
    Ok(constraint_annealed_grad(ratios, p_out, beta)?.0)
}

/// [`constraint_annealed`] and its gradient in the ratios.
pub fn constraint_annealed_grad(ratios: &[f64], p_out: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
    nonempty(ratios)?;
    let n = ratios.len() as f64;
    let satisfied: f64 = ratios.iter().map(|r| annealed_unit_step(r - 1.0, beta)).sum();
    let grad = ratios.iter().map(|r| -annealed_unit_step_grad(r - 1.0, beta) / n).collect();
    Ok((1.0 - p_out - satisfied / n, grad))
}

/// Hard-count estimate `1 − P_out − (fraction with ratio ≥ 1)`.
pub fn constraint_hard(ratios: &[f64], p_out: f64) -> Result<f64> {
    nonempty(ratios)?;
    let ok = ratios.iter().filter(|&&r| r >= 1.0).count() as f64;
    Ok(1.0 - p_out - ok / ratios.len() as f64)
}

/// Exponential averaging of the sharpness toward
/// `1 / max(−Q̂_{P_out}(ratio − 1), 1/β̄)`.
pub fn update_beta(beta_prev: f64, ratios: &[f64], p_out: f64, eta_c: f64, beta_bar: f64) -> f64 {
    let shifted: Vec<f64> = ratios.iter().map(|r| r - 1.0).collect();
    let Some(q) = quantile(&shifted, p_out) else { return beta_prev };
    let target = 1.0 / (-q).max(1.0 / beta_bar);
    ((1.0 - eta_c) * beta_prev + eta_c * target).min(beta_bar)
}

/// Empirical `(1 − P_out)`-quantile of `γ − SINR`; positive iff the
/// empirical outage exceeds `P_out` (up to interpolation).
pub fn constraint_quantile(sinr: &[f64], gamma: &[f64], p_out: f64) -> Result<f64> {
    Ok(constraint_quantile_grad(sinr, gamma, p_out)?.0)
}

/// [`constraint_quantile`] and its gradient in the SINR values, nonzero only
/// at the two order statistics around the quantile.
pub fn constraint_quantile_grad(sinr: &[f64], gamma: &[f64], p_out: f64) -> Result<(f64, Vec<f64>)> {
    nonempty(sinr)?;
    if sinr.len() != gamma.len() {
        return Err(Error::Dimension("SINR and target counts differ".into()));
    }
    let gap: Vec<f64> = gamma.iter().zip(sinr).map(|(g, s)| g - s).collect();
    let (lo, hi, w) = quantile_support(&gap, 1.0 - p_out);
    let mut grad = vec![0.0; gap.len()];
    grad[lo] -= 1.0 - w;
    grad[hi] -= w;
    Ok(((1.0 - w) * gap[lo] + w * gap[hi], grad))
}

/// `λ_d ← max(0, λ_d + η g_d)`.
pub fn dual_ascent(lambdas: &mut [f64], grads: &[f64], eta: f64) {
    for (l, g) in lambdas.iter_mut().zip(grads) {
        *l = (*l + eta * g).max(0.0);
    }
}

/// `J_cm = mean_power / I + Σ_d λ̄ [ĝ_d]₊`.
pub fn convergence_metric(mean_power: f64, users: usize, g_hat: &[f64], lambda_bar: f64) -> f64 {
    mean_power / users as f64 + g_hat.iter().map(|g| lambda_bar * g.max(0.0)).sum::<f64>()
}

/// Empirical constraint estimates `ĝ_d` from evaluation outcomes.
pub fn empirical_constraints(
    groups: &[usize],
    outcomes: &[InstanceOutcome],
    num_groups: usize,
    p_out: f64,
) -> Vec<f64> {
    (0..num_groups)
        .map(|d| {
            let (ok, total) = outcomes
                .iter()
                .zip(groups)
                .filter(|(_, &g)| g == d)
                .fold((0, 0), |(a, b), (o, _)| (a + o.satisfied, b + o.total));
            if total == 0 {
                0.0
            } else {
                1.0 - p_out - ok as f64 / total as f64
            }
        })
        .collect()
}

/// Value and output gradients of the minibatch Lagrangian.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub mean_power: f64,
    /// Constraint estimates `g̃_d`, also the dual gradients.
    pub g: Vec<f64>,
    /// SINR ratios per group, pooled over users and realizations.
    pub ratios: Vec<Vec<f64>>,
    /// Output gradients per instance and realization.
    pub grads: Vec<Vec<OutputGrad>>,
}

/// Lagrangian `mean w^T p + Σ_d λ_d g̃_d` of a solved minibatch, with SINR
/// evaluated on the true channels.
pub fn lagrangian_loss(
    batch: &[&ScenarioInstance],
    solves: &[&InstanceSolve],
    lambdas: &[f64],
    betas: &[f64],
    cfg: &RunConfig,
) -> Result<LossEval> {
    let groups = lambdas.len();
    let mode = cfg.model.solver.weight_mode;
    let b = batch.len() as f64;
    // (instance, realization, user) per pooled entry of each group.
    let mut members: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); groups];
    let mut sinr: Vec<Vec<Vec<f64>>> = Vec::with_capacity(batch.len());
    let mut mean_power = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for (k, (inst, solve)) in batch.iter().zip(solves).enumerate() {
        let d = inst.group_id;
        if d >= groups {
            return Err(config_err(format!("group {d} has no dual variable")));
        }
        let r_count = solve.outputs.len() as f64;
        let mut per_r = Vec::with_capacity(solve.outputs.len());
        let mut g_k = Vec::with_capacity(solve.outputs.len());
        for (r, sol) in solve.outputs.iter().enumerate() {
            let w = power_weights(&sol.analog.matrix, &sol.b, mode);
            mean_power += sol.p.iter().zip(&w).map(|(p, w)| p * w).sum::<f64>() / (b * r_count);
            g_k.push(power_vjp(&sol.p, &sol.b, &sol.analog.matrix, mode, 1.0 / (b * r_count)));
            per_r.push(sol.downlink_sinr(&inst.eval_covs(r)));
            members[d].extend((0..inst.users()).map(|i| (k, r, i)));
        }
        sinr.push(per_r);
        grads.push(g_k);
    }
    let mut g = vec![0.0; groups];
    let mut ratios = vec![Vec::new(); groups];
    let mut d_sinr: Vec<Vec<Vec<f64>>> = sinr.iter().map(|s| s.iter().map(|v| vec![0.0; v.len()]).collect()).collect();
    for d in 0..groups {
        if members[d].is_empty() {
            return Err(config_err(format!("minibatch has no instance of group {d}")));
        }
        let s: Vec<f64> = members[d].iter().map(|&(k, r, i)| sinr[k][r][i]).collect();
        let gam: Vec<f64> = members[d].iter().map(|&(k, _, i)| batch[k].sinr_targets[i]).collect();
        ratios[d] = s.iter().zip(&gam).map(|(s, g)| s / g).collect();
        let dg_ds: Vec<f64> = match cfg.constraint {
            ConstraintMode::Annealed => {
                let (v, dr) = constraint_annealed_grad(&ratios[d], cfg.p_out, betas[d])?;
                g[d] = v;
                dr.iter().zip(&gam).map(|(dr, g)| dr / g).collect()
            }
            ConstraintMode::Quantile => {
                let (v, ds) = constraint_quantile_grad(&s, &gam, cfg.p_out)?;
                g[d] = v;
                ds
            }
        };
        for (&(k, r, i), dv) in members[d].iter().zip(dg_ds) {
            d_sinr[k][r][i] += lambdas[d] * dv;
        }
    }
    for (k, (inst, solve)) in batch.iter().zip(solves).enumerate() {
        for (r, sol) in solve.outputs.iter().enumerate() {
            if d_sinr[k][r].iter().all(|&x| x == 0.0) {
                continue;
            }
            let (_, og) = downlink_sinr_vjp(&sol.p, &sol.b, &sol.analog.matrix, &inst.eval_covs(r), &d_sinr[k][r]);
            grads[k][r].add_assign(&og);
        }
    }
    let loss = mean_power + lambdas.iter().zip(&g).map(|(l, g)| l * g).sum::<f64>();
    Ok(LossEval { loss, mean_power, g, ratios, grads })
}

/// Mutable state of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub clip: ClipHistory,
    pub lambdas: Vec<f64>,
    pub betas: Vec<f64>,
    pub step: usize,
    pub decayed: bool,
    /// `(step, J_cm)` per validation.
    pub validations: Vec<(usize, f64)>,
}

impl TrainState {
    pub fn new(cfg: &RunConfig, groups: usize) -> Result<Self> {
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let n = model.flat_params().len();
        Ok(Self {
            model,
            adam: AdamState::new(n),
            clip: ClipHistory::default(),
            lambdas: vec![0.0; groups],
            betas: vec![cfg.beta_bar; groups],
            step: 0,
            decayed: false,
            validations: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub g: Vec<f64>,
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    pub j_cm: Option<f64>,
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let groups = history.first().map_or(0, |r| r.g.len());
    let mut s = String::from("step,loss");
    for name in ["g", "lambda", "beta"] {
        (0..groups).for_each(|d| {
            let _ = write!(s, ",{name}_{d}");
        });
    }
    s.push_str(",j_cm\n");
    for r in history {
        let _ = write!(s, "{},{}", r.step, r.loss);
        for v in r.g.iter().chain(&r.lambda).chain(&r.beta) {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{}", r.j_cm.map_or_else(String::new, |j| j.to_string()));
    }
    s
}

pub fn write_history_csv(path: &Path, history: &[HistoryRow]) -> Result<()> {
    std::fs::write(path, history_csv(history))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State after the last step.
    pub state: TrainState,
    /// Model with the lowest validation `J_cm`.
    pub best: Model,
    pub best_step: usize,
    pub best_jcm: Option<f64>,
    pub history: Vec<HistoryRow>,
}

/// Validation metric of a model.
pub fn validate_model(
    model: &Model,
    val: &[ScenarioInstance],
    codebook: &Codebook,
    groups: usize,
    cfg: &RunConfig,
) -> Result<f64> {
    let outcomes = learned_outcomes(model, val, codebook)?;
    let gid: Vec<usize> = val.iter().map(|s| s.group_id).collect();
    let mean_power = outcomes.iter().map(|o| o.power).sum::<f64>() / outcomes.len() as f64;
    let g_hat = empirical_constraints(&gid, &outcomes, groups, cfg.p_out);
    Ok(convergence_metric(mean_power, val[0].users(), &g_hat, cfg.lambda_bar))
}

fn group_members(data: &[ScenarioInstance], groups: usize) -> Vec<Vec<usize>> {
    let mut m = vec![Vec::new(); groups];
    for (k, s) in data.iter().enumerate() {
        m[s.group_id].push(k);
    }
    m
}

/// Stratified minibatch: `batch_size` split evenly over the groups (the
/// remainder to the lowest indices), drawn without replacement per group.
fn draw_batch(members: &[Vec<usize>], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let d = members.len();
    let mut out = Vec::with_capacity(batch_size);
    for (g, idx) in members.iter().enumerate() {
        let want = (batch_size / d + usize::from(g < batch_size % d)).clamp(1, idx.len());
        out.extend(sample(rng, idx.len(), want).into_iter().map(|j| idx[j]));
    }
    out
}

/// Trains on `train`, validating on `val` every `val_interval` steps.
pub fn train(
    train: &[ScenarioInstance],
    val: &[ScenarioInstance],
    codebook: &Codebook,
    cfg: &RunConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(config_err("training and validation sets must be nonempty"));
    }
    let groups = train.iter().chain(val).map(|s| s.group_id + 1).max().unwrap_or(1);
    let members = group_members(train, groups);
    if members.iter().any(Vec::is_empty) || group_members(val, groups).iter().any(Vec::is_empty) {
        return Err(config_err("every constraint group needs training and validation instances"));
    }
    let mut state = TrainState::new(cfg, groups)?;
    let mut history = Vec::new();
    if cfg.max_steps == 0 {
        let best = state.model.clone();
        return Ok(TrainOutcome { state, best, best_step: 0, best_jcm: None, history });
    }
    let initial = validate_model(&state.model, val, codebook, groups, cfg)?;
    state.validations.push((0, initial));
    let (mut best, mut best_step, mut best_jcm) = (state.model.clone(), 0, initial);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut scale = 1.0;
    log::info!("initial J_cm {initial:.4}");
    while state.step < cfg.max_steps {
        let idx = draw_batch(&members, cfg.batch_size, &mut rng);
        let batch: Vec<&ScenarioInstance> = idx.iter().map(|&k| &train[k]).collect();
        let fwd = state.model.forward_batch(&batch, codebook, true)?;
        let solves: Vec<&InstanceSolve> = fwd.items.iter().map(|f| &f.solve).collect();
        let eval = lagrangian_loss(&batch, &solves, &state.lambdas, &state.betas, cfg)?;
        let bg = state.model.backward_batch(&batch, codebook, &fwd, &eval.grads);
        let mut grad = flatten_gradient(&bg.params);
        clip_gradient_adaptive(&mut grad, &mut state.clip);
        let mut params = state.model.flat_params();
        if adam_update(&mut params, &grad, &mut state.adam, cfg.lr_primal * scale, &cfg.adam) {
            state.model.set_flat_params(&params)?;
        } else {
            log::warn!("step {}: non-finite gradient skipped", state.step);
        }
        if cfg.constraint == ConstraintMode::Annealed {
            for (beta, r) in state.betas.iter_mut().zip(&eval.ratios) {
                *beta = update_beta(*beta, r, cfg.p_out, cfg.eta_c, cfg.beta_bar);
            }
        }
        dual_ascent(&mut state.lambdas, &eval.g, cfg.dual_eta() * scale);
        state.step += 1;
        let mut row = HistoryRow {
            step: state.step,
            loss: eval.loss,
            g: eval.g,
            lambda: state.lambdas.clone(),
            beta: state.betas.clone(),
            j_cm: None,
        };
        if state.step % cfg.val_interval == 0 {
            let j = validate_model(&state.model, val, codebook, groups, cfg)?;
            row.j_cm = Some(j);
            state.validations.push((state.step, j));
            log::debug!("step {} J_cm {j:.4} lambda {:?}", state.step, state.lambdas);
            if !j.is_finite() || j > cfg.divergence_factor * initial {
                return Err(Error::Divergence(format!(
                    "validation J_cm {j:.4} at step {} exceeds {}x its initial value {initial:.4}; \
                     the outage target may be unattainable for this data",
                    state.step, cfg.divergence_factor
                )));
            }
            if j < best_jcm {
                (best, best_step, best_jcm) = (state.model.clone(), state.step, j);
            }
            let stale = state.step - best_step;
            if !state.decayed && stale >= cfg.patience[0] {
                state.decayed = true;
                scale = cfg.lr_decay;
                log::info!("step {}: step sizes decayed by {}", state.step, cfg.lr_decay);
            }
            if stale >= cfg.patience[1] {
                history.push(row);
                break;
            }
        }
        history.push(row);
    }
    Ok(TrainOutcome { state, best, best_step, best_jcm: Some(best_jcm), history })
}

/// Trains on all folds of `ds` but `fold`, validating on `fold`.
pub fn train_fold(ds: &Dataset, fold: usize, cfg: &RunConfig) -> Result<TrainOutcome> {
    let (tr, va) = ds.fold_indices(cfg.folds, fold)?;
    train(&ds.subset(&tr).instances, &ds.subset(&va).instances, &ds.codebook(), cfg)
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub best_step: usize,
    pub best_jcm: Option<f64>,
    /// Best model evaluated on the held-out fold.
    pub report: EvalReport,
}

/// `k`-fold cross validation with contiguous folds.
pub fn cross_validate(ds: &Dataset, k: usize, cfg: &RunConfig) -> Result<Vec<FoldResult>> {
    if k < 2 {
        return Err(config_err("cross validation needs at least two folds"));
    }
    let cfg = RunConfig { folds: k, ..cfg.clone() };
    let codebook = ds.codebook();
    (0..k)
        .map(|fold| {
            let out = train_fold(ds, fold, &cfg)?;
            let (_, va) = ds.fold_indices(k, fold)?;
            let test = ds.subset(&va);
            let outcomes = learned_outcomes(&out.best, &test.instances, &codebook)?;
            let gid: Vec<usize> = test.instances.iter().map(|s| s.group_id).collect();
            let ng = ds.config.groups.len();
            let report = summarize(&format!("u_{}", cfg.model.variant.name()), fold, &gid, &outcomes, ng);
            Ok(FoldResult { fold, best_step: out.best_step, best_jcm: out.best_jcm, report })
        })
        .collect()
}

/// JSON header of a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub antennas: usize,
    pub users: usize,
    pub seed: u64,
    pub fold: Option<usize>,
    pub best_step: usize,
    pub best_jcm: Option<f64>,
    /// Layout of the float64 blob.
    pub layout: String,
}

pub const BLOB_LAYOUT: &str = "per network: per layer the column-major filter taps then the bias, \
     then normalization scale, shift, running mean and running variance";

pub fn save_model(path: &Path, model: &Model, header: &CheckpointHeader) -> Result<()> {
    write_checkpoint(path, header, &model.to_blob())
}

pub fn load_model(path: &Path) -> Result<(CheckpointHeader, Model)> {
    let (header, blob): (CheckpointHeader, Vec<f64>) = read_checkpoint(path)?;
    let model = Model::from_blob(header.model.clone(), &blob)?;
    Ok((header, model))
}
