//! Learned greedy hybrid beamformer and its reverse mode.
//!
//! Per instance the network maps user features to four positive
//! coefficients `z_i`, which shape the virtual channels
//!
//! ```text
//! Ψ_des,i  = A^H (z_i1 R̂_i + z_i2 (tr R̂_i / M) I) A
//! Ψ_intf,i = A^H (z_i3 R̂_i + z_i4 (tr R̂_i / M) I) A
//! ```
//!
//! used by every candidate solve of the greedy search and by the final
//! power recovery. Gradients reach `z` through the implicit derivative of
//! the final uplink solve and, unless disabled, through a softmin
//! relaxation of each greedy argmin (forward argmin, backward softmin).
//!
//! With sampled channels the analog stage runs on the statistical `R̂`
//! while a baseband solve per sample uses `ĥĥ^H` and its own coefficients,
//! from the same network or from a second one ([`Variant::TwoGcn`]).

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::implicit::{
    coords_from_pairing, gradient_matrix, implicit_vjp, pairing, real_vec, PrimalDualPoint, PsiGradient,
};
use crate::linalg::{congruence, quad_form, singular_value_ratio, trace_re, CMat, CVec, RMat, RVec, C64, ONE, ZERO};
use crate::neural::{Gcnn, GcnnConfig, GcnnParams, GraphCache, NormCache};
use crate::scenario::{Codebook, ScenarioInstance};
use crate::solver::{
    coupling_matrix, finalize, greedy_select, init_analog, power_weights, recover_downlink_power, uplink_fixed_point,
    weight_matrix, AnalogSelection, BeamformingSolution, GreedyTrace, SolverConfig, VirtualChannels, WeightMode,
};

/// Coefficients per user.
pub const COEFFS: usize = 4;
/// Input features per user.
pub const FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Graph network driving the greedy hybrid search.
    Gcn,
    /// Per-user network without graph shifts.
    Fcn,
    /// Fully digital: identity analog stage with one chain per antenna.
    Fdbf,
    /// Separate networks for the analog and the per-sample baseband stage.
    TwoGcn,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Gcn => "gcn",
            Variant::Fcn => "fcn",
            Variant::Fdbf => "fdbf",
            Variant::TwoGcn => "two_gcn",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Variant::Gcn),
            "fcn" => Ok(Variant::Fcn),
            "fdbf" => Ok(Variant::Fdbf),
            "two_gcn" => Ok(Variant::TwoGcn),
            _ => Err(config_err(format!("unknown model variant '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// `M_rf`; ignored by [`Variant::Fdbf`], which uses one chain per antenna.
    pub rf_chains: usize,
    /// Greedy steps `L_rf`.
    pub greedy_steps: usize,
    pub gcnn: GcnnConfig,
    /// Softmin temperature `β_M` of the selection relaxation.
    pub beta_m: f64,
    /// Propagate gradients through the greedy selection.
    pub straight_through: bool,
    pub solver: SolverConfig,
    /// Coefficients produced by a freshly initialized network; the output
    /// layer bias is set so that zero hidden activity maps to these values.
    pub coeff_init: [f64; COEFFS],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Gcn,
            rf_chains: 5,
            greedy_steps: 5,
            gcnn: GcnnConfig::default(),
            beta_m: 5.0,
            straight_through: true,
            solver: SolverConfig::default(),
            coeff_init: [1.0; COEFFS],
        }
    }
}

impl ModelConfig {
    /// Defaults for `variant`: the fully connected ablation uses order 0 and
    /// 64 hidden features.
    pub fn for_variant(variant: Variant, rf_chains: usize, greedy_steps: usize) -> Self {
        let gcnn = match variant {
            Variant::Fcn => GcnnConfig { order: 0, hidden: 64, ..GcnnConfig::default() },
            _ => GcnnConfig::default(),
        };
        Self { variant, rf_chains, greedy_steps, gcnn, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.gcnn.validate()?;
        if self.gcnn.in_features != FEATURES || self.gcnn.out_features != COEFFS {
            return Err(config_err(format!("network must map {FEATURES} features to {COEFFS} coefficients")));
        }
        if self.variant == Variant::Fcn && self.gcnn.order != 0 {
            return Err(config_err("the fcn variant requires order 0"));
        }
        if self.variant != Variant::Fdbf && self.rf_chains == 0 {
            return Err(config_err("rf_chains must be positive"));
        }
        if !(self.beta_m > 0.0) {
            return Err(config_err("beta_m must be positive"));
        }
        let bound = self.gcnn.out_bound.exp();
        if !self.coeff_init.iter().all(|&v| v > 1.0 / bound && v < bound) {
            return Err(config_err(format!("coeff_init entries must lie in ({:e}, {:e})", 1.0 / bound, bound)));
        }
        Ok(())
    }

    fn nets(&self) -> usize {
        if self.variant == Variant::TwoGcn {
            2
        } else {
            1
        }
    }
}

/// Rows `(ln‖R̂_i‖_F², ln γ_i, ln ξ_i, ln P_max)`.
pub fn input_features(est_cov: &[CMat], gamma: &[f64], side_info: &[f64], p_max: f64) -> Result<RMat> {
    let n = est_cov.len();
    let mut z = RMat::zeros(n, FEATURES);
    for i in 0..n {
        let row = [est_cov[i].norm_squared().ln(), gamma[i].ln(), side_info[i].ln(), p_max.ln()];
        if !row.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite input feature for user {i}")));
        }
        for (c, v) in row.into_iter().enumerate() {
            z[(i, c)] = v;
        }
    }
    Ok(z)
}

/// Graph shift: `|tr(R̂_k R̂_l)| / (tr R̂_k tr R̂_l)` off the diagonal, zero on it.
pub fn correlation_shift(est_cov: &[CMat]) -> RMat {
    let n = est_cov.len();
    let traces: Vec<f64> = est_cov.iter().map(trace_re).collect();
    let mut s = RMat::zeros(n, n);
    for k in 0..n {
        for l in k + 1..n {
            // tr(R_k R_l) = Σ conj(R_k)_{ab} (R_l)_{ab} for Hermitian R_k
            let t: C64 = est_cov[k].iter().zip(est_cov[l].iter()).map(|(a, b)| a.conj() * b).sum();
            let v = t.norm() / (traces[k] * traces[l]);
            s[(k, l)] = v;
            s[(l, k)] = v;
        }
    }
    s
}

/// `a R + b I`, adding `b` to the diagonal only.
fn loaded(r: &CMat, a: f64, b: f64) -> CMat {
    let mut x = r.scale(a);
    for k in 0..x.nrows() {
        x[(k, k)] += C64::new(b, 0.0);
    }
    x
}

/// Virtual channels shaped by the coefficient rows of `z`.
pub fn coefficient_channels(est_cov: &[CMat], analog: &CMat, z: &RMat, mode: WeightMode) -> VirtualChannels {
    let m = analog.nrows() as f64;
    let mut des = Vec::with_capacity(est_cov.len());
    let mut intf = Vec::with_capacity(est_cov.len());
    for (i, r) in est_cov.iter().enumerate() {
        let t = trace_re(r) / m;
        des.push(congruence(analog, &loaded(r, z[(i, 0)], t * z[(i, 1)])));
        intf.push(congruence(analog, &loaded(r, z[(i, 2)], t * z[(i, 3)])));
    }
    let w = weight_matrix(analog, mode);
    VirtualChannels { des, intf, weight: vec![w; est_cov.len()] }
}

fn re_inner(h: &CMat, x: &CMat) -> f64 {
    h.iter().zip(x.iter()).map(|(a, b)| (a.conj() * b).re).sum()
}

/// Reverse mode of [`coefficient_channels`]: gradients with respect to `z`
/// and the analog matrix from Hermitian-coordinate gradients `g`.
pub fn channel_vjp(est_cov: &[CMat], analog: &CMat, z: &RMat, g: &PsiGradient, mode: WeightMode) -> (RMat, CMat) {
    let (m, mr) = analog.shape();
    let mut dz = RMat::zeros(est_cov.len(), COEFFS);
    let mut da = CMat::zeros(m, mr);
    let gram = analog.adjoint() * analog;
    for (i, r) in est_cov.iter().enumerate() {
        let t = trace_re(r) / m as f64;
        let h_des = gradient_matrix(&g.des[i], mr);
        let h_intf = gradient_matrix(&g.intf[i], mr);
        let phi = congruence(analog, r);
        dz[(i, 0)] = re_inner(&h_des, &phi);
        dz[(i, 1)] = t * re_inner(&h_des, &gram);
        dz[(i, 2)] = re_inner(&h_intf, &phi);
        dz[(i, 3)] = t * re_inner(&h_intf, &gram);
        // Ψ = A^H X A  ⇒  ∂L/∂A = 2 X A H
        let x_des = loaded(r, z[(i, 0)], t * z[(i, 1)]);
        let x_intf = loaded(r, z[(i, 2)], t * z[(i, 3)]);
        da += (x_des * analog * h_des + x_intf * analog * h_intf).scale(2.0);
        if mode == WeightMode::Rf {
            da += (analog * gradient_matrix(&g.weight[i], mr)).scale(2.0);
        }
    }
    (dz, da)
}

fn softmin_with(norms: &[f64], beta: f64, q_min: f64) -> Vec<f64> {
    let e: Vec<f64> =
        norms.iter().map(|&s| if s.is_finite() { (-beta * (s - q_min) / q_min).exp() } else { 0.0 }).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

fn finite_min(norms: &[f64]) -> Option<f64> {
    let m = norms.iter().copied().filter(|x| x.is_finite()).fold(f64::INFINITY, f64::min);
    m.is_finite().then_some(m.max(f64::MIN_POSITIVE))
}

/// Weights `∝ exp(−β ‖q_a‖₁ / q_min)` with `q_min` the smallest finite norm;
/// infinite norms get zero weight. `None` if no norm is finite.
pub fn softmin_weights(norms: &[f64], beta: f64) -> Option<Vec<f64>> {
    finite_min(norms).map(|q_min| softmin_with(norms, beta, q_min))
}

/// Identity "codebook" of the fully digital variant.
pub fn identity_codebook(codebook: &Codebook) -> Codebook {
    let m = codebook.antennas();
    Codebook { codewords: CMat::identity(m, m), m_x: codebook.m_x, m_y: codebook.m_y, oversampling: 1 }
}

/// Solver outputs of one instance.
#[derive(Debug, Clone)]
pub struct InstanceSolve {
    pub trace: GreedyTrace,
    /// One output per realization, all sharing the analog selection.
    pub outputs: Vec<BeamformingSolution>,
    /// Baseband-stage channels per sample; empty without sampled channels.
    pub baseband_psi: Vec<VirtualChannels>,
}

impl InstanceSolve {
    pub fn analog(&self) -> &AnalogSelection {
        &self.outputs[0].analog
    }

    /// Virtual channels the output of realization `r` was recovered with.
    pub fn psi(&self, r: usize) -> &VirtualChannels {
        if self.baseband_psi.is_empty() {
            &self.trace.final_psi
        } else {
            &self.baseband_psi[r]
        }
    }
}

/// Runs the pipeline of one instance with given coefficients: `z` for the
/// analog stage (and the final solve without samples), `z_bb[r]` for the
/// baseband solve of sample `r`.
pub fn solve_with_coefficients(
    cfg: &ModelConfig,
    inst: &ScenarioInstance,
    codebook: &Codebook,
    z: &RMat,
    z_bb: &[RMat],
) -> Result<InstanceSolve> {
    let mode = cfg.solver.weight_mode;
    let gamma = &inst.sinr_targets;
    let (trace_cb, init, steps);
    if cfg.variant == Variant::Fdbf {
        trace_cb = identity_codebook(codebook);
        init = AnalogSelection::from_indices(&trace_cb, (0..trace_cb.len()).collect());
        steps = 0;
    } else {
        trace_cb = codebook.clone();
        init = init_analog(&inst.est_cov, codebook, cfg.rf_chains)?;
        steps = cfg.greedy_steps;
    }
    let build = |a: &CMat| coefficient_channels(&inst.est_cov, a, z, mode);
    let (sol, trace) = greedy_select(build, gamma, &trace_cb, init, steps, inst.p_max, &cfg.solver);
    if inst.samples.is_none() {
        return Ok(InstanceSolve { trace, outputs: vec![sol], baseband_psi: Vec::new() });
    }
    let reps = inst.realizations();
    if z_bb.len() != reps {
        return Err(Error::Dimension(format!("{} baseband coefficient sets for {reps} samples", z_bb.len())));
    }
    let analog = sol.analog;
    let power_cap = cfg.solver.power_cap_factor * inst.p_max;
    let rank_ok = singular_value_ratio(&analog.matrix) >= cfg.solver.rank_tol;
    let mut outputs = Vec::with_capacity(reps);
    let mut baseband_psi = Vec::with_capacity(reps);
    for (r, zr) in z_bb.iter().enumerate() {
        let covs = inst.realization_est_covs(r);
        let psi = coefficient_channels(&covs, &analog.matrix, zr, mode);
        let up = if rank_ok {
            uplink_fixed_point(&psi, gamma, cfg.solver.tol, cfg.solver.max_iter, power_cap).ok()
        } else {
            None
        };
        outputs.push(finalize(&psi, gamma, analog.clone(), up.as_ref(), inst.p_max, mode));
        baseband_psi.push(psi);
    }
    Ok(InstanceSolve { trace, outputs, baseband_psi })
}

/// Loss gradient with respect to one realization's outputs.
///
/// `db` holds one column per user with `dL = Re Σ_i db_i^H δb_i`; `da` uses
/// the same convention for the analog matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub dp: RVec,
    pub db: CMat,
    pub da: CMat,
}

impl OutputGrad {
    pub fn zeros(users: usize, rf_chains: usize, antennas: usize) -> Self {
        Self { dp: RVec::zeros(users), db: CMat::zeros(rf_chains, users), da: CMat::zeros(antennas, rf_chains) }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.dp += &other.dp;
        self.db += &other.db;
        self.da += &other.da;
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { dp: self.dp.scale(c), db: self.db.scale(c), da: self.da.scale(c) }
    }
}

/// Downlink SINRs against `covs` and the output gradient of
/// `Σ_i d_sinr_i · SINR_i`.
pub fn downlink_sinr_vjp(p: &RVec, b: &CMat, analog: &CMat, covs: &[CMat], d_sinr: &[f64]) -> (Vec<f64>, OutputGrad) {
    let n = covs.len();
    let x = analog * b;
    let cols: Vec<CVec> = (0..n).map(|j| x.column(j).into_owned()).collect();
    let gains: Vec<Vec<f64>> = covs.iter().map(|r| cols.iter().map(|c| quad_form(r, c)).collect()).collect();
    let den: Vec<f64> =
        (0..n).map(|i| 1.0 + (0..n).filter(|&j| j != i).map(|j| p[j] * gains[i][j]).sum::<f64>()).collect();
    let sinr: Vec<f64> = (0..n).map(|i| p[i] * gains[i][i] / den[i]).collect();
    let mut grad = OutputGrad::zeros(n, b.nrows(), analog.nrows());
    let mut dx = vec![CVec::zeros(analog.nrows()); n];
    for i in 0..n {
        let c = d_sinr[i];
        if c == 0.0 {
            continue;
        }
        for j in 0..n {
            let dg = if j == i {
                grad.dp[i] += c * gains[i][i] / den[i];
                c * p[i] / den[i]
            } else {
                grad.dp[j] -= c * sinr[i] * gains[i][j] / den[i];
                -c * sinr[i] * p[j] / den[i]
            };
            dx[j] += (&covs[i] * &cols[j]).scale(2.0 * dg);
        }
    }
    for j in 0..n {
        grad.db.set_column(j, &(analog.adjoint() * &dx[j]));
        grad.da += &dx[j] * b.column(j).adjoint();
    }
    (sinr, grad)
}

/// Output gradient of `c · w^T p`.
pub fn power_vjp(p: &RVec, b: &CMat, analog: &CMat, mode: WeightMode, c: f64) -> OutputGrad {
    let n = p.len();
    let w = power_weights(analog, b, mode);
    let mut grad = OutputGrad::zeros(n, b.nrows(), analog.nrows());
    grad.dp = RVec::from_fn(n, |i, _| c * w[i]);
    let g = weight_matrix(analog, mode);
    for i in 0..n {
        let bi = b.column(i).into_owned();
        grad.db.set_column(i, &(&g * &bi).scale(2.0 * c * p[i]));
        if mode == WeightMode::Rf {
            grad.da += (analog * &bi * bi.adjoint()).scale(2.0 * c * p[i]);
        }
    }
    grad
}

/// Reverse mode of `p = project([p_raw]₊)`: `(∂L/∂p_raw, ∂L/∂w)`, using the
/// interior branch at the kink `w^T p = P_max`.
pub fn projection_vjp(p_raw: &RVec, w: &[f64], p_max: f64, dp: &RVec) -> (RVec, RVec) {
    let n = p_raw.len();
    let pos = p_raw.map(|x| x.max(0.0));
    let total: f64 = pos.iter().zip(w).map(|(a, b)| a * b).sum();
    let (mut dpos, dw) = if total <= p_max {
        (dp.clone(), RVec::zeros(n))
    } else {
        let s = p_max / total;
        let inner = dp.dot(&pos);
        let k = -p_max / (total * total) * inner;
        (RVec::from_fn(n, |i, _| s * dp[i] + k * w[i]), RVec::from_fn(n, |i, _| k * pos[i]))
    };
    for i in 0..n {
        if p_raw[i] <= 0.0 {
            dpos[i] = 0.0;
        }
    }
    (dpos, dw)
}

/// Gradient contribution of one stage of the reverse pass.
#[derive(Debug, Clone)]
pub struct StageGrad {
    pub dz: RMat,
    pub da: CMat,
    /// Implicit solves attempted and those zeroed as singular.
    pub solves: usize,
    pub singular: usize,
}

fn gauge_rotation(b: &CVec) -> C64 {
    let last = b[b.len() - 1];
    let m = last.norm();
    if m > 0.0 {
        last.conj() / m
    } else {
        ONE
    }
}

/// Reverse mode of projection, power recovery `C p = 1` and the final
/// uplink solve of one realization.
#[allow(clippy::too_many_arguments)]
pub fn final_stage_vjp(
    est_cov: &[CMat],
    z: &RMat,
    sol: &BeamformingSolution,
    psi: &VirtualChannels,
    gamma: &[f64],
    p_max: f64,
    mode: WeightMode,
    grad: &OutputGrad,
) -> StageGrad {
    let n = gamma.len();
    let a = &sol.analog.matrix;
    let mr = a.ncols();
    let mut out = StageGrad { dz: RMat::zeros(n, COEFFS), da: grad.da.clone(), solves: 0, singular: 0 };
    if !sol.feasible {
        return out;
    }
    let w = power_weights(a, &sol.b, mode);
    let (dp_raw, dw) = projection_vjp(&sol.p_raw, &w, p_max, &grad.dp);
    let c = coupling_matrix(&sol.b, psi, gamma);
    out.solves += 1;
    let Some(u) = c.transpose().lu().solve(&dp_raw) else {
        out.singular += 1;
        return out;
    };
    let cols: Vec<CVec> = (0..n).map(|i| sol.b.column(i).into_owned()).collect();
    let mut db: Vec<CVec> = (0..n).map(|i| grad.db.column(i).into_owned()).collect();
    let mut pair_des = vec![CMat::from_element(mr, mr, ZERO); n];
    let mut pair_intf = pair_des.clone();
    let mut pair_weight = pair_des.clone();
    // p_raw = C^{-1} 1  ⇒  ∂L/∂C = −C^{-T} (∂L/∂p_raw) p_raw^T
    for i in 0..n {
        for j in 0..n {
            let dc = -u[i] * sol.p_raw[j];
            if i == j {
                let s = dc / gamma[i];
                pair_des[i] += pairing(&cols[i], &cols[i]).scale(s);
                db[i] += (&psi.des[i] * &cols[i]).scale(2.0 * s);
            } else {
                pair_intf[i] -= pairing(&cols[j], &cols[j]).scale(dc);
                db[j] -= (&psi.intf[i] * &cols[j]).scale(2.0 * dc);
            }
        }
        pair_weight[i] += pairing(&cols[i], &cols[i]).scale(dw[i]);
        db[i] += (&psi.weight[i] * &cols[i]).scale(2.0 * dw[i]);
    }
    let zeta = PrimalDualPoint::from_solution(&sol.b, &sol.p_raw, &sol.q);
    let d = 2 * mr - 1;
    let mut upstream = RVec::zeros(zeta.len());
    for i in 0..n {
        let g = &db[i] * gauge_rotation(&cols[i]);
        upstream.rows_mut(i * d, d).copy_from(&real_vec(&g));
    }
    out.solves += 1;
    let ig = implicit_vjp(&upstream, &zeta, psi, gamma);
    if ig.singular {
        out.singular += 1;
        return out;
    }
    let mut total = ig.grad;
    for i in 0..n {
        total.des[i] += coords_from_pairing(&pair_des[i]);
        total.intf[i] += coords_from_pairing(&pair_intf[i]);
        total.weight[i] += coords_from_pairing(&pair_weight[i]);
    }
    let (dz, da) = channel_vjp(est_cov, a, z, &total, mode);
    out.dz = dz;
    out.da += da;
    out
}

/// Straight-through reverse mode of the greedy selection.
///
/// Each step is replaced, for the backward pass only, by the softmin
/// mixture `Σ_a w_a ă_a` in the updated chain, with `q_min` held constant.
/// `da_final` is the gradient with respect to the final analog matrix; the
/// returned `da` is with respect to the (constant) initialization.
pub fn selection_vjp(
    est_cov: &[CMat],
    z: &RMat,
    trace: &GreedyTrace,
    codebook: &Codebook,
    gamma: &[f64],
    cfg: &ModelConfig,
    da_final: &CMat,
) -> StageGrad {
    let n = gamma.len();
    let mode = cfg.solver.weight_mode;
    let mut out = StageGrad { dz: RMat::zeros(n, COEFFS), da: CMat::zeros(0, 0), solves: 0, singular: 0 };
    let mut g = da_final.clone();
    for step in trace.steps.iter().rev() {
        let r = step.chain;
        let mr = g.ncols();
        let mut g_prev = g.clone();
        g_prev.column_mut(r).fill(ZERO);
        let scores = step.scores();
        if let Some(q_min) = finite_min(&scores) {
            let w = softmin_with(&scores, cfg.beta_m, q_min);
            let gr = g.column(r);
            let dw: Vec<f64> = codebook.codewords.column_iter().map(|c| gr.dotc(&c).re).collect();
            let avg: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            for (a, cand) in step.candidates.iter().enumerate() {
                let Some(cand) = cand else { continue };
                let ds = -(cfg.beta_m / q_min) * w[a] * (dw[a] - avg);
                if ds == 0.0 || !ds.is_finite() {
                    continue;
                }
                let analog = step.incumbent.substitute(codebook, r, a);
                let psi = coefficient_channels(est_cov, &analog.matrix, z, mode);
                out.solves += 1;
                let Some(p) = recover_downlink_power(&cand.b, &psi, gamma) else {
                    out.singular += 1;
                    continue;
                };
                let zeta = PrimalDualPoint::from_solution(&cand.b, &p, &cand.q);
                let mut upstream = RVec::zeros(zeta.len());
                let off = n * (2 * mr - 1);
                upstream.rows_mut(off, n).fill(ds);
                let ig = implicit_vjp(&upstream, &zeta, &psi, gamma);
                if ig.singular {
                    out.singular += 1;
                    continue;
                }
                let (dz, da) = channel_vjp(est_cov, &analog.matrix, z, &ig.grad, mode);
                out.dz += dz;
                for c in (0..mr).filter(|&c| c != r) {
                    let col = da.column(c).into_owned();
                    let mut dst = g_prev.column_mut(c);
                    dst += col;
                }
            }
        }
        g = g_prev;
    }
    out.da = g;
    out
}

/// Gradients of one instance with respect to its coefficients.
#[derive(Debug, Clone)]
pub struct InstanceGrad {
    pub dz: RMat,
    pub dz_bb: Vec<RMat>,
    pub solves: usize,
    pub singular: usize,
}

/// Full reverse pass of one instance given per-realization output
/// gradients.
pub fn instance_vjp(
    cfg: &ModelConfig,
    inst: &ScenarioInstance,
    codebook: &Codebook,
    z: &RMat,
    z_bb: &[RMat],
    solve: &InstanceSolve,
    grads: &[OutputGrad],
) -> InstanceGrad {
    let n = inst.users();
    let mode = cfg.solver.weight_mode;
    let sampled = !solve.baseband_psi.is_empty();
    let mut out = InstanceGrad { dz: RMat::zeros(n, COEFFS), dz_bb: Vec::new(), solves: 0, singular: 0 };
    let a = &solve.analog().matrix;
    let mut da = CMat::zeros(a.nrows(), a.ncols());
    for (r, (sol, grad)) in solve.outputs.iter().zip(grads).enumerate() {
        let (covs, zr) = if sampled { (inst.realization_est_covs(r), &z_bb[r]) } else { (inst.est_cov.clone(), z) };
        let sg = final_stage_vjp(&covs, zr, sol, solve.psi(r), &inst.sinr_targets, inst.p_max, mode, grad);
        if sampled {
            out.dz_bb.push(sg.dz);
        } else {
            out.dz += sg.dz;
        }
        da += sg.da;
        out.solves += sg.solves;
        out.singular += sg.singular;
    }
    if cfg.straight_through && cfg.variant != Variant::Fdbf {
        let sel = selection_vjp(&inst.est_cov, z, &solve.trace, codebook, &inst.sinr_targets, cfg, &da);
        out.dz += sel.dz;
        out.solves += sel.solves;
        out.singular += sel.singular;
    }
    out
}

/// Network evaluation and solver outputs of one instance.
#[derive(Debug, Clone)]
pub struct InstanceForward {
    pub z: RMat,
    pub graph: GraphCache,
    /// Baseband coefficients and caches per sample.
    pub bb: Vec<(RMat, GraphCache)>,
    pub solve: InstanceSolve,
}

impl InstanceForward {
    pub fn z_bb(&self) -> Vec<RMat> {
        self.bb.iter().map(|(z, _)| z.clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    pub items: Vec<InstanceForward>,
    pub analog_norm: NormCache,
    pub baseband_norm: Option<NormCache>,
}

/// Parameter gradients of a batch, one entry per network.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub params: Vec<GcnnParams>,
    pub solves: usize,
    pub singular: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub nets: Vec<Gcnn>,
}

struct Inputs {
    analog: Vec<RMat>,
    analog_shift: Vec<RMat>,
    /// Per instance, per sample.
    baseband: Vec<Vec<RMat>>,
    baseband_shift: Vec<Vec<RMat>>,
}

fn gather_inputs(batch: &[&ScenarioInstance]) -> Result<Inputs> {
    let mut x =
        Inputs { analog: Vec::new(), analog_shift: Vec::new(), baseband: Vec::new(), baseband_shift: Vec::new() };
    for inst in batch {
        x.analog.push(input_features(&inst.est_cov, &inst.sinr_targets, &inst.side_info, inst.p_max)?);
        x.analog_shift.push(correlation_shift(&inst.est_cov));
        let mut f = Vec::new();
        let mut s = Vec::new();
        if inst.samples.is_some() {
            for r in 0..inst.realizations() {
                let covs = inst.realization_est_covs(r);
                f.push(input_features(&covs, &inst.sinr_targets, &inst.side_info, inst.p_max)?);
                s.push(correlation_shift(&covs));
            }
        }
        x.baseband.push(f);
        x.baseband_shift.push(s);
    }
    Ok(x)
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nets: Vec<Gcnn> = (0..cfg.nets()).map(|_| Gcnn::new(cfg.gcnn, &mut rng)).collect::<Result<_>>()?;
        // Inverse of the output activation x ↦ exp(c·tanh(x/c)).
        let c = cfg.gcnn.out_bound;
        for net in nets.iter_mut() {
            let bias = net.params.biases.last_mut().expect("at least one layer");
            for (b, v) in bias.iter_mut().zip(cfg.coeff_init) {
                *b = c * (v.ln() / c).atanh();
            }
        }
        Ok(Self { cfg, nets })
    }

    fn baseband_net(&self) -> usize {
        self.nets.len() - 1
    }

    /// Forward pass over a batch. In training mode the input normalization
    /// uses batch statistics and updates its running estimates.
    pub fn forward_batch(
        &mut self,
        batch: &[&ScenarioInstance],
        codebook: &Codebook,
        training: bool,
    ) -> Result<BatchForward> {
        let x = gather_inputs(batch)?;
        let (norm_a, analog_norm) = self.nets[0].normalize(&x.analog, training);
        let flat_bb: Vec<RMat> = x.baseband.iter().flatten().cloned().collect();
        let bb_idx = self.baseband_net();
        let (norm_b, baseband_norm) = if flat_bb.is_empty() {
            (Vec::new(), None)
        } else {
            let (v, c) = self.nets[bb_idx].normalize(&flat_bb, training);
            (v, Some(c))
        };
        let mut coeffs = Vec::with_capacity(batch.len());
        let mut k = 0;
        for (i, zn) in norm_a.iter().enumerate() {
            let (z, graph) = self.nets[0].forward_graph(zn, &x.analog_shift[i])?;
            let mut bb = Vec::with_capacity(x.baseband[i].len());
            for s in &x.baseband_shift[i] {
                bb.push(self.nets[bb_idx].forward_graph(&norm_b[k], s)?);
                k += 1;
            }
            coeffs.push((z, graph, bb));
        }
        let cfg = &self.cfg;
        let solves: Vec<Result<InstanceSolve>> = coeffs
            .par_iter()
            .zip(batch.par_iter())
            .map(|((z, _, bb), inst)| {
                let z_bb: Vec<RMat> = bb.iter().map(|(z, _)| z.clone()).collect();
                solve_with_coefficients(cfg, inst, codebook, z, &z_bb)
            })
            .collect();
        let items = coeffs
            .into_iter()
            .zip(solves)
            .map(|((z, graph, bb), solve)| Ok(InstanceForward { z, graph, bb, solve: solve? }))
            .collect::<Result<_>>()?;
        Ok(BatchForward { items, analog_norm, baseband_norm })
    }

    /// Evaluation-mode forward pass of a batch.
    pub fn predict_batch(&self, batch: &[&ScenarioInstance], codebook: &Codebook) -> Result<Vec<InstanceSolve>> {
        let mut m = self.clone();
        Ok(m.forward_batch(batch, codebook, false)?.items.into_iter().map(|f| f.solve).collect())
    }

    pub fn predict(&self, inst: &ScenarioInstance, codebook: &Codebook) -> Result<InstanceSolve> {
        Ok(self.predict_batch(&[inst], codebook)?.remove(0))
    }

    /// Parameter gradients from output gradients `grads[k][r]` (instance,
    /// realization). Per-instance work runs in parallel; reductions are in
    /// batch order.
    pub fn backward_batch(
        &self,
        batch: &[&ScenarioInstance],
        codebook: &Codebook,
        fwd: &BatchForward,
        grads: &[Vec<OutputGrad>],
    ) -> BatchGradient {
        let cfg = &self.cfg;
        let inst_grads: Vec<InstanceGrad> = fwd
            .items
            .par_iter()
            .zip(batch.par_iter())
            .zip(grads.par_iter())
            .map(|((item, inst), g)| instance_vjp(cfg, inst, codebook, &item.z, &item.z_bb(), &item.solve, g))
            .collect();
        let mut params: Vec<GcnnParams> = self.nets.iter().map(|n| GcnnParams::zeros(&n.cfg)).collect();
        let bb_idx = self.baseband_net();
        let mut dnorm_a = Vec::with_capacity(batch.len());
        let mut dnorm_b = Vec::new();
        let (mut solves, mut singular) = (0, 0);
        for (item, ig) in fwd.items.iter().zip(&inst_grads) {
            let (gp, dn) = self.nets[0].backward_graph(&item.graph, &ig.dz);
            params[0].axpy(1.0, &gp);
            dnorm_a.push(dn);
            for ((_, graph), dz) in item.bb.iter().zip(&ig.dz_bb) {
                let (gp, dn) = self.nets[bb_idx].backward_graph(graph, dz);
                params[bb_idx].axpy(1.0, &gp);
                dnorm_b.push(dn);
            }
            solves += ig.solves;
            singular += ig.singular;
        }
        self.nets[0].backward_norm(&fwd.analog_norm, &dnorm_a, &mut params[0]);
        if let Some(c) = &fwd.baseband_norm {
            self.nets[bb_idx].backward_norm(c, &dnorm_b, &mut params[bb_idx]);
        }
        BatchGradient { params, solves, singular }
    }

    /// All network parameters, network after network.
    pub fn flat_params(&self) -> Vec<f64> {
        self.nets.iter().flat_map(|n| n.params.to_flat()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let mut k = 0;
        for net in self.nets.iter_mut() {
            let len = net.params.len();
            let chunk = flat.get(k..k + len).ok_or_else(|| Error::Format("parameter vector too short".into()))?;
            net.params = GcnnParams::from_flat(&net.cfg, chunk)?;
            k += len;
        }
        if k != flat.len() {
            return Err(Error::Format("parameter vector too long".into()));
        }
        Ok(())
    }

    /// Complete state (parameters and running statistics) as one blob.
    pub fn to_blob(&self) -> Vec<f64> {
        self.nets.iter().flat_map(Gcnn::to_blob).collect()
    }

    pub fn from_blob(cfg: ModelConfig, blob: &[f64]) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        let mut k = 0;
        for net in model.nets.iter_mut() {
            let len = net.blob_len();
            let chunk = blob.get(k..k + len).ok_or_else(|| Error::Format("model blob too short".into()))?;
            *net = Gcnn::from_blob(net.cfg, chunk)?;
            k += len;
        }
        if k != blob.len() {
            return Err(Error::Format("model blob too long".into()));
        }
        Ok(model)
    }
}

/// Flattens per-network gradients in the order of [`Model::flat_params`].
pub fn flatten_gradient(params: &[GcnnParams]) -> Vec<f64> {
    params.iter().flat_map(GcnnParams::to_flat).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{min_eigenvalue, outer};
    use crate::scenario::degrade::complex_normal;
    use crate::scenario::{dft_codebook, instance_rng, sample_scenario, GenConfig, GroupDef};
    use crate::solver::run_greedy;
    use rand::{Rng, SeedableRng};

    fn tiny_config() -> GenConfig {
        GenConfig {
            m_x: 2,
            m_y: 2,
            users: 2,
            rf_chains: 2,
            filter_steps: 4,
            sinr_db: [5.0, 10.0],
            groups: vec![GroupDef { side_info: [10.0, 10.0] }, GroupDef { side_info: [24.0, 24.0] }],
            ..GenConfig::default()
        }
    }

    fn random_cov(rng: &mut ChaCha8Rng, m: usize, rank: usize) -> CMat {
        let mut r = CMat::zeros(m, m);
        for _ in 0..rank {
            let h = complex_normal(m, rng);
            r += outer(&h, &h);
        }
        r
    }

    fn random_z(rng: &mut ChaCha8Rng, n: usize) -> RMat {
        RMat::from_fn(
            n,
            COEFFS,
            |_, c| if c % 2 == 0 { rng.random_range(0.5..2.0) } else { rng.random_range(0.01..0.3) },
        )
    }

    #[test]
    fn features_match_examples() {
        let mut r = CMat::zeros(2, 2);
        r[(0, 0)] = ONE;
        let f = input_features(&[r.clone()], &[1.0], &[1.0], 1.0).unwrap();
        assert!(f.iter().all(|&x| x == 0.0));
        let g = input_features(&[r.clone()], &[2.0], &[1.0], 100.0).unwrap();
        assert!((g[(0, 1)] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g[(0, 0)], 0.0);
        assert!((g[(0, 3)] - 100f64.ln()).abs() < 1e-15);
        assert!(input_features(&[CMat::zeros(2, 2)], &[1.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn shift_examples() {
        let h = CVec::from_vec(vec![ONE, ZERO]);
        let e = CVec::from_vec(vec![ZERO, ONE]);
        let s = correlation_shift(&[outer(&h, &h), outer(&h, &h), outer(&e, &e)]);
        assert!((s[(0, 1)] - 1.0).abs() < 1e-15);
        assert_eq!(s[(0, 2)], 0.0);
        assert_eq!(s[(0, 0)], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let covs: Vec<CMat> = (0..4).map(|_| random_cov(&mut rng, 4, 2)).collect();
        let s = correlation_shift(&covs);
        assert_eq!(s, s.transpose());
    }

    #[test]
    fn coefficient_channel_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let covs: Vec<CMat> = (0..2).map(|_| random_cov(&mut rng, 4, 1)).collect();
        let a = dft_codebook(2, 2).codewords.columns(0, 2).into_owned();
        let plain = VirtualChannels::plug_in(&covs, &a, WeightMode::Baseband);
        let z = RMat::from_fn(2, 4, |_, c| if c % 2 == 0 { 1.0 } else { 0.0 });
        assert_eq!(coefficient_channels(&covs, &a, &z, WeightMode::Baseband), plain);
        let z = RMat::from_fn(2, 4, |_, c| if c % 2 == 0 { 0.0 } else { 1.0 });
        let psi = coefficient_channels(&covs, &a, &z, WeightMode::Baseband);
        let expect = (a.adjoint() * &a).scale(trace_re(&covs[0]) / 4.0);
        assert!((&psi.des[0] - expect).norm() < 1e-12);
        for _ in 0..20 {
            let z = random_z(&mut rng, 2);
            let psi = coefficient_channels(&covs, &a, &z, WeightMode::Rf);
            for m in psi.des.iter().chain(&psi.intf) {
                assert!(min_eigenvalue(m) >= -1e-10 * trace_re(m));
            }
        }
    }

    #[test]
    fn softmin_examples() {
        let w = softmin_weights(&[1.0, 2.0], 5.0).unwrap();
        let e = (-5f64).exp();
        assert!((w[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((w[1] - e / (1.0 + e)).abs() < 1e-15);
        let u = softmin_weights(&[3.0; 4], 5.0).unwrap();
        assert!(u.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let inf = softmin_weights(&[f64::INFINITY, 2.0, 4.0], 5.0).unwrap();
        assert_eq!(inf[0], 0.0);
        assert!((inf.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(softmin_weights(&[f64::INFINITY], 5.0).is_none());
    }

    #[test]
    fn identity_augmentation_reproduces_greedy() {
        let cfg_g = tiny_config();
        let cb = dft_codebook(2, 2);
        let mcfg = ModelConfig::for_variant(Variant::Gcn, 2, 4);
        for k in 0..10 {
            let inst = sample_scenario(&cfg_g, 0, &mut instance_rng(3, k)).unwrap().perfect_csi();
            let z = RMat::from_fn(2, 4, |_, c| if c % 2 == 0 { 1.0 } else { 0.0 });
            let learned = solve_with_coefficients(&mcfg, &inst, &cb, &z, &[]).unwrap();
            let (plain, trace) =
                run_greedy(&inst.true_cov, &inst.sinr_targets, &cb, 2, 4, inst.p_max, &mcfg.solver).unwrap();
            assert_eq!(learned.outputs[0], plain);
            assert_eq!(learned.trace.power_trace(), trace.power_trace());
        }
    }

    fn solved_instance(seed: u64) -> (ScenarioInstance, Codebook, ModelConfig, RMat, InstanceSolve) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = dft_codebook(2, 2);
        let mcfg = ModelConfig { straight_through: false, ..ModelConfig::for_variant(Variant::Gcn, 2, 2) };
        loop {
            let inst = sample_scenario(&tiny_config(), 0, &mut rng).unwrap();
            let z = random_z(&mut rng, 2);
            let solve = solve_with_coefficients(&mcfg, &inst, &cb, &z, &[]).unwrap();
            if solve.outputs[0].feasible {
                return (inst, cb, mcfg, z, solve);
            }
        }
    }

    /// Loss `Σ c_i p_i + Σ d_i SINR_i` of a fixed analog selection as a
    /// function of `z`.
    fn fixed_analog_loss(inst: &ScenarioInstance, analog: &AnalogSelection, z: &RMat, c: &[f64], d: &[f64]) -> f64 {
        let cfg = SolverConfig::default();
        let psi = coefficient_channels(&inst.est_cov, &analog.matrix, z, WeightMode::Baseband);
        let up = uplink_fixed_point(&psi, &inst.sinr_targets, 1e-13, 5000, 1e12).unwrap();
        let sol = finalize(&psi, &inst.sinr_targets, analog.clone(), Some(&up), inst.p_max, cfg.weight_mode);
        let sinr = sol.downlink_sinr(&inst.true_cov);
        sol.p.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() + sinr.iter().zip(d).map(|(a, b)| a * b).sum::<f64>()
    }

    #[test]
    fn final_stage_matches_finite_differences() {
        for seed in 0..6 {
            let (inst, _, mcfg, z, solve) = solved_instance(seed);
            let sol = &solve.outputs[0];
            let c = [0.7, 1.3];
            let d = [0.4, -0.2];
            let (_, mut grad) = downlink_sinr_vjp(&sol.p, &sol.b, &sol.analog.matrix, &inst.true_cov, &d);
            grad.dp += RVec::from_vec(c.to_vec());
            let sg = final_stage_vjp(
                &inst.est_cov,
                &z,
                sol,
                solve.psi(0),
                &inst.sinr_targets,
                inst.p_max,
                mcfg.solver.weight_mode,
                &grad,
            );
            assert_eq!(sg.singular, 0);
            let h = 1e-6;
            for i in 0..2 {
                for k in 0..COEFFS {
                    let mut zp = z.clone();
                    zp[(i, k)] += h;
                    let mut zm = z.clone();
                    zm[(i, k)] -= h;
                    let fd = (fixed_analog_loss(&inst, &sol.analog, &zp, &c, &d)
                        - fixed_analog_loss(&inst, &sol.analog, &zm, &c, &d))
                        / (2.0 * h);
                    let an = sg.dz[(i, k)];
                    assert!((an - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "seed {seed} ({i},{k}): {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn analog_gradient_matches_finite_differences() {
        // perturb the analog matrix of the final stage directly
        let (inst, _, mcfg, z, solve) = solved_instance(11);
        let sol = &solve.outputs[0];
        let d = [0.3, 0.5];
        let (_, mut grad) = downlink_sinr_vjp(&sol.p, &sol.b, &sol.analog.matrix, &inst.true_cov, &d);
        grad.dp += RVec::from_element(2, 1.0);
        let sg = final_stage_vjp(
            &inst.est_cov,
            &z,
            sol,
            solve.psi(0),
            &inst.sinr_targets,
            inst.p_max,
            mcfg.solver.weight_mode,
            &grad,
        );
        let loss = |a: &CMat| {
            let sel = AnalogSelection { indices: sol.analog.indices.clone(), matrix: a.clone() };
            fixed_analog_loss(&inst, &sel, &z, &[1.0, 1.0], &d)
        };
        let h = 1e-6;
        let a0 = &sol.analog.matrix;
        for idx in 0..a0.len() {
            for dir in [ONE, C64::new(0.0, 1.0)] {
                let mut ap = a0.clone();
                ap[idx] += dir * h;
                let mut am = a0.clone();
                am[idx] -= dir * h;
                let fd = (loss(&ap) - loss(&am)) / (2.0 * h);
                let an = (sg.da[idx].conj() * dir).re;
                assert!((an - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "entry {idx}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn backward_is_linear_and_zero_for_zero_upstream() {
        let (inst, cb, mut mcfg, z, solve) = solved_instance(4);
        mcfg.straight_through = true;
        let sol = &solve.outputs[0];
        let zero = OutputGrad::zeros(2, 2, 4);
        let g0 = instance_vjp(&mcfg, &inst, &cb, &z, &[], &solve, std::slice::from_ref(&zero));
        assert!(g0.dz.iter().all(|&x| x == 0.0));
        let (_, g1) = downlink_sinr_vjp(&sol.p, &sol.b, &sol.analog.matrix, &inst.true_cov, &[1.0, 0.0]);
        let g2 = power_vjp(&sol.p, &sol.b, &sol.analog.matrix, WeightMode::Baseband, 1.0);
        let mut g12 = g1.scale(2.0);
        g12.add_assign(&g2.scale(-3.0));
        let r1 = instance_vjp(&mcfg, &inst, &cb, &z, &[], &solve, &[g1]);
        let r2 = instance_vjp(&mcfg, &inst, &cb, &z, &[], &solve, &[g2]);
        let r12 = instance_vjp(&mcfg, &inst, &cb, &z, &[], &solve, &[g12]);
        let combo = r1.dz.scale(2.0) - r2.dz.scale(3.0);
        assert!((r12.dz - &combo).norm() <= 1e-9 * (1.0 + combo.norm()));
    }

    #[test]
    fn selection_gradient_matches_relaxed_oracle() {
        // one greedy step: the straight-through gradient is the exact
        // derivative of Re⟨G, Σ_a w_a(z) ă_a⟩ with q_min frozen
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cb = dft_codebook(2, 2);
        let mcfg = ModelConfig { beta_m: 2.0, ..ModelConfig::for_variant(Variant::Gcn, 2, 1) };
        let mut checked = 0;
        while checked < 4 {
            let inst = sample_scenario(&tiny_config(), 0, &mut rng).unwrap();
            let z = random_z(&mut rng, 2);
            let solve = solve_with_coefficients(&mcfg, &inst, &cb, &z, &[]).unwrap();
            let step = &solve.trace.steps[0];
            // duplicated codewords are rank deficient; everything else must solve
            let other_idx = step.incumbent.indices[1 - step.chain];
            if step.candidates.iter().enumerate().any(|(a, c)| c.is_none() && a != other_idx) {
                continue;
            }
            let g = CMat::from_fn(4, 2, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let sg = selection_vjp(&inst.est_cov, &z, &solve.trace, &cb, &inst.sinr_targets, &mcfg, &g);
            assert_eq!(sg.singular, 0);
            let q_min = finite_min(&step.scores()).unwrap();
            let relaxed = |z: &RMat| {
                let scores: Vec<f64> = (0..cb.len())
                    .map(|a| {
                        if a == other_idx {
                            return f64::INFINITY;
                        }
                        let sel = step.incumbent.substitute(&cb, step.chain, a);
                        let psi = coefficient_channels(&inst.est_cov, &sel.matrix, z, WeightMode::Baseband);
                        uplink_fixed_point(&psi, &inst.sinr_targets, 1e-13, 5000, 1e12).unwrap().total_power()
                    })
                    .collect();
                let w = softmin_with(&scores, mcfg.beta_m, q_min);
                let gr = g.column(step.chain);
                (0..cb.len()).map(|a| w[a] * gr.dotc(&cb.codewords.column(a)).re).sum::<f64>()
            };
            let h = 1e-6;
            for i in 0..2 {
                for k in 0..COEFFS {
                    let mut zp = z.clone();
                    zp[(i, k)] += h;
                    let mut zm = z.clone();
                    zm[(i, k)] -= h;
                    let fd = (relaxed(&zp) - relaxed(&zm)) / (2.0 * h);
                    let an = sg.dz[(i, k)];
                    assert!((an - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "({i},{k}): {an} vs {fd}");
                }
            }
            // gradient w.r.t. the replaced chain stops; other chains pass through
            let other = 1 - step.chain;
            assert_eq!(sg.da.column(step.chain).norm(), 0.0);
            assert!(sg.da.column(other).norm() > 0.0);
            checked += 1;
        }
    }

    #[test]
    fn fdbf_uses_identity_analog_stage() {
        let inst = sample_scenario(&tiny_config(), 0, &mut instance_rng(5, 0)).unwrap();
        let cb = dft_codebook(2, 2);
        let mcfg = ModelConfig::for_variant(Variant::Fdbf, 0, 0);
        let z = RMat::from_element(2, 4, 1.0);
        let solve = solve_with_coefficients(&mcfg, &inst, &cb, &z, &[]).unwrap();
        assert_eq!(solve.analog().matrix, CMat::identity(4, 4));
        assert!(solve.trace.steps.is_empty());
    }

    #[test]
    fn sampled_mode_solves_every_realization() {
        use crate::scenario::CsiMode;
        let cfg = GenConfig { csi_mode: CsiMode::StatisticalInstantaneous { samples: 3 }, ..tiny_config() };
        let inst = sample_scenario(&cfg, 0, &mut instance_rng(6, 0)).unwrap();
        let cb = dft_codebook(2, 2);
        let mut model = Model::new(ModelConfig::for_variant(Variant::TwoGcn, 2, 2), 1).unwrap();
        assert_eq!(model.nets.len(), 2);
        let fwd = model.forward_batch(&[&inst], &cb, false).unwrap();
        assert_eq!(fwd.items[0].solve.outputs.len(), 3);
        assert_eq!(fwd.items[0].bb.len(), 3);
        let grads: Vec<OutputGrad> = fwd.items[0]
            .solve
            .outputs
            .iter()
            .map(|s| power_vjp(&s.p, &s.b, &s.analog.matrix, WeightMode::Baseband, 1.0))
            .collect();
        let g = model.backward_batch(&[&inst], &cb, &fwd, &[grads]);
        assert_eq!(g.params.len(), 2);
    }

    #[test]
    fn blob_round_trip() {
        let model = Model::new(ModelConfig::for_variant(Variant::TwoGcn, 2, 2), 3).unwrap();
        let back = Model::from_blob(model.cfg.clone(), &model.to_blob()).unwrap();
        assert_eq!(back, model);
        let mut m2 = model.clone();
        m2.set_flat_params(&model.flat_params()).unwrap();
        assert_eq!(m2, model);
        assert!("mlp".parse::<Variant>().is_err());
        assert_eq!("two_gcn".parse::<Variant>().unwrap(), Variant::TwoGcn);
    }

    #[test]
    fn coefficient_initialization() {
        let cfg = ModelConfig { coeff_init: [1.0, 0.05, 2.0, 0.5], ..ModelConfig::for_variant(Variant::Gcn, 2, 2) };
        let mut model = Model::new(cfg.clone(), 1).unwrap();
        for layer in model.nets[0].params.weights.last_mut().unwrap() {
            layer.fill(0.0);
        }
        let z = model.nets[0].forward(&RMat::zeros(3, FEATURES), &RMat::zeros(3, 3)).unwrap();
        for i in 0..3 {
            for (c, v) in cfg.coeff_init.iter().enumerate() {
                assert!((z[(i, c)] - v).abs() < 1e-12);
            }
        }
        let bad = ModelConfig { coeff_init: [1.0, 0.0, 1.0, 1.0], ..cfg };
        assert!(bad.validate().is_err());
    }
}
