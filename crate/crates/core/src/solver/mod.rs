//! QoS power minimization through the virtual uplink.
//!
//! For fixed analog beams `A` the digital problem is solved in its uplink
//! form: beamformers are principal generalized eigenvectors of the
//! (desired, interference-plus-weight) pencils, uplink powers make every
//! uplink SINR constraint active, and the downlink powers follow from the
//! coupling matrix. [`greedy`] wraps this in the codeword-substitution
//! search over RF chains.

pub mod greedy;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::{congruence, principal_generalized_eigvec, quad_form, CMat, CVec, RMat, RVec};

pub use greedy::{greedy_select, init_analog, run_greedy, AnalogSelection, GreedyStep, GreedyTrace};

/// Which quadratic form weights the transmit power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `Ψ_0 = I`: baseband power.
    #[default]
    Baseband,
    /// `Ψ_0 = A^H A`: radiated power.
    Rf,
}

/// Per-user quadratic forms after analog projection.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualChannels {
    /// Desired-signal form of user `i`.
    pub des: Vec<CMat>,
    /// Interference form of channel owner `i` (the same for every interferer).
    pub intf: Vec<CMat>,
    /// Power-weight form.
    pub weight: Vec<CMat>,
}

impl VirtualChannels {
    /// Plain plug-in channels `des = intf = A^H R̂ A`.
    pub fn plug_in(est_cov: &[CMat], analog: &CMat, mode: WeightMode) -> Self {
        let des: Vec<CMat> = est_cov.iter().map(|r| congruence(analog, r)).collect();
        let w = weight_matrix(analog, mode);
        Self { intf: des.clone(), weight: vec![w; est_cov.len()], des }
    }

    pub fn users(&self) -> usize {
        self.des.len()
    }

    pub fn dim(&self) -> usize {
        self.des.first().map_or(0, |m| m.nrows())
    }

    /// Every weight matrix multiplied by `c`.
    pub fn with_scaled_weight(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.weight.iter_mut().for_each(|w| *w = w.scale(c));
        out
    }
}

pub fn weight_matrix(analog: &CMat, mode: WeightMode) -> CMat {
    match mode {
        WeightMode::Baseband => CMat::identity(analog.ncols(), analog.ncols()),
        WeightMode::Rf => analog.adjoint() * analog,
    }
}

/// Numerical settings of the uplink fixed point and greedy search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Relative change of `q` that stops the fixed point.
    pub tol: f64,
    pub max_iter: usize,
    /// Infeasibility is declared once `1^T q` exceeds this multiple of `P_max`.
    pub power_cap_factor: f64,
    /// Analog matrices with singular-value ratio below this are rejected.
    pub rank_tol: f64,
    pub weight_mode: WeightMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 2000, power_cap_factor: 1e6, rank_tol: 1e-9, weight_mode: WeightMode::Baseband }
    }
}

/// Converged virtual uplink point: unit-norm beamformers (columns) and powers.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkSolution {
    pub q: RVec,
    pub b: CMat,
    pub iterations: usize,
}

impl UplinkSolution {
    pub fn total_power(&self) -> f64 {
        self.q.sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UplinkFailure {
    /// `1^T q` exceeded the power cap.
    PowerCap,
    /// No convergence within the iteration budget.
    MaxIter,
    /// Singular pencil or nonpositive desired gain.
    Singular,
}

/// Receive beamformers maximizing each user's uplink SINR for powers `q`,
/// together with the generalized eigenvalues.
fn best_beams(psi: &VirtualChannels, q: &RVec) -> Option<(CMat, RVec)> {
    let n = psi.users();
    let m = psi.dim();
    let mut b = CMat::zeros(m, n);
    let mut mu = RVec::zeros(n);
    for i in 0..n {
        let mut noise = psi.weight[i].clone();
        for j in 0..n {
            if j != i && q[j] != 0.0 {
                noise += psi.intf[j].scale(q[j]);
            }
        }
        let (val, vec) = principal_generalized_eigvec(&psi.des[i], &noise)?;
        if !(val > 0.0) {
            return None;
        }
        b.set_column(i, &vec);
        mu[i] = val;
    }
    Some((b, mu))
}

/// Uplink powers making every uplink SINR exactly equal to its target for
/// fixed beams, `C^T q = w`. `None` unless the solution is strictly positive.
fn active_uplink_powers(psi: &VirtualChannels, gamma: &[f64], b: &CMat) -> Option<RVec> {
    let c = coupling_matrix(b, psi, gamma);
    let w = RVec::from_fn(psi.users(), |i, _| quad_form(&psi.weight[i], &b.column(i).into_owned()));
    let q = c.transpose().lu().solve(&w)?;
    q.iter().all(|x| x.is_finite() && *x > 0.0).then_some(q)
}

/// Solves the virtual uplink problem by alternating beam and power updates.
///
/// Starting from `q = 0`, powers follow the monotone update
/// `q_i ← γ_i / μ_i(q)` until the current beams admit a positive solution of
/// the active-constraint system; from then on the powers are set to that
/// solution, which decreases monotonically to the optimum. The returned
/// beams are optimal for the returned powers and all uplink constraints hold
/// with equality.
pub fn uplink_fixed_point(
    psi: &VirtualChannels,
    gamma: &[f64],
    tol: f64,
    max_iter: usize,
    power_cap: f64,
) -> Result<UplinkSolution, UplinkFailure> {
    let n = psi.users();
    assert_eq!(gamma.len(), n, "one SINR target per user");
    let mut q = RVec::zeros(n);
    for it in 1..=max_iter {
        let (b, mu) = best_beams(psi, &q).ok_or(UplinkFailure::Singular)?;
        let q_new = match active_uplink_powers(psi, gamma, &b) {
            Some(qa) => qa,
            None => RVec::from_fn(n, |i, _| gamma[i] / mu[i]),
        };
        if !q_new.iter().all(|x| x.is_finite()) || q_new.sum() > power_cap {
            return Err(UplinkFailure::PowerCap);
        }
        let change =
            q_new.iter().zip(q.iter()).map(|(a, b)| (a - b).abs() / a.abs().max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
        q = q_new;
        if change < tol {
            let (b, _) = best_beams(psi, &q).ok_or(UplinkFailure::Singular)?;
            let q = active_uplink_powers(psi, gamma, &b).unwrap_or(q);
            return Ok(UplinkSolution { q, b, iterations: it });
        }
    }
    Err(UplinkFailure::MaxIter)
}

/// Achieved uplink SINRs of a beam/power pair.
pub fn uplink_sinr(psi: &VirtualChannels, b: &CMat, q: &RVec) -> Vec<f64> {
    let n = psi.users();
    (0..n)
        .map(|i| {
            let bi = b.column(i).into_owned();
            let mut den = quad_form(&psi.weight[i], &bi);
            for j in (0..n).filter(|&j| j != i) {
                den += q[j] * quad_form(&psi.intf[j], &bi);
            }
            q[i] * quad_form(&psi.des[i], &bi) / den
        })
        .collect()
}

/// `w_i = b_i^H Ψ_0 b_i`.
pub fn power_weights(analog: &CMat, b: &CMat, mode: WeightMode) -> Vec<f64> {
    match mode {
        WeightMode::Baseband => b.column_iter().map(|c| c.norm_squared()).collect(),
        WeightMode::Rf => {
            let g = analog.adjoint() * analog;
            b.column_iter().map(|c| quad_form(&g, &c.into_owned())).collect()
        }
    }
}

/// Coupling matrix: diagonal `γ_i^{-1} b_i^H Ψ_des,i b_i`, off-diagonal
/// `(i, j)` entry `−b_j^H Ψ_intf,i b_j`.
pub fn coupling_matrix(b: &CMat, psi: &VirtualChannels, gamma: &[f64]) -> RMat {
    let n = psi.users();
    let cols: Vec<CVec> = (0..n).map(|j| b.column(j).into_owned()).collect();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            quad_form(&psi.des[i], &cols[i]) / gamma[i]
        } else {
            -quad_form(&psi.intf[i], &cols[j])
        }
    })
}

/// Downlink powers from `C p = 1`; `None` if `C` is singular.
pub fn recover_downlink_power(b: &CMat, psi: &VirtualChannels, gamma: &[f64]) -> Option<RVec> {
    let c = coupling_matrix(b, psi, gamma);
    let p = c.lu().solve(&RVec::from_element(psi.users(), 1.0))?;
    p.iter().all(|x| x.is_finite()).then_some(p)
}

/// `p ← [p]₊ · P_max / (P_max + [w^T[p]₊ − P_max]₊)`.
pub fn project_power(p: &RVec, w: &[f64], p_max: f64) -> RVec {
    let pos = p.map(|x| x.max(0.0));
    let total: f64 = pos.iter().zip(w).map(|(a, b)| a * b).sum();
    let excess = (total - p_max).max(0.0);
    pos.scale(p_max / (p_max + excess))
}

/// Downlink SINRs `p_i b_i^H A^H R_i A b_i / (Σ_{j≠i} p_j b_j^H A^H R_i A b_j + 1)`.
pub fn evaluate_downlink_sinr(p: &RVec, b: &CMat, analog: &CMat, covs: &[CMat]) -> Vec<f64> {
    let n = covs.len();
    let x = analog * b;
    let cols: Vec<CVec> = (0..n).map(|j| x.column(j).into_owned()).collect();
    (0..n)
        .map(|i| {
            let gains: Vec<f64> = cols.iter().map(|c| quad_form(&covs[i], c)).collect();
            let intf: f64 = (0..n).filter(|&j| j != i).map(|j| p[j] * gains[j]).sum();
            p[i] * gains[i] / (intf + 1.0)
        })
        .collect()
}

/// Downlink SINRs for an instantaneous channel `h` per user.
pub fn evaluate_downlink_sinr_channels(p: &RVec, b: &CMat, analog: &CMat, h: &[&CVec]) -> Vec<f64> {
    let n = h.len();
    let x = analog * b;
    (0..n)
        .map(|i| {
            let gain = |j: usize| h[i].dotc(&x.column(j)).norm_sqr();
            let intf: f64 = (0..n).filter(|&j| j != i).map(|j| p[j] * gain(j)).sum();
            p[i] * gain(i) / (intf + 1.0)
        })
        .collect()
}

/// Full beamforming output of the greedy pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformingSolution {
    /// Projected downlink powers.
    pub p: RVec,
    /// Downlink powers before projection.
    pub p_raw: RVec,
    pub q: RVec,
    /// Unit-norm baseband beamformers (columns).
    pub b: CMat,
    pub analog: AnalogSelection,
    pub feasible: bool,
}

impl BeamformingSolution {
    /// `w^T p` with the projected powers.
    pub fn total_power(&self, mode: WeightMode) -> f64 {
        let w = power_weights(&self.analog.matrix, &self.b, mode);
        self.p.iter().zip(&w).map(|(a, b)| a * b).sum()
    }

    pub fn downlink_sinr(&self, covs: &[CMat]) -> Vec<f64> {
        evaluate_downlink_sinr(&self.p, &self.b, &self.analog.matrix, covs)
    }
}

/// Turns an uplink optimum into downlink powers and projects them.
///
/// An infeasible or missing uplink point yields max-SNR beams with the power
/// budget split evenly, flagged infeasible.
pub fn finalize(
    psi: &VirtualChannels,
    gamma: &[f64],
    analog: AnalogSelection,
    uplink: Option<&UplinkSolution>,
    p_max: f64,
    mode: WeightMode,
) -> BeamformingSolution {
    let n = psi.users();
    if let Some(sol) = uplink {
        if let Some(p_raw) = recover_downlink_power(&sol.b, psi, gamma) {
            if p_raw.iter().all(|&x| x >= -1e-10) {
                let w = power_weights(&analog.matrix, &sol.b, mode);
                let p = project_power(&p_raw, &w, p_max);
                return BeamformingSolution { p, p_raw, q: sol.q.clone(), b: sol.b.clone(), analog, feasible: true };
            }
        }
    }
    let m = psi.dim();
    let b = best_beams(psi, &RVec::zeros(n)).map(|(b, _)| b).unwrap_or_else(|| {
        let mut b = CMat::zeros(m, n);
        for i in 0..n {
            b[(i % m, i)] = crate::linalg::ONE;
        }
        b
    });
    let w = power_weights(&analog.matrix, &b, mode);
    let p_raw = RVec::from_element(n, p_max * 1e6);
    let p = project_power(&p_raw, &w, p_max);
    BeamformingSolution { p, p_raw, q: RVec::from_element(n, f64::INFINITY), b, analog, feasible: false }
}
