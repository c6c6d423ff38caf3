//! System realizations: correlated channels, CSI degradation, codebooks
//! and datasets.

pub mod codebook;
pub mod config;
pub mod correlation;
pub mod dataset;
pub mod degrade;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::linalg::{outer, CMat, CVec};

pub use codebook::{dft_codebook, Codebook};
pub use config::{db_to_linear, linear_to_db, CsiMode, Degradation, GenConfig, GroupDef};
pub use correlation::build_upa_covariance;
pub use degrade::{dft_quantize, estimate_covariance, mmse_degrade};

/// Per-sample channels of the statistical+instantaneous mode, indexed
/// `[user][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledChannels {
    pub true_h: Vec<Vec<CVec>>,
    pub est_h: Vec<Vec<CVec>>,
}

impl SampledChannels {
    pub fn num_samples(&self) -> usize {
        self.true_h.first().map_or(0, Vec::len)
    }
}

/// One system realization.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioInstance {
    /// `R_i`; rank-1 `h_i h_i^H` in instantaneous mode.
    pub true_cov: Vec<CMat>,
    /// `R̂_i` available to the transmitter.
    pub est_cov: Vec<CMat>,
    pub samples: Option<SampledChannels>,
    /// Linear SINR targets `γ_i`.
    pub sinr_targets: Vec<f64>,
    /// Side information `ξ_i` (linear pilot power or feedback-vector count).
    pub side_info: Vec<f64>,
    pub p_max: f64,
    pub group_id: usize,
}

impl ScenarioInstance {
    pub fn users(&self) -> usize {
        self.true_cov.len()
    }

    pub fn antennas(&self) -> usize {
        self.true_cov.first().map_or(0, |r| r.nrows())
    }

    /// Same instance with every target multiplied by `factor`.
    pub fn with_scaled_targets(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.sinr_targets.iter_mut().for_each(|g| *g *= factor);
        out
    }

    /// Number of channel realizations the baseband stage is solved for:
    /// one in instantaneous mode, one per sample otherwise.
    pub fn realizations(&self) -> usize {
        self.samples.as_ref().map_or(1, SampledChannels::num_samples)
    }

    /// True covariances realization `r` is evaluated against.
    pub fn eval_covs(&self, r: usize) -> Vec<CMat> {
        match &self.samples {
            None => self.true_cov.clone(),
            Some(s) => s.true_h.iter().map(|h| outer(&h[r], &h[r])).collect(),
        }
    }

    /// Estimated covariances driving the baseband stage of realization `r`.
    pub fn realization_est_covs(&self, r: usize) -> Vec<CMat> {
        match &self.samples {
            None => self.est_cov.clone(),
            Some(s) => s.est_h.iter().map(|h| outer(&h[r], &h[r])).collect(),
        }
    }

    /// Exact-CSI view: estimated covariances replaced by the true ones.
    pub fn perfect_csi(&self) -> Self {
        let mut out = self.clone();
        out.est_cov = self.true_cov.clone();
        if let Some(s) = out.samples.as_mut() {
            s.est_h = s.true_h.clone();
        }
        out
    }
}

/// Random stream of the `index`-th instance of a dataset seeded with `seed`.
pub fn instance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw_side_info<R: Rng + ?Sized>(cfg: &GenConfig, group: usize, rng: &mut R) -> f64 {
    let [lo, hi] = cfg.groups[group].side_info;
    match cfg.degradation {
        Degradation::Mmse => db_to_linear(lo + (hi - lo) * rng.random::<f64>()),
        Degradation::DftFeedback => rng.random_range(lo.round() as i64..=hi.round() as i64) as f64,
        Degradation::None => 1.0,
    }
}

fn degrade<R: Rng + ?Sized>(cfg: &GenConfig, r: &CMat, h: &CVec, side_info: f64, rng: &mut R) -> CVec {
    match cfg.degradation {
        Degradation::Mmse => mmse_degrade(r, h, side_info, rng),
        Degradation::DftFeedback => dft_quantize(h, side_info as usize, cfg.m_x, cfg.m_y),
        Degradation::None => h.clone(),
    }
}

/// Draw one realization for constraint group `group`.
///
/// Angles are uniform in the configured box, targets log-uniform over the
/// dB range, side information per group definition.
pub fn sample_scenario<R: Rng + ?Sized>(cfg: &GenConfig, group: usize, rng: &mut R) -> Result<ScenarioInstance> {
    cfg.validate()?;
    let users = cfg.users;
    let uniform = |rng: &mut R, r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.random::<f64>();
    let mut true_cov = Vec::with_capacity(users);
    let mut est_cov = Vec::with_capacity(users);
    let mut sinr_targets = Vec::with_capacity(users);
    let mut side_info = Vec::with_capacity(users);
    let mut sampled_true = Vec::new();
    let mut sampled_est = Vec::new();
    for _ in 0..users {
        let az = uniform(rng, cfg.azimuth_deg);
        let el = uniform(rng, cfg.elevation_deg);
        let r = build_upa_covariance(az, el, cfg.spread_deg, cfg.m_x, cfg.m_y)?;
        let gamma = db_to_linear(uniform(rng, cfg.sinr_db));
        let xi = draw_side_info(cfg, group, rng);
        let factor = degrade::covariance_factor(&r);
        match cfg.csi_mode {
            CsiMode::Instantaneous => {
                let h = degrade::sample_channel(&factor, rng);
                let h_est = degrade(cfg, &r, &h, xi, rng);
                true_cov.push(outer(&h, &h));
                est_cov.push(outer(&h_est, &h_est));
            }
            CsiMode::StatisticalInstantaneous { samples } => {
                let mut hs = Vec::with_capacity(samples);
                let mut es = Vec::with_capacity(samples);
                for _ in 0..samples {
                    let h = degrade::sample_channel(&factor, rng);
                    es.push(degrade(cfg, &r, &h, xi, rng));
                    hs.push(h);
                }
                est_cov.push(estimate_covariance(&es));
                true_cov.push(r);
                sampled_true.push(hs);
                sampled_est.push(es);
            }
        }
        sinr_targets.push(gamma);
        side_info.push(xi);
    }
    let samples = match cfg.csi_mode {
        CsiMode::Instantaneous => None,
        CsiMode::StatisticalInstantaneous { .. } => Some(SampledChannels { true_h: sampled_true, est_h: sampled_est }),
    };
    Ok(ScenarioInstance { true_cov, est_cov, samples, sinr_targets, side_info, p_max: cfg.p_max(), group_id: group })
}
