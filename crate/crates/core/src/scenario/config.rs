use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// How the CSI available at the transmitter is degraded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degradation {
    /// Noisy MMSE channel estimate; side information is the pilot power.
    Mmse,
    /// 2D-DFT feedback quantization; side information is the number of
    /// feedback vectors.
    DftFeedback,
    /// Exact CSI (side information fixed to 1).
    None,
}

/// Which channel description drives the SINR model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CsiMode {
    /// One channel draw per instance; `R_i = h_i h_i^H`.
    Instantaneous,
    /// Statistical covariance for the analog stage plus `samples` channel
    /// draws per instance for the baseband stage and outage evaluation.
    StatisticalInstantaneous { samples: usize },
}

/// One constraint group: the range side information is drawn from.
///
/// For [`Degradation::Mmse`] the range is a pilot power in dB (drawn
/// uniformly in dB); for [`Degradation::DftFeedback`] it is an inclusive
/// integer range of feedback-vector counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDef {
    pub side_info: [f64; 2],
}

/// Scenario generator configuration. All power-like quantities are in dB
/// and converted to linear scale at ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub m_x: usize,
    pub m_y: usize,
    pub users: usize,
    pub azimuth_deg: [f64; 2],
    pub elevation_deg: [f64; 2],
    pub spread_deg: f64,
    pub sinr_db: [f64; 2],
    pub p_max_db: f64,
    pub csi_mode: CsiMode,
    pub degradation: Degradation,
    pub groups: Vec<GroupDef>,
    pub count: usize,
    /// RF chains of the perfect-CSI greedy used by the feasibility filter.
    pub rf_chains: usize,
    /// Greedy steps of the feasibility filter.
    pub filter_steps: usize,
}

impl Default for GenConfig {
    /// 4x4 array, 3 users, mixed pilot power group.
    fn default() -> Self {
        Self {
            m_x: 4,
            m_y: 4,
            users: 3,
            azimuth_deg: [-60.0, 60.0],
            elevation_deg: [-60.0, 30.0],
            spread_deg: 10.0,
            sinr_db: [5.0, 15.0],
            p_max_db: 20.0,
            csi_mode: CsiMode::Instantaneous,
            degradation: Degradation::Mmse,
            groups: vec![GroupDef { side_info: [10.0, 24.0] }],
            count: 100,
            rf_chains: 5,
            filter_steps: 10,
        }
    }
}

impl GenConfig {
    pub fn antennas(&self) -> usize {
        self.m_x * self.m_y
    }

    pub fn p_max(&self) -> f64 {
        db_to_linear(self.p_max_db)
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Group assignment for the `index`-th generated instance (round robin).
    pub fn group_of(&self, index: u64) -> usize {
        (index % self.groups.len() as u64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(config_err("number of users must be at least 1"));
        }
        if self.m_x == 0 || self.m_y == 0 {
            return Err(config_err("array dimensions must be at least 1"));
        }
        if self.rf_chains == 0 || self.rf_chains > self.antennas() {
            return Err(config_err("rf_chains must lie in [1, M]"));
        }
        if self.groups.is_empty() {
            return Err(config_err("at least one constraint group is required"));
        }
        let in_range = |r: [f64; 2], lo: f64, hi: f64| r[0] <= r[1] && r[0] >= lo && r[1] <= hi;
        if !in_range(self.azimuth_deg, -90.0, 90.0) || !in_range(self.elevation_deg, -90.0, 90.0) {
            return Err(config_err("angle ranges must be ordered and within [-90, 90] degrees"));
        }
        if !(self.spread_deg >= 0.0) {
            return Err(config_err("angular spread must be nonnegative"));
        }
        if !(self.sinr_db[0] <= self.sinr_db[1]) || !self.sinr_db.iter().all(|x| x.is_finite()) {
            return Err(config_err("SINR range in dB must be finite and ordered"));
        }
        if !self.p_max_db.is_finite() {
            return Err(config_err("p_max_db must be finite"));
        }
        if let CsiMode::StatisticalInstantaneous { samples } = self.csi_mode {
            if samples == 0 {
                return Err(config_err("statistical+instantaneous mode needs at least one sample"));
            }
        }
        for g in &self.groups {
            if !(g.side_info[0] <= g.side_info[1]) {
                return Err(config_err("group side-information range must be ordered"));
            }
            if self.degradation == Degradation::DftFeedback {
                let m = self.antennas() as f64;
                if g.side_info[0] < 1.0 || g.side_info[1] > m {
                    return Err(config_err("feedback-vector count must lie in [1, M]"));
                }
            }
        }
        Ok(())
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}
