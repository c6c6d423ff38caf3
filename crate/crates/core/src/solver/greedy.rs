use crate::error::{config_err, Result};
use crate::linalg::{quad_form, singular_value_ratio, trace_re, CMat};
use crate::scenario::Codebook;

use super::{finalize, uplink_fixed_point, BeamformingSolution, SolverConfig, UplinkSolution, VirtualChannels};

/// Codeword indices per RF chain and the resulting analog matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalogSelection {
    pub indices: Vec<usize>,
    pub matrix: CMat,
}

impl AnalogSelection {
    pub fn from_indices(codebook: &Codebook, indices: Vec<usize>) -> Self {
        let cols: Vec<_> = indices.iter().map(|&k| codebook.codewords.column(k)).collect();
        let matrix = CMat::from_columns(&cols);
        Self { indices, matrix }
    }

    /// Copy with chain `chain` switched to codeword `codeword`.
    pub fn substitute(&self, codebook: &Codebook, chain: usize, codeword: usize) -> Self {
        let mut indices = self.indices.clone();
        indices[chain] = codeword;
        let mut matrix = self.matrix.clone();
        matrix.set_column(chain, &codebook.codewords.column(codeword));
        Self { indices, matrix }
    }

    pub fn rf_chains(&self) -> usize {
        self.indices.len()
    }
}

/// The `m_rf` codewords with the largest normalized gain
/// `Σ_i ă^H R̂_i ă / tr R̂_i`, ties resolved toward lower indices.
pub fn init_analog(est_cov: &[CMat], codebook: &Codebook, m_rf: usize) -> Result<AnalogSelection> {
    if m_rf == 0 || m_rf > codebook.len() {
        return Err(config_err(format!(
            "cannot select {m_rf} RF chains from a codebook of {} codewords",
            codebook.len()
        )));
    }
    let scores: Vec<f64> = codebook
        .codewords
        .column_iter()
        .map(|a| {
            let a = a.into_owned();
            est_cov.iter().map(|r| quad_form(r, &a) / trace_re(r)).sum()
        })
        .collect();
    let mut taken = vec![false; scores.len()];
    let mut indices = Vec::with_capacity(m_rf);
    for _ in 0..m_rf {
        let mut best: Option<usize> = None;
        for (k, &s) in scores.iter().enumerate() {
            if taken[k] {
                continue;
            }
            // relative slack so that round-off does not break exact ties
            match best {
                Some(b) if s <= scores[b] + 1e-12 * scores[b].abs() => {}
                _ => best = Some(k),
            }
        }
        let k = best.expect("m_rf <= codebook size");
        taken[k] = true;
        indices.push(k);
    }
    Ok(AnalogSelection::from_indices(codebook, indices))
}

/// One RF-chain update of the greedy search.
#[derive(Debug, Clone)]
pub struct GreedyStep {
    pub chain: usize,
    /// Analog selection before the step.
    pub incumbent: AnalogSelection,
    /// Uplink optimum for every codeword substituted into `chain`; `None`
    /// for rank-deficient or infeasible trials.
    pub candidates: Vec<Option<UplinkSolution>>,
    /// Codeword occupying `chain` after the step.
    pub winner: usize,
    pub switched: bool,
    /// `1^T q` of the incumbent after the step (`∞` while infeasible).
    pub power: f64,
}

impl GreedyStep {
    /// Trial scores `1^T q`, `∞` where infeasible.
    pub fn scores(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.as_ref().map_or(f64::INFINITY, UplinkSolution::total_power)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GreedyTrace {
    pub init: AnalogSelection,
    pub init_power: f64,
    pub steps: Vec<GreedyStep>,
    /// Virtual channels of the final analog selection.
    pub final_psi: VirtualChannels,
    pub final_uplink: Option<UplinkSolution>,
}

impl GreedyTrace {
    /// `1^T q` after initialization and after every step.
    pub fn power_trace(&self) -> Vec<f64> {
        std::iter::once(self.init_power).chain(self.steps.iter().map(|s| s.power)).collect()
    }
}

fn solve_for(
    build: &impl Fn(&CMat) -> VirtualChannels,
    analog: &AnalogSelection,
    gamma: &[f64],
    power_cap: f64,
    cfg: &SolverConfig,
) -> Option<UplinkSolution> {
    if singular_value_ratio(&analog.matrix) < cfg.rank_tol {
        return None;
    }
    let psi = build(&analog.matrix);
    uplink_fixed_point(&psi, gamma, cfg.tol, cfg.max_iter, power_cap).ok()
}

fn score(sol: &Option<UplinkSolution>) -> f64 {
    sol.as_ref().map_or(f64::INFINITY, UplinkSolution::total_power)
}

/// Greedy codeword substitution over RF chains.
///
/// Step `ℓ = 1..=l_rf` revisits chain `(ℓ−1) mod M_rf`, solves the uplink
/// problem for every codeword in that slot, and keeps the trial with the
/// smallest `1^T q` if it strictly improves on the incumbent (lowest index
/// on ties). `build` maps an analog matrix to its virtual channels.
pub fn greedy_select<F>(
    build: F,
    gamma: &[f64],
    codebook: &Codebook,
    init: AnalogSelection,
    l_rf: usize,
    p_max: f64,
    cfg: &SolverConfig,
) -> (BeamformingSolution, GreedyTrace)
where
    F: Fn(&CMat) -> VirtualChannels,
{
    let power_cap = cfg.power_cap_factor * p_max;
    let m_rf = init.rf_chains();
    let init_solution = solve_for(&build, &init, gamma, power_cap, cfg);
    let init_power = score(&init_solution);
    let mut current = init.clone();
    let mut current_solution = init_solution;
    let mut steps = Vec::with_capacity(l_rf);
    for l in 0..l_rf {
        let chain = l % m_rf;
        let held = current.indices[chain];
        let candidates: Vec<Option<UplinkSolution>> = (0..codebook.len())
            .map(|a| {
                if a == held {
                    current_solution.clone()
                } else {
                    let trial = current.substitute(codebook, chain, a);
                    solve_for(&build, &trial, gamma, power_cap, cfg)
                }
            })
            .collect();
        let mut best = held;
        let mut best_score = score(&current_solution);
        for (a, c) in candidates.iter().enumerate() {
            if score(c) < best_score {
                best = a;
                best_score = score(c);
            }
        }
        let incumbent = current.clone();
        let switched = best != held;
        if switched {
            current = current.substitute(codebook, chain, best);
            current_solution = candidates[best].clone();
        }
        steps.push(GreedyStep {
            chain,
            incumbent,
            candidates,
            winner: best,
            switched,
            power: score(&current_solution),
        });
    }
    let final_psi = build(&current.matrix);
    let solution = finalize(&final_psi, gamma, current, current_solution.as_ref(), p_max, cfg.weight_mode);
    let trace = GreedyTrace { init, init_power, steps, final_psi, final_uplink: current_solution };
    (solution, trace)
}

/// Plain greedy pipeline on the covariances `covs`: codebook
/// initialization followed by [`greedy_select`] with plug-in virtual
/// channels.
pub fn run_greedy(
    covs: &[CMat],
    gamma: &[f64],
    codebook: &Codebook,
    m_rf: usize,
    l_rf: usize,
    p_max: f64,
    cfg: &SolverConfig,
) -> Result<(BeamformingSolution, GreedyTrace)> {
    let init = init_analog(covs, codebook, m_rf)?;
    let build = |a: &CMat| VirtualChannels::plug_in(covs, a, cfg.weight_mode);
    Ok(greedy_select(build, gamma, codebook, init, l_rf, p_max, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{outer, CVec, C64};
    use crate::scenario::dft_codebook;
    use crate::solver::WeightMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_codebook(m: usize) -> Codebook {
        Codebook { codewords: CMat::identity(m, m), m_x: m, m_y: 1, oversampling: 1 }
    }

    #[test]
    fn init_picks_strongest_codeword() {
        let r = CMat::from_diagonal(&CVec::from_vec(vec![C64::new(3.0, 0.0), C64::new(1.0, 0.0)]));
        let sel = init_analog(&[r], &unit_codebook(2), 1).unwrap();
        assert_eq!(sel.indices, vec![0]);
    }

    #[test]
    fn isotropic_users_take_lowest_indices() {
        let cb = dft_codebook(4, 4);
        let r = vec![CMat::identity(16, 16); 3];
        let sel = init_analog(&r, &cb, 5).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn init_is_user_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cb = dft_codebook(2, 2);
        let covs: Vec<CMat> = (0..3)
            .map(|_| {
                let h = crate::scenario::degrade::complex_normal(4, &mut rng);
                outer(&h, &h)
            })
            .collect();
        let a = init_analog(&covs, &cb, 2).unwrap();
        let rev: Vec<CMat> = covs.iter().rev().cloned().collect();
        assert_eq!(a.indices, init_analog(&rev, &cb, 2).unwrap().indices);
    }

    #[test]
    fn too_many_chains_rejected() {
        assert!(init_analog(&[CMat::identity(2, 2)], &unit_codebook(2), 3).is_err());
    }

    fn random_instance(rng: &mut ChaCha8Rng, users: usize, m: usize) -> (Vec<CMat>, Vec<f64>) {
        let covs = (0..users)
            .map(|_| {
                let h = crate::scenario::degrade::complex_normal(m, rng);
                outer(&h, &h).scale(10.0)
            })
            .collect();
        let gamma = (0..users).map(|_| rng.random_range(1.0..4.0)).collect();
        (covs, gamma)
    }

    #[test]
    fn zero_steps_returns_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cb = dft_codebook(2, 2);
        let (covs, gamma) = random_instance(&mut rng, 2, 4);
        let init = init_analog(&covs, &cb, 2).unwrap();
        let cfg = SolverConfig::default();
        let build = |a: &CMat| VirtualChannels::plug_in(&covs, a, WeightMode::Baseband);
        let (sol, trace) = greedy_select(build, &gamma, &cb, init.clone(), 0, 100.0, &cfg);
        assert_eq!(sol.analog, init);
        assert!(trace.steps.is_empty());
    }

    #[test]
    fn power_trace_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cb = dft_codebook(2, 2);
        let cfg = SolverConfig::default();
        for _ in 0..20 {
            let (covs, gamma) = random_instance(&mut rng, 2, 4);
            let init = init_analog(&covs, &cb, 2).unwrap();
            let build = |a: &CMat| VirtualChannels::plug_in(&covs, a, WeightMode::Baseband);
            let (_, trace) = greedy_select(build, &gamma, &cb, init, 4, 100.0, &cfg);
            let t = trace.power_trace();
            for w in t.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9) || w[0].is_infinite());
            }
        }
    }

    #[test]
    fn single_user_single_chain_picks_strongest_beam() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cb = dft_codebook(2, 2);
        let cfg = SolverConfig::default();
        for _ in 0..10 {
            let (covs, gamma) = random_instance(&mut rng, 1, 4);
            // start from the weakest codeword to force a switch
            let gains: Vec<f64> = cb.codewords.column_iter().map(|a| quad_form(&covs[0], &a.into_owned())).collect();
            let weakest = (0..4).min_by(|&a, &b| gains[a].total_cmp(&gains[b])).unwrap();
            let strongest = (0..4).max_by(|&a, &b| gains[a].total_cmp(&gains[b])).unwrap();
            let init = AnalogSelection::from_indices(&cb, vec![weakest]);
            let build = |a: &CMat| VirtualChannels::plug_in(&covs, a, WeightMode::Baseband);
            let (sol, _) = greedy_select(build, &gamma, &cb, init, 1, 1e9, &cfg);
            assert_eq!(sol.analog.indices, vec![strongest]);
            assert!((sol.q[0] - gamma[0] / gains[strongest]).abs() < 1e-10 * sol.q[0]);
        }
    }
}
