//! Finite-difference check of the implicit gradient on generated instances.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::implicit::{implicit_vjp, psi_coords, psi_from_coords, solve_normalized, PrimalDualPoint};
use crate::linalg::{CMat, RVec};
use crate::scenario::{dft_codebook, sample_scenario, Degradation, GenConfig};
use crate::solver::{init_analog, VirtualChannels, WeightMode};

/// Central-difference step on the virtual-channel coordinates.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    /// Relative error per checked instance.
    pub errors: Vec<f64>,
    /// Draws rejected as infeasible or singular.
    pub skipped: usize,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Plug-in virtual channels and targets of a random 2x2-array instance with
/// `m_rf` RF chains picked by the initialization heuristic.
pub fn random_virtual_channels<R: Rng>(rng: &mut R, users: usize, m_rf: usize) -> Option<(VirtualChannels, Vec<f64>)> {
    let cfg = GenConfig {
        m_x: 2,
        m_y: 2,
        users,
        rf_chains: m_rf,
        degradation: Degradation::None,
        sinr_db: [0.0, 5.0],
        ..GenConfig::default()
    };
    let inst = sample_scenario(&cfg, 0, rng).ok()?;
    let analog = init_analog(&inst.true_cov, &dft_codebook(2, 2), m_rf).ok()?;
    let psi = VirtualChannels::plug_in(&inst.true_cov, &analog.matrix, WeightMode::Baseband);
    Some((psi, inst.sinr_targets))
}

fn role_mats(p: &mut VirtualChannels, role: usize) -> &mut Vec<CMat> {
    match role {
        0 => &mut p.des,
        1 => &mut p.intf,
        _ => &mut p.weight,
    }
}

/// Relative error (2-norm over all virtual-channel coordinates) of the
/// implicit VJP against central differences of solve-then-normalize, for a
/// random upstream. `None` if the instance is infeasible, a perturbed solve
/// fails or the Jacobian is singular.
pub fn implicit_rel_err<R: Rng>(psi: &VirtualChannels, gamma: &[f64], rng: &mut R) -> Option<f64> {
    let (_, zeta): (RVec, PrimalDualPoint) = solve_normalized(psi, gamma)?;
    let (n, m) = (psi.users(), psi.dim());
    let upstream = RVec::from_fn(zeta.len(), |_, _| rng.random_range(-1.0..1.0));
    let grad = implicit_vjp(&upstream, &zeta, psi, gamma);
    if grad.singular {
        return None;
    }
    let mut fd = Vec::new();
    for role in 0..3 {
        for owner in 0..n {
            let base = psi_coords(&role_mats(&mut psi.clone(), role)[owner]);
            for k in 0..base.len() {
                let eval = |delta: f64| -> Option<f64> {
                    let mut p2 = psi.clone();
                    let mut c = base.clone();
                    c[k] += delta;
                    role_mats(&mut p2, role)[owner] = psi_from_coords(&c, m);
                    Some(upstream.dot(&solve_normalized(&p2, gamma)?.0))
                };
                fd.push((eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP));
            }
        }
    }
    let an = grad.grad.flatten();
    let num: f64 = an.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    Some(num / den.max(f64::MIN_POSITIVE))
}

/// Checks `count` feasible instances with users and RF chains drawn from
/// {2, 3}.
pub fn implicit_suite(seed: u64, count: usize) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport { errors: Vec::with_capacity(count), skipped: 0 };
    while report.errors.len() < count {
        let users = rng.random_range(2..=3);
        let m_rf = rng.random_range(2..=3);
        match random_virtual_channels(&mut rng, users, m_rf).and_then(|(psi, g)| implicit_rel_err(&psi, &g, &mut rng)) {
            Some(e) => report.errors.push(e),
            None => report.skipped += 1,
        }
        if report.skipped > 100 * count.max(1) {
            break;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let r = implicit_suite(3, 5);
        assert_eq!(r.errors.len(), 5);
        assert!(r.max_rel_err() <= 1e-4, "max rel err {}", r.max_rel_err());
    }

    #[test]
    fn suite_is_deterministic() {
        assert_eq!(implicit_suite(9, 2), implicit_suite(9, 2));
    }
}
