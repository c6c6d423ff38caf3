//! Spatial correlation of a half-wavelength uniform planar array.
//!
//! Each array axis sees a Gaussian angular power spectrum around its own
//! mean direction. The per-axis correlation uses the small-spread closed
//! form
//!
//! ```text
//! [R]_{m,n} = exp(jπ(m−n) sin φ) · exp(−½ (π (m−n) σ cos φ)²)
//! ```
//!
//! and the planar covariance is the Kronecker product of both axes. Every
//! axis factor has a unit diagonal, so `trace(R) = M`.

use crate::error::{Error, Result};
use crate::linalg::{hermitian_part, kron, min_eigenvalue, trace_re, CMat, CVec, C64};

/// Steering vector of an `n`-element half-wavelength ULA, `a[m] = e^{jπ m sin φ}`.
pub fn ula_steering(n: usize, angle_rad: f64) -> CVec {
    let s = angle_rad.sin();
    CVec::from_fn(n, |m, _| C64::from_polar(1.0, std::f64::consts::PI * m as f64 * s))
}

/// Planar steering vector, x axis outer, y axis inner (matches [`kron`]).
pub fn upa_steering(m_x: usize, m_y: usize, az_rad: f64, el_rad: f64) -> CVec {
    crate::linalg::kron_vec(&ula_steering(m_x, az_rad), &ula_steering(m_y, el_rad))
}

/// Per-axis correlation matrix for mean angle `angle_rad` and Gaussian
/// angular standard deviation `spread_rad`.
pub fn ula_correlation(n: usize, angle_rad: f64, spread_rad: f64) -> CMat {
    let (s, c) = angle_rad.sin_cos();
    let pi = std::f64::consts::PI;
    CMat::from_fn(n, n, |m, k| {
        let d = m as f64 - k as f64;
        let mag = (-0.5 * (pi * d * spread_rad * c).powi(2)).exp();
        C64::from_polar(mag, pi * d * s)
    })
}

/// Covariance `R = R_x ⊗ R_y` of an `m_x × m_y` planar array, angles in degrees.
pub fn build_upa_covariance(
    azimuth_deg: f64,
    elevation_deg: f64,
    spread_deg: f64,
    m_x: usize,
    m_y: usize,
) -> Result<CMat> {
    if m_x == 0 || m_y == 0 {
        return Err(Error::Config("array dimensions must be at least 1".into()));
    }
    let spread = spread_deg.to_radians();
    let rx = ula_correlation(m_x, azimuth_deg.to_radians(), spread);
    let ry = ula_correlation(m_y, elevation_deg.to_radians(), spread);
    let r = hermitian_part(&kron(&rx, &ry));
    let tr = trace_re(&r);
    if min_eigenvalue(&r) < -1e-10 * tr {
        return Err(Error::Numerical(format!(
            "correlation model produced an indefinite covariance (az={azimuth_deg}, el={elevation_deg}, spread={spread_deg})"
        )));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{hermitian_eigenvalues, outer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn single_antenna_is_unity() {
        let r = build_upa_covariance(12.0, -7.0, 10.0, 1, 1).unwrap();
        assert_eq!(r.shape(), (1, 1));
        assert!((r[(0, 0)] - C64::new(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_spread_is_rank_one_steering() {
        for &(az, el) in &[(0.0, 0.0), (35.0, -20.0), (-60.0, 30.0)] {
            let r = build_upa_covariance(az, el, 0.0, 4, 3).unwrap();
            let a = upa_steering(4, 3, f64::to_radians(az), f64::to_radians(el));
            let diff = &r - outer(&a, &a);
            assert!(diff.norm() < 1e-12);
            assert!((trace_re(&r) - 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_normalized_and_psd() {
        let r = build_upa_covariance(40.0, -50.0, 10.0, 4, 4).unwrap();
        assert!((trace_re(&r) - 16.0).abs() < 1e-10);
        assert!(min_eigenvalue(&r) > -1e-10 * 16.0);
    }

    /// Monte-Carlo angular-spectrum oracle: average steering outer products
    /// over sampled path directions drawn from the (truncated) Gaussian
    /// spectrum, then compare eigenvalue profiles.
    #[test]
    fn eigenvalues_match_monte_carlo_angular_spectrum() {
        let (m_x, m_y) = (4, 4);
        let sigma = 10f64.to_radians();
        let n_paths = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut rx = CMat::zeros(m_x, m_x);
        let mut ry = CMat::zeros(m_y, m_y);
        let draw = |rng: &mut ChaCha8Rng| loop {
            let d: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
            if d.abs() <= std::f64::consts::PI {
                return d;
            }
        };
        // independent axes: E[a_x a_x^H ⊗ a_y a_y^H] = E[a_x a_x^H] ⊗ E[a_y a_y^H]
        for _ in 0..n_paths {
            let ax = ula_steering(m_x, draw(&mut rng));
            let ay = ula_steering(m_y, draw(&mut rng));
            rx += outer(&ax, &ax);
            ry += outer(&ay, &ay);
        }
        let rx = rx.unscale(n_paths as f64);
        let ry = ry.unscale(n_paths as f64);
        let mc = kron(&rx, &ry);
        let cf = build_upa_covariance(0.0, 0.0, 10.0, m_x, m_y).unwrap();
        let ev_mc = hermitian_eigenvalues(&mc);
        let ev_cf = hermitian_eigenvalues(&cf);
        let num: f64 = ev_mc.iter().zip(&ev_cf).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = ev_cf.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(num / den <= 0.02, "relative spectral error {}", num / den);
    }
}
