//! CSI degradation models and channel sampling.

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::{hermitian_part, kron, outer, CMat, CVec, C64};

/// Draw `n ~ CN(0, I_m)`.
pub fn complex_normal<R: Rng + ?Sized>(m: usize, rng: &mut R) -> CVec {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    CVec::from_fn(m, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re * s, im * s)
    })
}

/// Matrix square root factor `F` with `F F^H = R` (negative eigenvalues clipped).
pub fn covariance_factor(r: &CMat) -> CMat {
    let eig = SymmetricEigen::new(hermitian_part(r));
    let mut f = eig.eigenvectors.clone();
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        let s = ev.max(0.0).sqrt();
        f.column_mut(k).scale_mut(s);
    }
    f
}

/// Draw `h ~ CN(0, R)` given a factor from [`covariance_factor`].
pub fn sample_channel<R: Rng + ?Sized>(factor: &CMat, rng: &mut R) -> CVec {
    factor * complex_normal(factor.ncols(), rng)
}

/// Noisy MMSE estimate `ĥ = R (R + P⁻¹ I)⁻¹ (h + P^{-1/2} n)` with an explicit
/// noise draw `n`.
pub fn mmse_estimate(r_true: &CMat, h_true: &CVec, pilot_power: f64, noise: &CVec) -> CVec {
    assert!(pilot_power > 0.0, "pilot power must be positive");
    let m = r_true.nrows();
    let inv_p = 1.0 / pilot_power;
    let reg = hermitian_part(r_true) + CMat::identity(m, m).scale(inv_p);
    let y = h_true + noise.scale(inv_p.sqrt());
    let x = reg.cholesky().expect("R + P^-1 I is positive definite for P > 0").solve(&y);
    r_true * x
}

/// [`mmse_estimate`] with `n ~ CN(0, I)` drawn from `rng`.
pub fn mmse_degrade<R: Rng + ?Sized>(r_true: &CMat, h_true: &CVec, pilot_power: f64, rng: &mut R) -> CVec {
    let n = complex_normal(h_true.len(), rng);
    mmse_estimate(r_true, h_true, pilot_power, &n)
}

/// Quantization grid of the DFT feedback model. `None` disables a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackGrid {
    pub magnitude_step_db: Option<f64>,
    pub phase_levels: Option<usize>,
}

impl Default for FeedbackGrid {
    /// 3 dB magnitude steps, 8-PSK phase.
    fn default() -> Self {
        Self { magnitude_step_db: Some(3.0), phase_levels: Some(8) }
    }
}

impl FeedbackGrid {
    pub fn lossless() -> Self {
        Self { magnitude_step_db: None, phase_levels: None }
    }
}

/// Orthonormal DFT vectors of one oversampled subset for an `n`-element
/// axis: columns `e^{j2π m (O l + q)/(O n)}/√n`, `l = 0..n`.
fn oversampled_subset(n: usize, oversampling: usize, shift: usize) -> CMat {
    let denom = (oversampling * n) as f64;
    let norm = 1.0 / (n as f64).sqrt();
    CMat::from_fn(n, n, |m, l| {
        let k = (oversampling * l + shift) as f64;
        C64::from_polar(norm, 2.0 * std::f64::consts::PI * m as f64 * k / denom)
    })
}

fn quantize_relative(c: C64, reference: C64, grid: &FeedbackGrid) -> C64 {
    let ref_mag = reference.norm();
    let mut ratio = c.norm() / ref_mag;
    if let Some(step) = grid.magnitude_step_db {
        let level = (-20.0 * ratio.log10() / step).round().max(0.0);
        ratio = 10f64.powf(-level * step / 20.0);
    }
    let mut phase = (c / reference).arg();
    if let Some(levels) = grid.phase_levels {
        let q = 2.0 * std::f64::consts::PI / levels as f64;
        phase = (phase / q).round() * q;
    }
    C64::from_polar(ref_mag * ratio, reference.arg() + phase)
}

/// DFT feedback quantization with the default 3 dB / 8-PSK grid.
pub fn dft_quantize(h: &CVec, n_fb: usize, m_x: usize, m_y: usize) -> CVec {
    dft_quantize_with(h, n_fb, m_x, m_y, &FeedbackGrid::default())
}

/// Feedback quantization over the 2×2-times oversampled 2D DFT.
///
/// For each of the four orthogonal subsets, the `n_fb` strongest
/// coefficients are kept; the strongest one is the amplitude/phase
/// reference and the others are quantized relative to it. The
/// reconstruction of the subset with the smallest residual is returned.
pub fn dft_quantize_with(h: &CVec, n_fb: usize, m_x: usize, m_y: usize, grid: &FeedbackGrid) -> CVec {
    let m = m_x * m_y;
    assert_eq!(h.len(), m, "channel length must equal m_x * m_y");
    assert!(n_fb >= 1 && n_fb <= m, "feedback vector count must be in [1, M]");
    let mut best: Option<(f64, CVec)> = None;
    for qx in 0..2 {
        for qy in 0..2 {
            let basis = kron(&oversampled_subset(m_x, 2, qx), &oversampled_subset(m_y, 2, qy));
            let coeffs = basis.adjoint() * h;
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| coeffs[b].norm().total_cmp(&coeffs[a].norm()).then(a.cmp(&b)));
            let reference = coeffs[order[0]];
            let mut kept = CVec::zeros(m);
            if reference.norm() > 0.0 {
                kept[order[0]] = reference;
                for &k in &order[1..n_fb] {
                    if coeffs[k].norm() > 0.0 {
                        kept[k] = quantize_relative(coeffs[k], reference, grid);
                    }
                }
            }
            let rec = &basis * kept;
            let err = (h - &rec).norm();
            if best.as_ref().is_none_or(|(e, _)| err < *e) {
                best = Some((err, rec));
            }
        }
    }
    best.map(|(_, v)| v).unwrap_or_else(|| CVec::zeros(m))
}

/// Sample second-moment matrix `(1/S) Σ_s h_s h_s^H`.
pub fn estimate_covariance(samples: &[CVec]) -> CMat {
    assert!(!samples.is_empty(), "covariance estimate needs at least one sample");
    let m = samples[0].len();
    let mut acc = CMat::zeros(m, m);
    for h in samples {
        acc += outer(h, h);
    }
    acc.unscale(samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::correlation::build_upa_covariance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn scalar_mmse_hand_value() {
        let r = CMat::from_element(1, 1, c(1.0, 0.0));
        let h = CVec::from_element(1, c(0.3, -0.7));
        let n = CVec::from_element(1, c(-1.1, 0.4));
        let est = mmse_estimate(&r, &h, 1.0, &n);
        let expected = (h[0] + n[0]) * 0.5;
        assert!((est[0] - expected).norm() < 1e-15);
    }

    #[test]
    fn mmse_noiseless_limit() {
        let r = build_upa_covariance(10.0, -5.0, 10.0, 2, 2).unwrap();
        let f = covariance_factor(&r);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rel = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let h = sample_channel(&f, &mut rng);
            let est = mmse_degrade(&r, &h, 1e12, &mut rng);
            rel += (&est - &h).norm() / h.norm();
        }
        assert!(rel / trials as f64 <= 1e-4);
    }

    #[test]
    fn mmse_error_nonincreasing_in_pilot_power() {
        let r = build_upa_covariance(-20.0, 10.0, 10.0, 2, 2).unwrap();
        let f = covariance_factor(&r);
        let grid_db = [0.0, 5.0, 10.0, 17.0, 24.0];
        let draws = 10_000;
        let mut prev: Option<(f64, f64)> = None;
        for &db in &grid_db {
            let p = 10f64.powf(db / 10.0);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let errs: Vec<f64> = (0..draws)
                .map(|_| {
                    let h = sample_channel(&f, &mut rng);
                    (mmse_degrade(&r, &h, p, &mut rng) - h).norm_squared()
                })
                .collect();
            let mean = errs.iter().sum::<f64>() / draws as f64;
            let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
            let se = (var / draws as f64).sqrt();
            if let Some((pm, pse)) = prev {
                assert!(mean <= pm + 2.0 * (se + pse), "MSE increased: {mean} > {pm}");
            }
            prev = Some((mean, se));
        }
    }

    #[test]
    fn on_grid_channel_is_reconstructed_collinear() {
        let (mx, my) = (4, 4);
        let cb = crate::scenario::codebook::dft_codebook(mx, my);
        for k in [0, 5, 11] {
            let h = cb.codewords.column(k).into_owned().scale(2.5);
            let est = dft_quantize(&h, 1, mx, my);
            let rel = (&est - &h).norm() / h.norm();
            let bound = (std::f64::consts::PI / 8.0).sin() + (1.0 - 10f64.powf(0.15)).abs();
            assert!(rel <= bound);
            let cos = (h.dotc(&est)).norm() / (h.norm() * est.norm());
            assert!((cos - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lossless_grid_full_feedback_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = complex_normal(16, &mut rng);
        let est = dft_quantize_with(&h, 16, 4, 4, &FeedbackGrid::lossless());
        assert!((&est - &h).norm() < 1e-12);
    }

    #[test]
    fn residual_decreases_with_feedback_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut r4, mut r8) = (0.0, 0.0);
        for _ in 0..1000 {
            let h = complex_normal(16, &mut rng);
            r4 += (&h - dft_quantize(&h, 4, 4, 4)).norm();
            r8 += (&h - dft_quantize(&h, 8, 4, 4)).norm();
        }
        assert!(r8 < r4);
    }

    #[test]
    fn quantized_norm_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..300 {
            let h = complex_normal(16, &mut rng);
            for n_fb in [1, 3, 8, 16] {
                let est = dft_quantize(&h, n_fb, 4, 4);
                assert!(est.norm() <= 10f64.powf(0.15) * h.norm() + 1e-12);
            }
        }
    }

    #[test]
    fn covariance_estimate_small_cases() {
        let e1 = CVec::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        let e2 = CVec::from_vec(vec![c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]);
        let one = estimate_covariance(std::slice::from_ref(&e1));
        assert_eq!(one, outer(&e1, &e1));
        let two = estimate_covariance(&[e1, e2]);
        let expect = CMat::from_diagonal(&CVec::from_vec(vec![c(0.5, 0.0), c(0.5, 0.0), c(0.0, 0.0)]));
        assert!((two - expect).norm() < 1e-15);
    }

    /// The Frobenius error of a 32-sample estimate concentrates like 1/√32:
    /// its mean over repeated trials scales with the 128-sample mean by ≈ 2.
    #[test]
    fn covariance_estimate_concentration() {
        let r = build_upa_covariance(15.0, -30.0, 10.0, 2, 2).unwrap();
        let f = covariance_factor(&r);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mean_err = |s: usize, rng: &mut ChaCha8Rng| {
            let trials = 400;
            (0..trials)
                .map(|_| {
                    let samples: Vec<CVec> = (0..s).map(|_| sample_channel(&f, rng)).collect();
                    (estimate_covariance(&samples) - &r).norm()
                })
                .sum::<f64>()
                / trials as f64
        };
        let e32 = mean_err(32, &mut rng);
        let e128 = mean_err(128, &mut rng);
        let ratio = e32 / e128;
        assert!((1.7..2.3).contains(&ratio), "ratio {ratio}");
        // E‖R̂ − R‖_F² = (tr(R)² ... )/S for Gaussian samples: (tr R)^2 / S here
        let expected_rms = (crate::linalg::trace_re(&r).powi(2) / 32.0).sqrt();
        assert!(e32 <= expected_rms * 1.05);
    }
}
