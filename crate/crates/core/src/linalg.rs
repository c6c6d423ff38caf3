//! Small dense complex linear-algebra helpers shared by the solver and the
//! gradient code. Everything here works on dynamically sized `nalgebra`
//! matrices; the problem sizes (a handful of RF chains, at most a few dozen
//! antennas) are far too small for anything fancier.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;
pub type RVec = DVector<f64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// `Re(x^H M x)`.
pub fn quad_form(m: &CMat, x: &CVec) -> f64 {
    let n = x.len();
    let mut acc = ZERO;
    for k in 0..n {
        let mut row = ZERO;
        for l in 0..n {
            row += m[(k, l)] * x[l];
        }
        acc += x[k].conj() * row;
    }
    acc.re
}

/// `Re(u^H M x)`.
pub fn bilinear(u: &CVec, m: &CMat, x: &CVec) -> f64 {
    let mut acc = ZERO;
    for k in 0..u.len() {
        let mut row = ZERO;
        for l in 0..x.len() {
            row += m[(k, l)] * x[l];
        }
        acc += u[k].conj() * row;
    }
    acc.re
}

/// `x y^H`.
pub fn outer(x: &CVec, y: &CVec) -> CMat {
    CMat::from_fn(x.len(), y.len(), |k, l| x[k] * y[l].conj())
}

pub fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()).scale(0.5)
}

pub fn is_hermitian(m: &CMat, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let n = m.nrows();
    for k in 0..n {
        for l in k..n {
            if (m[(k, l)] - m[(l, k)].conj()).norm() > tol {
                return false;
            }
        }
    }
    true
}

pub fn trace_re(m: &CMat) -> f64 {
    (0..m.nrows().min(m.ncols())).map(|k| m[(k, k)].re).sum()
}

/// Eigenvalues of the Hermitian part of `m`, ascending.
pub fn hermitian_eigenvalues(m: &CMat) -> Vec<f64> {
    let eig = SymmetricEigen::new(hermitian_part(m));
    let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

pub fn min_eigenvalue(m: &CMat) -> f64 {
    hermitian_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// PSD test relative to the trace: `λ_min ≥ −tol·trace`.
pub fn is_psd(m: &CMat, rel_tol: f64) -> bool {
    let tr = trace_re(m).abs();
    min_eigenvalue(m) >= -rel_tol * tr.max(f64::MIN_POSITIVE)
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    CMat::from_fn(ar * br, ac * bc, |r, c| a[(r / br, c / bc)] * b[(r % br, c % bc)])
}

pub fn kron_vec(a: &CVec, b: &CVec) -> CVec {
    CVec::from_fn(a.len() * b.len(), |r, _| a[r / b.len()] * b[r % b.len()])
}

/// Rotate `v` so that its largest-magnitude entry is real and positive
/// (lowest index wins among equal magnitudes).
pub fn fix_phase_max_entry(v: &mut CVec) {
    let mut best = 0;
    let mut best_mag = -1.0;
    for (k, x) in v.iter().enumerate() {
        let m = x.norm();
        if m > best_mag * (1.0 + 1e-12) {
            best = k;
            best_mag = m;
        }
    }
    if best_mag > 0.0 {
        let rot = v[best].conj() / best_mag;
        v.iter_mut().for_each(|x| *x *= rot);
    }
}

/// Rotate `v` so that its last entry is real and nonnegative.
pub fn fix_phase_last_entry(v: &mut CVec) {
    let n = v.len();
    if n == 0 {
        return;
    }
    let m = v[n - 1].norm();
    if m > 0.0 {
        let rot = v[n - 1].conj() / m;
        v.iter_mut().for_each(|x| *x *= rot);
    }
}

/// Principal generalized eigenpair of the Hermitian pencil `(d, n)` with `n`
/// positive definite: maximizes `x^H d x / x^H n x`.
///
/// Uses Cholesky whitening `n = L L^H`, a Hermitian eigendecomposition of
/// `L^{-1} d L^{-H}` and back-substitution. The returned vector has unit
/// 2-norm and its largest-magnitude entry real positive. `None` if `n` is
/// not numerically positive definite.
pub fn principal_generalized_eigvec(d: &CMat, n: &CMat) -> Option<(f64, CVec)> {
    let dim = d.nrows();
    if dim == 1 {
        let nn = n[(0, 0)].re;
        if !(nn > 0.0) {
            return None;
        }
        return Some((d[(0, 0)].re / nn, CVec::from_element(1, ONE)));
    }
    let chol = hermitian_part(n).cholesky()?;
    let l = chol.l();
    // w = L^{-1} d L^{-H}
    let linv_d = l.solve_lower_triangular(d)?;
    let w = l.solve_lower_triangular(&linv_d.adjoint())?.adjoint();
    let eig = SymmetricEigen::new(hermitian_part(&w));
    let (mut k_best, mut mu) = (0, f64::NEG_INFINITY);
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > mu {
            mu = ev;
            k_best = k;
        }
    }
    let v = eig.eigenvectors.column(k_best).into_owned();
    let mut x = l.adjoint().solve_upper_triangular(&v)?;
    let nrm = x.norm();
    if !(nrm > 0.0) || !nrm.is_finite() {
        return None;
    }
    x.unscale_mut(nrm);
    fix_phase_max_entry(&mut x);
    Some((mu, x))
}

/// Ratio of smallest to largest singular value (0 for an empty/zero matrix).
pub fn singular_value_ratio(m: &CMat) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if max > 0.0 {
        min / max
    } else {
        0.0
    }
}

/// 2-norm condition number of a real square matrix via SVD.
pub fn condition_number(m: &RMat) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// `A^H X A`.
pub fn congruence(a: &CMat, x: &CMat) -> CMat {
    a.adjoint() * x * a
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn from_real(x: f64) -> C64 {
    C64::new(x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn generalized_eigvec_matches_rayleigh_maximizer() {
        let d = CMat::from_row_slice(2, 2, &[c(3.0, 0.0), c(1.0, 1.0), c(1.0, -1.0), c(2.0, 0.0)]);
        let n = CMat::from_row_slice(2, 2, &[c(2.0, 0.0), c(0.5, 0.0), c(0.5, 0.0), c(1.0, 0.0)]);
        let (mu, x) = principal_generalized_eigvec(&d, &n).unwrap();
        assert!((x.norm() - 1.0).abs() < 1e-12);
        let r = quad_form(&d, &x) / quad_form(&n, &x);
        assert!((r - mu).abs() < 1e-10);
        // brute-force scan over the unit sphere in C^2 (up to phase)
        let mut best: f64 = 0.0;
        for a in 0..200 {
            for p in 0..200 {
                let th = a as f64 / 200.0 * std::f64::consts::PI;
                let ph = p as f64 / 200.0 * 2.0 * std::f64::consts::PI;
                let y = CVec::from_vec(vec![c(th.cos(), 0.0), C64::from_polar(th.sin(), ph)]);
                best = best.max(quad_form(&d, &y) / quad_form(&n, &y));
            }
        }
        assert!(mu >= best - 1e-9 && mu - best < 1e-3);
        // d x = mu n x
        let res = &d * &x - (&n * &x).scale(mu);
        assert!(res.norm() < 1e-10);
    }

    #[test]
    fn kron_shapes_and_values() {
        let a = CMat::from_row_slice(2, 1, &[c(1.0, 0.0), c(2.0, 0.0)]);
        let b = CMat::from_row_slice(1, 2, &[c(0.0, 1.0), c(3.0, 0.0)]);
        let k = kron(&a, &b);
        assert_eq!(k.shape(), (2, 2));
        assert_eq!(k[(1, 0)], c(0.0, 2.0));
        assert_eq!(k[(1, 1)], c(6.0, 0.0));
    }

    #[test]
    fn phase_fix_makes_entry_real() {
        let mut v = CVec::from_vec(vec![c(0.1, 0.2), c(-0.5, 0.5)]);
        fix_phase_max_entry(&mut v);
        assert!(v[1].im.abs() < 1e-15 && v[1].re > 0.0);
        fix_phase_last_entry(&mut v);
        assert!(v[1].im.abs() < 1e-15 && v[1].re > 0.0);
    }
}
