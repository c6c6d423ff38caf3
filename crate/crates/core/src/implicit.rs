//! Implicit differentiation of the uplink solver through its KKT system.
//!
//! The optimum is written as the root of a real system of nonlinear
//! equations in the scaled downlink beamformers `b̆_i = √p_i b_i` and the
//! uplink powers `q`:
//!
//! ```text
//! g_b,i = Λ_i b̆_i                       (real and imaginary rows)
//! g_q,i = q_i (1 − b̆_i^H Ψ_des,i b̆_i / γ_i + Σ_{j≠i} b̆_j^H Ψ_intf,i b̆_j)
//! Λ_i   = Ψ_0,i − (q_i/γ_i) Ψ_des,i + Σ_{j≠i} q_j Ψ_intf,j
//! ```
//!
//! The phase of every `b̆_i` is fixed by making its last entry real and
//! nonnegative, so each beamformer has `2M − 1` real coordinates
//! `(Re b̆, Im b̆[..M−1])` and the stacked point `ζ = (b̆_1, …, b̆_I, q)`
//! has `2IM` entries. The same layout is used for residuals, Jacobian rows
//! and upstream gradients.
//!
//! Hermitian matrices are parameterized by `n²` real coordinates: the
//! diagonal (ascending), then the real parts of the strict upper triangle
//! (row-major), then their imaginary parts.

use nalgebra::DMatrix;

use crate::linalg::{fix_phase_last_entry, quad_form, CMat, CVec, RMat, RVec, C64, ZERO};
use crate::solver::VirtualChannels;

/// Condition number above which the implicit gradient is replaced by zero.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Number of real coordinates of an `n × n` Hermitian matrix.
pub fn psi_len(n: usize) -> usize {
    n * n
}

fn upper_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |k| (k + 1..n).map(move |l| (k, l)))
}

/// Hermitian matrix → coordinates (diagonal, upper real, upper imaginary).
pub fn psi_coords(m: &CMat) -> RVec {
    let n = m.nrows();
    let t = n * (n - 1) / 2;
    let mut v = RVec::zeros(psi_len(n));
    for k in 0..n {
        v[k] = m[(k, k)].re;
    }
    for (idx, (k, l)) in upper_pairs(n).enumerate() {
        v[n + idx] = m[(k, l)].re;
        v[n + t + idx] = m[(k, l)].im;
    }
    v
}

/// Coordinates → Hermitian matrix.
pub fn psi_from_coords(v: &RVec, n: usize) -> CMat {
    let t = n * (n - 1) / 2;
    let mut m = CMat::zeros(n, n);
    for k in 0..n {
        m[(k, k)] = C64::new(v[k], 0.0);
    }
    for (idx, (k, l)) in upper_pairs(n).enumerate() {
        let z = C64::new(v[n + idx], v[n + t + idx]);
        m[(k, l)] = z;
        m[(l, k)] = z.conj();
    }
    m
}

/// Gradient with respect to a Hermitian matrix expressed as the Hermitian
/// `H` with `dL = Re tr(H^H dΨ)` for Hermitian perturbations `dΨ`.
pub fn gradient_matrix(g: &RVec, n: usize) -> CMat {
    let t = n * (n - 1) / 2;
    let mut h = CMat::zeros(n, n);
    for k in 0..n {
        h[(k, k)] = C64::new(g[k], 0.0);
    }
    for (idx, (k, l)) in upper_pairs(n).enumerate() {
        let z = C64::new(g[n + idx], g[n + t + idx]) * 0.5;
        h[(k, l)] = z;
        h[(l, k)] = z.conj();
    }
    h
}

/// Coordinate gradient of `Re Σ_kl P_kl Ψ_kl` over Hermitian `Ψ`.
pub fn coords_from_pairing(p: &CMat) -> RVec {
    let n = p.nrows();
    let t = n * (n - 1) / 2;
    let mut g = RVec::zeros(psi_len(n));
    for k in 0..n {
        g[k] = p[(k, k)].re;
    }
    for (idx, (k, l)) in upper_pairs(n).enumerate() {
        g[n + idx] = p[(k, l)].re + p[(l, k)].re;
        g[n + t + idx] = -p[(k, l)].im + p[(l, k)].im;
    }
    g
}

/// `conj(x) y^T`, the pairing matrix of `Re(x^H Ψ y)`.
pub fn pairing(x: &CVec, y: &CVec) -> CMat {
    CMat::from_fn(x.len(), y.len(), |k, l| x[k].conj() * y[l])
}

/// Restricted real representation of a complex square matrix: the real
/// `2n × 2n` form `[[Re, −Im], [Im, Re]]` without row and column `2n − 1`.
pub fn real_rep(m: &CMat) -> RMat {
    let n = m.nrows();
    let d = 2 * n - 1;
    DMatrix::from_fn(d, d, |r, c| {
        let (ri, rim) = if r < n { (r, false) } else { (r - n, true) };
        let (ci, cim) = if c < n { (c, false) } else { (c - n, true) };
        let z = m[(ri, ci)];
        match (rim, cim) {
            (false, false) | (true, true) => z.re,
            (false, true) => -z.im,
            (true, false) => z.im,
        }
    })
}

/// `(Re x, Im x[..n−1])`.
pub fn real_vec(x: &CVec) -> RVec {
    let n = x.len();
    RVec::from_fn(2 * n - 1, |r, _| if r < n { x[r].re } else { x[r - n].im })
}

/// Inverse of [`real_vec`] with the last imaginary part set to zero.
pub fn complex_from_real(v: &[f64], n: usize) -> CVec {
    CVec::from_fn(n, |k, _| C64::new(v[k], if k + 1 < n { v[n + k] } else { 0.0 }))
}

/// Stacked primal–dual point `(b̆_1, …, b̆_I, q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualPoint {
    /// Scaled beamformers with real nonnegative last entry.
    pub b: Vec<CVec>,
    pub q: RVec,
}

impl PrimalDualPoint {
    /// From unit-norm beamformers (columns of `b`), downlink powers and
    /// uplink powers; applies the phase gauge.
    pub fn from_solution(b: &CMat, p: &RVec, q: &RVec) -> Self {
        let b = (0..b.ncols())
            .map(|i| {
                let mut v = b.column(i).scale(p[i].max(0.0).sqrt());
                fix_phase_last_entry(&mut v);
                v
            })
            .collect();
        Self { b, q: q.clone() }
    }

    pub fn users(&self) -> usize {
        self.b.len()
    }

    pub fn dim(&self) -> usize {
        self.b.first().map_or(0, |v| v.len())
    }

    pub fn len(&self) -> usize {
        2 * self.users() * self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> RVec {
        let (n, m) = (self.users(), self.dim());
        let d = 2 * m - 1;
        let mut v = RVec::zeros(self.len());
        for (i, b) in self.b.iter().enumerate() {
            v.rows_mut(i * d, d).copy_from(&real_vec(b));
        }
        v.rows_mut(n * d, n).copy_from(&self.q);
        v
    }

    pub fn from_vec(v: &RVec, users: usize, m: usize) -> Self {
        let d = 2 * m - 1;
        let b = (0..users).map(|i| complex_from_real(&v.as_slice()[i * d..(i + 1) * d], m)).collect();
        let q = v.rows(users * d, users).into_owned();
        Self { b, q }
    }
}

/// `Λ_i = Ψ_0,i − (q_i/γ_i) Ψ_des,i + Σ_{j≠i} q_j Ψ_intf,j`.
pub fn lambda_matrix(q: &RVec, psi: &VirtualChannels, gamma: &[f64], i: usize) -> CMat {
    let mut l = psi.weight[i].clone() - psi.des[i].scale(q[i] / gamma[i]);
    for j in (0..psi.users()).filter(|&j| j != i) {
        l += psi.intf[j].scale(q[j]);
    }
    l
}

/// Bracket `1 − b̆_i^H Ψ_des,i b̆_i / γ_i + Σ_{j≠i} b̆_j^H Ψ_intf,i b̆_j`.
fn sinr_slack(zeta: &PrimalDualPoint, psi: &VirtualChannels, gamma: &[f64], i: usize) -> f64 {
    let mut s = 1.0 - quad_form(&psi.des[i], &zeta.b[i]) / gamma[i];
    for j in (0..zeta.users()).filter(|&j| j != i) {
        s += quad_form(&psi.intf[i], &zeta.b[j]);
    }
    s
}

/// SNLE residual in the layout of [`PrimalDualPoint::to_vec`].
pub fn snle_residual(zeta: &PrimalDualPoint, psi: &VirtualChannels, gamma: &[f64]) -> RVec {
    let (n, m) = (zeta.users(), zeta.dim());
    let d = 2 * m - 1;
    let mut g = RVec::zeros(zeta.len());
    for i in 0..n {
        let lb = lambda_matrix(&zeta.q, psi, gamma, i) * &zeta.b[i];
        g.rows_mut(i * d, d).copy_from(&real_vec(&lb));
        g[n * d + i] = zeta.q[i] * sinr_slack(zeta, psi, gamma, i);
    }
    g
}

/// Jacobian of [`snle_residual`] with respect to `ζ`.
pub fn jac_zeta(zeta: &PrimalDualPoint, psi: &VirtualChannels, gamma: &[f64]) -> RMat {
    let (n, m) = (zeta.users(), zeta.dim());
    let d = 2 * m - 1;
    let mut j = RMat::zeros(zeta.len(), zeta.len());
    let bvec: Vec<RVec> = zeta.b.iter().map(real_vec).collect();
    for i in 0..n {
        let lam = real_rep(&lambda_matrix(&zeta.q, psi, gamma, i));
        j.view_mut((i * d, i * d), (d, d)).copy_from(&lam);
        for k in 0..n {
            // ∂g_b,i / ∂q_k
            let col = if k == i {
                (real_rep(&psi.des[i]) * &bvec[i]).scale(-1.0 / gamma[i])
            } else {
                real_rep(&psi.intf[k]) * &bvec[i]
            };
            j.view_mut((i * d, n * d + k), (d, 1)).copy_from(&col);
            // ∂g_q,k / ∂b_i = 2 q_k (∂g_b,i / ∂q_k)^T
            j.view_mut((n * d + k, i * d), (1, d)).copy_from(&col.transpose().scale(2.0 * zeta.q[k]));
        }
        j[(n * d + i, n * d + i)] = sinr_slack(zeta, psi, gamma, i);
    }
    j
}

/// Gradients in Hermitian coordinates, one vector per user and role.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiGradient {
    pub des: Vec<RVec>,
    pub intf: Vec<RVec>,
    pub weight: Vec<RVec>,
}

impl PsiGradient {
    pub fn zeros(users: usize, m: usize) -> Self {
        let z = vec![RVec::zeros(psi_len(m)); users];
        Self { des: z.clone(), intf: z.clone(), weight: z }
    }

    pub fn is_zero(&self) -> bool {
        self.des.iter().chain(&self.intf).chain(&self.weight).all(|v| v.iter().all(|&x| x == 0.0))
    }

    /// All coordinates: des, intf, weight, each user-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.des.iter().chain(&self.intf).chain(&self.weight).flat_map(|v| v.iter().copied()).collect()
    }

    pub fn scale(&self, c: f64) -> Self {
        let s = |v: &Vec<RVec>| v.iter().map(|x| x.scale(c)).collect();
        Self { des: s(&self.des), intf: s(&self.intf), weight: s(&self.weight) }
    }
}

/// `upstream^T ∂g/∂ψ` for every matrix of the virtual channels.
pub fn jac_psi_vjp(upstream: &RVec, zeta: &PrimalDualPoint, gamma: &[f64]) -> PsiGradient {
    let (n, m) = (zeta.users(), zeta.dim());
    let d = 2 * m - 1;
    let u_b: Vec<CVec> = (0..n).map(|i| complex_from_real(&upstream.as_slice()[i * d..(i + 1) * d], m)).collect();
    let u_q = upstream.rows(n * d, n);
    let q = &zeta.q;
    let mut p_des = vec![CMat::from_element(m, m, ZERO); n];
    let mut p_intf = p_des.clone();
    let mut p_weight = p_des.clone();
    for k in 0..n {
        let bk = &zeta.b[k];
        let own = pairing(bk, bk);
        p_weight[k] += pairing(&u_b[k], bk);
        p_des[k] -= pairing(&u_b[k], bk).scale(q[k] / gamma[k]) + own.scale(u_q[k] * q[k] / gamma[k]);
        for j in (0..n).filter(|&j| j != k) {
            // Λ_k contains q_j Ψ_intf,j; g_q,j contains q_j b̆_k^H Ψ_intf,j b̆_k
            p_intf[j] += pairing(&u_b[k], bk).scale(q[j]) + own.scale(u_q[j] * q[j]);
        }
    }
    let conv = |v: Vec<CMat>| v.iter().map(coords_from_pairing).collect();
    PsiGradient { des: conv(p_des), intf: conv(p_intf), weight: conv(p_weight) }
}

/// Jacobian of `ζ ↦ (b̆_1/‖b̆_1‖, …, q)`: per-user blocks
/// `(‖b‖² I − b b^T) / ‖b‖³`, identity on the powers.
pub fn jac_normalization(zeta: &PrimalDualPoint) -> RMat {
    let d = 2 * zeta.dim() - 1;
    let mut j = RMat::identity(zeta.len(), zeta.len());
    for (i, b) in zeta.b.iter().enumerate() {
        let v = real_vec(b);
        let nrm2 = v.norm_squared();
        let nrm = nrm2.sqrt();
        let block = (RMat::identity(d, d).scale(nrm2) - &v * v.transpose()).unscale(nrm2 * nrm);
        j.view_mut((i * d, i * d), (d, d)).copy_from(&block);
    }
    j
}

/// Result of an implicit vector–Jacobian product.
#[derive(Debug, Clone)]
pub struct ImplicitGrad {
    pub grad: PsiGradient,
    /// Set when the Jacobian was too ill-conditioned and the gradient was zeroed.
    pub singular: bool,
    pub condition: f64,
}

/// Gradient of `upstream^T (normalized b̆, q)` with respect to the virtual
/// channels at an optimum `zeta`:
/// `−(J_ζ^{-T} J_n^T u)^T J_ψ`.
pub fn implicit_vjp(upstream: &RVec, zeta: &PrimalDualPoint, psi: &VirtualChannels, gamma: &[f64]) -> ImplicitGrad {
    let (n, m) = (zeta.users(), zeta.dim());
    let v = jac_normalization(zeta).transpose() * upstream;
    let jz = jac_zeta(zeta, psi, gamma);
    let condition = crate::linalg::condition_number(&jz);
    let zero = || ImplicitGrad { grad: PsiGradient::zeros(n, m), singular: true, condition };
    if !(condition < CONDITION_LIMIT) {
        return zero();
    }
    let Some(w) = jz.transpose().full_piv_lu().solve(&v) else {
        return zero();
    };
    ImplicitGrad { grad: jac_psi_vjp(&(-w), zeta, gamma), singular: false, condition }
}

/// Condition number of `J_ζ` at a point.
pub fn jacobian_condition(zeta: &PrimalDualPoint, psi: &VirtualChannels, gamma: &[f64]) -> f64 {
    crate::linalg::condition_number(&jac_zeta(zeta, psi, gamma))
}

/// Normalized beamformers (phase gauge on the last entry) and `q` of a
/// fresh solve, flattened in the `ζ` layout.
pub fn solve_normalized(psi: &VirtualChannels, gamma: &[f64]) -> Option<(RVec, PrimalDualPoint)> {
    let sol = crate::solver::uplink_fixed_point(psi, gamma, 1e-10, 2000, 1e12).ok()?;
    let p = crate::solver::recover_downlink_power(&sol.b, psi, gamma)?;
    let zeta = PrimalDualPoint::from_solution(&sol.b, &p, &sol.q);
    let mut unit = zeta.clone();
    for b in unit.b.iter_mut() {
        let nrm = b.norm();
        b.unscale_mut(nrm);
    }
    Some((unit.to_vec(), zeta))
}
