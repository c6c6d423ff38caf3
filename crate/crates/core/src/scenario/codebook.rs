use crate::linalg::{kron, CMat, C64};

/// Discrete set of unit-norm analog beam codewords (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub codewords: CMat,
    pub m_x: usize,
    pub m_y: usize,
    pub oversampling: usize,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.codewords.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.ncols() == 0
    }

    pub fn antennas(&self) -> usize {
        self.codewords.nrows()
    }
}

fn dft_matrix(n: usize) -> CMat {
    let norm = 1.0 / (n as f64).sqrt();
    CMat::from_fn(n, n, |m, k| C64::from_polar(norm, 2.0 * std::f64::consts::PI * (m * k) as f64 / n as f64))
}

/// Non-oversampled 2D-DFT codebook `F_x ⊗ F_y` with `M = m_x·m_y` orthonormal
/// columns. Column `k = k_x·m_y + k_y` points to `sin φ_x = 2k_x/m_x`,
/// `sin φ_y = 2k_y/m_y` (mod 2).
pub fn dft_codebook(m_x: usize, m_y: usize) -> Codebook {
    assert!(m_x >= 1 && m_y >= 1, "array dimensions must be at least 1");
    Codebook { codewords: kron(&dft_matrix(m_x), &dft_matrix(m_y)), m_x, m_y, oversampling: 1 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::correlation::upa_steering;

    #[test]
    fn single_element() {
        let cb = dft_codebook(1, 1);
        assert_eq!(cb.len(), 1);
        assert!((cb.codewords[(0, 0)] - C64::new(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn orthonormal_columns() {
        let cb = dft_codebook(4, 4);
        assert_eq!(cb.len(), 16);
        let gram = cb.codewords.adjoint() * &cb.codewords;
        assert!((gram - CMat::identity(16, 16)).norm() < 1e-12);
        for col in cb.codewords.column_iter() {
            assert!((col.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn columns_align_with_grid_steering() {
        let (mx, my) = (4, 2);
        let cb = dft_codebook(mx, my);
        for kx in 0..mx {
            for ky in 0..my {
                let wrap = |v: f64| if v > 1.0 { v - 2.0 } else { v };
                let az = wrap(2.0 * kx as f64 / mx as f64).asin();
                let el = wrap(2.0 * ky as f64 / my as f64).asin();
                let a = upa_steering(mx, my, az, el);
                let a = a.unscale(a.norm());
                let k = kx * my + ky;
                let ip = cb.codewords.column(k).dotc(&a).norm();
                assert!((ip - 1.0).abs() < 1e-12, "k={k} ip={ip}");
            }
        }
    }
}
