//! Order statistics and order-independent summation.

/// Empirical `p`-quantile by linear interpolation of order statistics
/// (position `(n − 1)·p`). `None` for empty input.
pub fn quantile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile_sorted(&v, p))
}

/// [`quantile`] on already sorted input.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Interpolation weights of [`quantile`]: `(index_lo, index_hi, weight_hi)`
/// into the original (unsorted) slice.
pub fn quantile_support(values: &[f64], p: f64) -> (usize, usize, f64) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let pos = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (order[lo], order[hi], pos - lo as f64)
}

/// Sum whose result does not depend on the order of the terms.
pub fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (`n − 1` denominator; 0 for fewer than two values).
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolates() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile(&v, 0.9).unwrap() - 90.1).abs() < 1e-12);
        assert_eq!(quantile(&[3.0], 0.3), Some(3.0));
        assert_eq!(quantile(&[], 0.5), None);
        let (lo, hi, w) = quantile_support(&[5.0, 1.0, 3.0], 0.75);
        assert_eq!((lo, hi), (2, 0));
        assert!((w - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sorted_sum_is_permutation_invariant() {
        let mut a = [1e16, 1.0, -1e16, 3.5, 1e-3];
        let mut b = [3.5, -1e16, 1e-3, 1.0, 1e16];
        assert_eq!(sorted_sum(&mut a).to_bits(), sorted_sum(&mut b).to_bits());
    }
}
