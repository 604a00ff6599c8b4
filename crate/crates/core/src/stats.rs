//! Small numeric helpers shared by inference and the test suites.

use crate::error::{invalid, Result};

/// Linear-interpolation quantile (type 7): `h = (n-1)p`, interpolate between
/// the two order statistics bracketing `h`.
pub fn quantile_type7_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(invalid("quantile of empty sample"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("quantile level {p} outside [0, 1]")));
    }
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Type-7 quantile of an unsorted sample (sorts a copy).
pub fn quantile_type7(xs: &[f64], p: f64) -> Result<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in quantile input"));
    quantile_type7_sorted(&v, p)
}

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (denominator n-1).
pub fn sample_var(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Unbiased-variance standard deviation.
pub fn sample_sd(xs: &[f64]) -> f64 {
    sample_var(xs).sqrt()
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F1 - F2|`.
pub fn two_sample_ks(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("KS statistic of empty sample"));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).expect("non-finite value in KS input"));
    sb.sort_by(|x, y| x.partial_cmp(y).expect("non-finite value in KS input"));
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut ks: f64 = 0.0;
    // Advance both sides past each distinct value so ties are counted once.
    while i < sa.len() || j < sb.len() {
        let x = match (sa.get(i), sb.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        ks = ks.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(ks)
}

/// 1-Wasserstein distance between two empirical distributions on the line
/// (integral of |F1 - F2| over the merged support).
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("Wasserstein distance of empty sample"));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).expect("non-finite value in Wasserstein input"));
    sb.sort_by(|x, y| x.partial_cmp(y).expect("non-finite value in Wasserstein input"));
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    // Walk the merged order statistics accumulating |F1 - F2| * segment width.
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = sa[0].min(sb[0]);
    let mut dist = 0.0;
    while i < sa.len() || j < sb.len() {
        let x = match (sa.get(i), sb.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        dist += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        prev = x;
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
    }
    Ok(dist)
}

/// Numerically stable `log(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m; // all -inf (or a NaN/inf propagates)
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_quantiles_of_1_to_100() {
        let xs: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert!((quantile_type7(&xs, 0.025).unwrap() - 3.475).abs() < 1e-12);
        assert!((quantile_type7(&xs, 0.975).unwrap() - 97.525).abs() < 1e-12);
        assert_eq!(quantile_type7(&xs, 0.0).unwrap(), 1.0);
        assert_eq!(quantile_type7(&xs, 1.0).unwrap(), 100.0);
    }

    #[test]
    fn type7_is_monotone_in_p() {
        let xs = [0.3, -1.2, 4.0, 2.2, 2.2, -0.7];
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=20 {
            let q = quantile_type7(&xs, k as f64 / 20.0).unwrap();
            assert!(q >= prev);
            prev = q;
        }
    }

    #[test]
    fn ks_of_identical_samples_is_zero() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(two_sample_ks(&xs, &xs).unwrap(), 0.0);
    }

    #[test]
    fn ks_of_disjoint_samples_is_one() {
        let a = [0.0, 1.0];
        let b = [5.0, 6.0];
        assert_eq!(two_sample_ks(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn wasserstein_of_shifted_point_masses_is_the_shift() {
        let a = [0.0, 0.0, 0.0];
        let b = [2.5, 2.5, 2.5];
        assert!((wasserstein_1d(&a, &b).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_is_symmetric() {
        let a = [0.1, 0.9, 2.0, -1.0];
        let b = [0.4, 1.5];
        let d1 = wasserstein_1d(&a, &b).unwrap();
        let d2 = wasserstein_1d(&b, &a).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_matches_naive_on_moderate_values() {
        let xs = [0.0, 1.0, -2.0];
        let naive: f64 = xs.iter().map(|&x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_survives_large_inputs() {
        let xs = [1000.0, 1000.0];
        assert!((log_sum_exp(&xs) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
