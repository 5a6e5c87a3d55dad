//! Sample statistics used by the Monte Carlo experiments.

use rand::Rng;

use crate::rng::substream;

/// Mean and unbiased variance, summed in slice order.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - 1) as f64)
}

/// Standard error of the sample mean.
pub fn std_error(xs: &[f64]) -> f64 {
    let (_, var) = mean_var(xs);
    (var / xs.len() as f64).sqrt()
}

/// Percentile bootstrap interval for the sample variance.
pub fn bootstrap_var_ci(xs: &[f64], resamples: usize, level: f64, seed: u64) -> (f64, f64) {
    let n = xs.len();
    if n < 2 || resamples == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = substream(seed, u64::MAX);
    let mut draws = Vec::with_capacity(resamples);
    let mut buf = vec![0.0; n];
    for _ in 0..resamples {
        for b in buf.iter_mut() {
            *b = xs[rng.random_range(0..n)];
        }
        draws.push(mean_var(&buf).1);
    }
    draws.sort_by(f64::total_cmp);
    let lo_q = (1.0 - level) / 2.0;
    let pick = |q: f64| {
        let pos = (q * (resamples - 1) as f64).round() as usize;
        draws[pos.min(resamples - 1)]
    };
    (pick(lo_q), pick(1.0 - lo_q))
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        // advance past every copy of the smaller value so ties step together
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic critical value of the two-sample statistic at level `alpha`.
pub fn ks_critical(alpha: f64, n_a: usize, n_b: usize) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    let (na, nb) = (n_a as f64, n_b as f64);
    c * ((na + nb) / (na * nb)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_var_small_sample() {
        let (m, v) = mean_var(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((v - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ks_identical_and_disjoint() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(ks_two_sample(&a, &a), 0.0);
        assert_eq!(ks_two_sample(&a, &[10.0, 11.0]), 1.0);
        // F_a jumps to 1/2 at 1, F_b is still 0
        assert_eq!(ks_two_sample(&[1.0, 3.0], &[2.0, 4.0]), 0.5);
    }

    #[test]
    fn ks_handles_ties_across_samples() {
        // identical lattice laws with ties
        let a = [0.0, 0.0, 1.0, 1.0];
        let b = [0.0, 1.0];
        assert_eq!(ks_two_sample(&a, &b), 0.0);
    }

    #[test]
    fn critical_value_at_one_percent() {
        let c = ks_critical(0.01, 10_000, 10_000);
        assert!((c - 1.6276 * (2.0f64 / 10_000.0).sqrt()).abs() < 1e-5);
    }

    #[test]
    fn bootstrap_interval_brackets_variance() {
        let xs: Vec<f64> = (0..400).map(|i| (i % 7) as f64).collect();
        let (_, v) = mean_var(&xs);
        let (lo, hi) = bootstrap_var_ci(&xs, 200, 0.95, 1);
        assert!(lo <= v && v <= hi);
    }
}
