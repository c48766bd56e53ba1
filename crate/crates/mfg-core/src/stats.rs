//! Small statistical helpers shared by the solvers and their tests.

use crate::rng::{substream, tag};
use rand::Rng;

/// Sample mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value
/// (Stephens' small-sample correction for the effective size).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    xb.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    let (n, m) = (xa.len(), xb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = xa[i].min(xb[j]);
        while i < n && xa[i] <= x {
            i += 1;
        }
        while j < m && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n as f64 * m as f64) / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..101 {
        let term = 2.0 * (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        p += if k % 2 == 1 { term } else { -term };
    }
    (d, p.clamp(0.0, 1.0))
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci_mean(xs: &[f64], resamples: usize, level: f64, seed: u64) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mut means: Vec<f64> = (0..resamples)
        .map(|r| {
            let mut rng = substream(seed, tag::BOOTSTRAP, r as u64);
            (0..n).map(|_| xs[rng.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    means.sort_by(|x, y| x.partial_cmp(y).expect("finite means"));
    let alpha = (1.0 - level) / 2.0;
    let lo = means[((resamples as f64 * alpha) as usize).min(resamples - 1)];
    let hi = means[((resamples as f64 * (1.0 - alpha)) as usize).min(resamples - 1)];
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn ks_accepts_same_distribution_and_rejects_shifted() {
        let mut rng = substream(1, tag::EVAL, 0);
        let a: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let c: Vec<f64> = b.iter().map(|x| x + 0.5).collect();
        let (_, p_same) = ks_two_sample(&a, &b);
        let (_, p_diff) = ks_two_sample(&a, &c);
        assert!(p_same > 0.01, "p {p_same}");
        assert!(p_diff < 1e-6, "p {p_diff}");
    }

    #[test]
    fn bootstrap_brackets_the_mean() {
        let mut rng = substream(2, tag::EVAL, 0);
        let xs: Vec<f64> = (0..500).map(|_| 3.0 + rng.sample::<f64, _>(StandardNormal)).collect();
        let (lo, hi) = bootstrap_ci_mean(&xs, 500, 0.95, 7);
        let (mean, _) = mean_se(&xs);
        assert!(lo < mean && mean < hi);
        assert!(lo > 2.5 && hi < 3.5);
    }
}
