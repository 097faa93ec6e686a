//! Small statistical helpers on top of `statrs`.

use serde::Serialize;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

/// Pearson chi-square goodness of fit against the uniform distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChiSquareTest {
    pub samples: u64,
    pub bins: usize,
    pub statistic: f64,
    pub critical: f64,
    pub alpha: f64,
}

impl ChiSquareTest {
    pub fn pass(&self) -> bool {
        self.statistic <= self.critical
    }
}

pub fn chi_square_uniform(counts: &[u64], alpha: f64) -> ChiSquareTest {
    let bins = counts.len();
    let samples: u64 = counts.iter().sum();
    let expected = samples as f64 / bins as f64;
    let statistic = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    ChiSquareTest { samples, bins, statistic, critical: chi_square_quantile((bins - 1) as f64, 1.0 - alpha), alpha }
}

/// Quantile of the chi-square distribution. Bisection on the CDF; the
/// library inverse is only accurate to about one unit in the tails.
pub fn chi_square_quantile(dof: f64, q: f64) -> f64 {
    let dist = ChiSquared::new(dof).expect("positive dof");
    let (mut lo, mut hi) = (0.0, dof.max(1.0));
    while dist.cdf(hi) < q {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dist.cdf(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Two-sided acceptance interval for the success fraction of
/// `Binomial(n, p)` at confidence `level`.
pub fn binomial_interval(n: u64, p: f64, level: f64) -> (f64, f64) {
    let dist = Binomial::new(p, n).expect("valid binomial");
    let tail = (1.0 - level) / 2.0;
    let lo = dist.inverse_cdf(tail);
    let hi = dist.inverse_cdf(1.0 - tail);
    (lo as f64 / n as f64, hi as f64 / n as f64)
}

/// Standard error of a Bernoulli proportion estimate.
pub fn bernoulli_stderr(p: f64, n: u64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}
