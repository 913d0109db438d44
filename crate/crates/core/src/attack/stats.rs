//! Campaign statistics.

use statrs::distribution::{DiscreteCDF, Poisson};

/// `(empirical - analytic) / sqrt(analytic (1 - analytic) / trials)`;
/// `None` when the analytic rate is 0 or 1 and the deviation is undefined.
pub fn z_score(empirical: f64, analytic: f64, trials: u64) -> Option<f64> {
    let var = analytic * (1.0 - analytic) / trials as f64;
    (var > 0.0).then(|| (empirical - analytic) / var.sqrt())
}

/// Smallest `k` with `P(X <= k) >= confidence` for `X ~ Poisson(lambda)`.
pub fn poisson_upper_bound(lambda: f64, confidence: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    let dist = Poisson::new(lambda).expect("positive rate");
    let mut k = lambda.floor() as u64;
    while k > 0 && dist.cdf(k - 1) >= confidence {
        k -= 1;
    }
    while dist.cdf(k) < confidence {
        k += 1;
    }
    k
}

/// Standard deviation of a binomial proportion.
pub fn proportion_sigma(p: f64, n: u64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}
