//! Summary statistics and the hypothesis tests used by the bench.

use statrs::distribution::{Beta, Binomial, ContinuousCDF, DiscreteCDF};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; `None` below two values.
pub fn std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignTest {
    pub positive: u64,
    pub negative: u64,
    pub ties: u64,
    /// Two-sided exact binomial p-value over the non-tied pairs.
    pub p_two_sided: f64,
    /// One-sided p-value for "positive differences dominate".
    pub p_greater: f64,
}

pub fn sign_test(diffs: &[f64]) -> SignTest {
    let positive = diffs.iter().filter(|&&d| d > 0.0).count() as u64;
    let negative = diffs.iter().filter(|&&d| d < 0.0).count() as u64;
    let ties = diffs.len() as u64 - positive - negative;
    let n = positive + negative;
    if n == 0 {
        return SignTest {
            positive,
            negative,
            ties,
            p_two_sided: 1.0,
            p_greater: 1.0,
        };
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    let tail = |k: u64| if k == 0 { 1.0 } else { b.sf(k - 1) };
    let p_greater = tail(positive);
    let p_two_sided = (2.0 * tail(positive.max(negative))).min(1.0);
    SignTest {
        positive,
        negative,
        ties,
        p_two_sided,
        p_greater,
    }
}

/// Beta quantile by bisection on the CDF; `inverse_cdf` in statrs stops near 1e-5.
fn beta_quantile(a: f64, b: f64, p: f64) -> f64 {
    let dist = Beta::new(a, b).expect("valid beta");
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if dist.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Clopper–Pearson interval for `successes` out of `n` at confidence `1 − alpha`.
pub fn binomial_ci(successes: u64, n: u64, alpha: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let (k, n) = (successes as f64, n as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        beta_quantile(k, n - k + 1.0, alpha / 2.0)
    };
    let hi = if successes as f64 == n {
        1.0
    } else {
        beta_quantile(k + 1.0, n - k, 1.0 - alpha / 2.0)
    };
    (lo, hi)
}
