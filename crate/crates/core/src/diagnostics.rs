//! Chain summaries: effective sample size, HPD intervals, R-hat.

use crate::error::{Error, Result};

pub const MIN_SERIES: usize = 10;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with the n − 1 divisor.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn autocovariance(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for t in 0..n - lag {
        s += (x[t] - m) * (x[t + lag] - m);
    }
    s / n as f64
}

/// n / (1 + 2 Σ ρ_t), with autocorrelations summed in adjacent pairs until the
/// first pair with a non-positive sum. A constant series has ESS 1.
pub fn ess(x: &[f64]) -> Result<f64> {
    let n = x.len();
    if n < MIN_SERIES {
        return Err(Error::TooShortSeries(n));
    }
    let m = mean(x);
    let g0 = autocovariance(x, m, 0);
    if !(g0 > 0.0) {
        return Ok(1.0);
    }
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = (autocovariance(x, m, lag) + autocovariance(x, m, lag + 1)) / g0;
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    Ok(n as f64 / tau.max(1.0 / n as f64))
}

/// Shortest interval holding a `mass` fraction of the draws.
pub fn hpd_interval(x: &[f64], mass: f64) -> Result<(f64, f64)> {
    if x.is_empty() {
        return Err(Error::TooShortSeries(0));
    }
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::InvalidParameter(format!("interval mass {mass} must lie in (0, 1]")));
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let k = ((mass * n as f64).ceil() as usize).clamp(1, n);
    let mut best = (s[0], s[k - 1]);
    for i in 1..=n - k {
        if s[i + k - 1] - s[i] < best.1 - best.0 {
            best = (s[i], s[i + k - 1]);
        }
    }
    Ok(best)
}

/// Posterior probability of the sign held by the majority of draws.
pub fn sign_probability(x: &[f64]) -> f64 {
    let pos = x.iter().filter(|v| **v > 0.0).count() as f64 / x.len() as f64;
    pos.max(1.0 - pos)
}

/// Fraction of draws above zero.
pub fn positive_fraction(x: &[f64]) -> f64 {
    x.iter().filter(|v| **v > 0.0).count() as f64 / x.len() as f64
}

/// Potential scale reduction across equal-length chains.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::InvalidParameter("R-hat needs at least two chains".into()));
    }
    let n = chains[0].len();
    if n < 2 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidParameter("R-hat needs equal-length chains".into()));
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let b = n as f64 / (m as f64 - 1.0) * means.iter().map(|v| (v - grand).powi(2)).sum::<f64>();
    let w = chains.iter().map(|c| variance(c)).sum::<f64>() / m as f64;
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    Ok((var_plus / w).sqrt())
}
