//! Central and noncentral chi-square tail probabilities and quantiles.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{IvError, Result};

/// Upper-tail probability `P(χ²(df) > x)`.
pub fn chi2_sf(x: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(IvError::Domain("chi-square degrees of freedom must be positive".into()));
    }
    if !x.is_finite() {
        if x == f64::INFINITY {
            return Ok(0.0);
        }
        return Err(IvError::Domain(format!("chi-square argument must be finite, got {x}")));
    }
    if x < 0.0 {
        return Err(IvError::Domain(format!("chi-square argument must be >= 0, got {x}")));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    Ok(gamma_ur(df as f64 / 2.0, x / 2.0))
}

/// Critical value `c` with `P(χ²(df) > c) = level`. Returns `-∞` for
/// `level >= 1` (everything rejects) and `+∞` for `level <= 0`.
pub fn chi2_critical(level: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(IvError::Domain("chi-square degrees of freedom must be positive".into()));
    }
    if level >= 1.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if level <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let dist = ChiSquared::new(df as f64).map_err(|e| IvError::Domain(e.to_string()))?;
    let mut c = dist.inverse_cdf(1.0 - level);
    // polish with Newton steps on the survival function
    for _ in 0..4 {
        let f = gamma_ur(df as f64 / 2.0, c / 2.0) - level;
        let dens = chi2_density(c, df as f64);
        if dens <= 0.0 || !dens.is_finite() {
            break;
        }
        c += f / dens;
    }
    Ok(c)
}

fn chi2_density(x: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let h = k / 2.0;
    ((h - 1.0) * x.ln() - x / 2.0 - h * 2f64.ln() - ln_gamma(h)).exp()
}

/// CDF of the noncentral chi-square with real `df > 0` and noncentrality
/// `nc >= 0`, as a Poisson(nc/2) mixture of central chi-squares.
pub fn noncentral_chi2_cdf(x: f64, df: f64, nc: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let half = nc / 2.0;
    if half == 0.0 {
        return gamma_lr(df / 2.0, x / 2.0);
    }
    let mode = half.floor() as i64;
    let ln_weight = |j: i64| -half + j as f64 * half.ln() - ln_gamma(j as f64 + 1.0);
    let term = |j: i64| ln_weight(j).exp() * gamma_lr(df / 2.0 + j as f64, x / 2.0);
    let mut total = term(mode);
    let mut j = mode + 1;
    loop {
        let w = ln_weight(j).exp();
        total += w * gamma_lr(df / 2.0 + j as f64, x / 2.0);
        if w < 1e-17 {
            break;
        }
        j += 1;
    }
    let mut j = mode - 1;
    while j >= 0 {
        let w = ln_weight(j).exp();
        total += term(j);
        if w < 1e-17 {
            break;
        }
        j -= 1;
    }
    total.clamp(0.0, 1.0)
}

/// Quantile of the noncentral chi-square, found by bracketing and bisection.
pub fn noncentral_chi2_quantile(p: f64, df: f64, nc: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) || df <= 0.0 || nc < 0.0 {
        return Err(IvError::Domain(format!(
            "noncentral chi-square quantile needs p in [0,1), df > 0, nc >= 0; got {p}, {df}, {nc}"
        )));
    }
    let mut lo = 0.0;
    let mut hi = (df + nc).max(1.0);
    while noncentral_chi2_cdf(hi, df, nc) < p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if noncentral_chi2_cdf(mid, df, nc) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
