//! Meat matrices `Z'HZ` for sandwich variances and robust tests.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IvError, Result};

/// Which residual covariance structure the meat matrix assumes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceSpec {
    Homoskedastic,
    #[default]
    Hc0,
    /// HC0 scaled by `n / (n - k)`, with `k` the number of endogenous regressors.
    Hc1 {
        k: usize,
    },
    /// Bartlett-weighted autocovariances up to `lags`, no degrees-of-freedom correction.
    NeweyWest {
        lags: usize,
    },
}

impl CovarianceSpec {
    /// Parses `homo`, `hc0`, `hc1` or `nw:L`; `kx` feeds the HC1 correction.
    pub fn parse(s: &str, kx: usize) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "homo" | "homoskedastic" => Ok(CovarianceSpec::Homoskedastic),
            "hc0" => Ok(CovarianceSpec::Hc0),
            "hc1" => Ok(CovarianceSpec::Hc1 { k: kx }),
            _ => {
                let lags = s
                    .strip_prefix("nw:")
                    .and_then(|l| l.parse::<usize>().ok())
                    .ok_or_else(|| IvError::Config(format!("unknown covariance spec '{s}'")))?;
                Ok(CovarianceSpec::NeweyWest { lags })
            }
        }
    }
}

impl fmt::Display for CovarianceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovarianceSpec::Homoskedastic => write!(f, "homo"),
            CovarianceSpec::Hc0 => write!(f, "hc0"),
            CovarianceSpec::Hc1 { .. } => write!(f, "hc1"),
            CovarianceSpec::NeweyWest { lags } => write!(f, "nw:{lags}"),
        }
    }
}

/// Meat matrix built from regressors `z` (n × k) and residuals `u`.
pub fn meat(z: &DMatrix<f64>, u: &DVector<f64>, spec: CovarianceSpec) -> Result<DMatrix<f64>> {
    let n = z.nrows();
    if u.len() != n {
        return Err(IvError::Dimension(format!("meat: Z has {n} rows but residuals have length {}", u.len())));
    }
    if n <= z.ncols() {
        return Err(IvError::Dimension(format!("meat: need n > k, got n = {n}, k = {}", z.ncols())));
    }
    let out = match spec {
        CovarianceSpec::Homoskedastic => z.transpose() * z * (u.norm_squared() / n as f64),
        CovarianceSpec::Hc0 => hc0(z, u),
        CovarianceSpec::Hc1 { k } => {
            if k >= n {
                return Err(IvError::Dimension("HC1: k must be below n".into()));
            }
            hc0(z, u) * (n as f64 / (n - k) as f64)
        }
        CovarianceSpec::NeweyWest { lags } => {
            let zu = scaled_rows(z, u);
            let mut s = zu.transpose() * &zu;
            for l in 1..=lags.min(n - 1) {
                let w = 1.0 - l as f64 / (lags as f64 + 1.0);
                let lead = zu.rows(l, n - l);
                let lag = zu.rows(0, n - l);
                let gamma = lead.transpose() * lag;
                s += (&gamma + gamma.transpose()) * w;
            }
            s
        }
    };
    Ok((&out + out.transpose()) * 0.5)
}

fn scaled_rows(z: &DMatrix<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let mut zu = z.clone();
    for (i, mut row) in zu.row_iter_mut().enumerate() {
        row *= u[i];
    }
    zu
}

fn hc0(z: &DMatrix<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let zu = scaled_rows(z, u);
    zu.transpose() * zu
}
