//! Monte Carlo designs: configuration, population moments, π calibration and
//! dataset generation.
//!
//! All designs share `y = βx + u`, `x = π Σ_j z_j + v` with β = 0, independent
//! standard-normal instruments and `(u*, v*)` jointly normal with unit
//! variances and correlation ρ. The designs differ in the skedastic function
//! `h(z)` scaling both errors:
//!
//! * Design 1: `h = |z₁|^α`
//! * Design 2: `h = exp(α Σ_j z_j / 2)`
//! * Power: Design 1 plus a direct instrument effect, `u = z₁ω + |z₁|^α u*`

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{IvError, Result};
use crate::model::IvDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Design {
    Design1 { alpha: f64 },
    Design2 { alpha: f64 },
    Power { alpha: f64, omega: f64 },
}

impl Design {
    fn alpha(&self) -> f64 {
        match *self {
            Design::Design1 { alpha } | Design::Design2 { alpha } | Design::Power { alpha, .. } => alpha,
        }
    }

    fn omega(&self) -> f64 {
        match *self {
            Design::Power { omega, .. } => omega,
            _ => 0.0,
        }
    }

    /// The same design with the direct instrument effect switched off.
    pub fn null(&self) -> Design {
        match *self {
            Design::Power { alpha, .. } => Design::Power { alpha, omega: 0.0 },
            d => d,
        }
    }

    /// Skedastic multiplier `h(z)` for one instrument row.
    pub fn skedastic(&self, z: &[f64]) -> f64 {
        match *self {
            Design::Design1 { alpha } | Design::Power { alpha, .. } => z[0].abs().powf(alpha),
            Design::Design2 { alpha } => (0.5 * alpha * z.iter().sum::<f64>()).exp(),
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Design::Design1 { alpha } => write!(f, "1:{alpha}"),
            Design::Design2 { alpha } => write!(f, "2:{alpha}"),
            Design::Power { alpha, omega } => write!(f, "power:{alpha},{omega}"),
        }
    }
}

impl FromStr for Design {
    type Err = IvError;

    /// Parses `1:A`, `2:A` or `power:A,W`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || IvError::Config(format!("unknown design '{s}', expected 1:A, 2:A or power:A,W"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        let d = match kind.trim() {
            "1" => Design::Design1 { alpha: num(rest)? },
            "2" => Design::Design2 { alpha: num(rest)? },
            "power" => {
                let (a, w) = rest.split_once(',').ok_or_else(bad)?;
                Design::Power { alpha: num(a)?, omega: num(w)? }
            }
            _ => return Err(bad()),
        };
        if !(d.alpha() >= 0.0 && d.alpha().is_finite() && d.omega().is_finite()) {
            return Err(IvError::Config(format!("design parameters out of range in '{s}'")));
        }
        Ok(d)
    }
}

/// How `μ²` is mapped to the first-stage coefficient π.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    /// `𝒱_ZV = k_z E[v²]`: the homoskedastic formula with the unconditional
    /// first-stage error variance. Reproduces the published tables.
    #[default]
    Variance,
    /// `𝒱_ZV = tr(E[v² zz'])`, the heteroskedastic concentration parameter.
    Moments,
}

impl fmt::Display for Calibration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Calibration::Variance => "variance",
            Calibration::Moments => "moments",
        })
    }
}

impl FromStr for Calibration {
    type Err = IvError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "variance" => Ok(Calibration::Variance),
            "moments" => Ok(Calibration::Moments),
            _ => Err(IvError::Config(format!("unknown calibration '{s}', expected variance or moments"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub design: Design,
    pub n: usize,
    pub kz: usize,
    pub rho: f64,
    pub mu2_target: f64,
    pub replications: usize,
    pub seed: u64,
    pub levels: Vec<f64>,
    /// Include a constant in the regressions and partial it out.
    pub intercept: bool,
    #[serde(default)]
    pub calibration: Calibration,
}

impl SimulationConfig {
    pub fn new(design: Design, kz: usize, rho: f64, mu2_target: f64) -> Self {
        Self {
            design,
            n: 120,
            kz,
            rho,
            mu2_target,
            replications: 20_000,
            seed: 1,
            levels: vec![0.10, 0.05, 0.01],
            intercept: true,
            calibration: Calibration::Variance,
        }
    }

    /// First-stage coefficient π for this configuration.
    pub fn pi(&self) -> f64 {
        calibrate_pi_with(self.design, self.kz, self.rho, self.mu2_target, self.n, self.calibration)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kz < 2 {
            return Err(IvError::Config(format!("k_z must be at least 2, got {}", self.kz)));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(IvError::Config(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        if !(self.mu2_target >= 0.0 && self.mu2_target.is_finite()) {
            return Err(IvError::Config(format!("mu2 must be finite and >= 0, got {}", self.mu2_target)));
        }
        if self.replications == 0 {
            return Err(IvError::Config("replications must be positive".into()));
        }
        if self.n <= self.kz + 1 + usize::from(self.intercept) {
            return Err(IvError::Config(format!("n = {} is too small for k_z = {}", self.n, self.kz)));
        }
        if self.levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(IvError::Config("levels must lie in [0, 1]".into()));
        }
        match self.design {
            Design::Design1 { alpha } | Design::Design2 { alpha } | Design::Power { alpha, .. }
                if !(alpha >= 0.0 && alpha.is_finite()) =>
            {
                Err(IvError::Config(format!("heteroskedasticity parameter must be >= 0, got {alpha}")))
            }
            _ => Ok(()),
        }
    }
}

/// Population second and fourth moments of a design under the null, with
/// `Q_ZZ = I`. `omega_z` is ordered `[u; V]` in blocks of `k_z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationMoments {
    /// `E[h(z)² z z']`.
    pub m: DMatrix<f64>,
    /// `E[h(z)²]`.
    pub h2: f64,
    pub rho: f64,
    pub omega_z: DMatrix<f64>,
    pub sigma_u2: f64,
    pub sigma_v: f64,
    pub sigma_vu: f64,
}

impl PopulationMoments {
    fn from_parts(m: DMatrix<f64>, h2: f64, rho: f64) -> Self {
        let corr = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        Self { omega_z: corr.kronecker(&m), sigma_u2: h2, sigma_v: h2, sigma_vu: rho * h2, m, h2, rho }
    }

    /// `𝒱_ZV` for the scalar-regressor designs: `tr(Ω_ZV)` since `Q_ZZ = I`.
    pub fn v_zv(&self) -> f64 {
        self.m.trace()
    }
}

/// `E|z|^p` for standard normal `z`: `2^{p/2} Γ((p+1)/2) / √π`.
pub fn abs_normal_moment(p: f64) -> f64 {
    (0.5 * p * 2f64.ln() + ln_gamma(0.5 * (p + 1.0)) - 0.5 * std::f64::consts::PI.ln()).exp()
}

/// Closed-form population moments. The power design uses its null (ω = 0)
/// moments.
pub fn population_moments(design: Design, kz: usize, rho: f64) -> PopulationMoments {
    match design {
        Design::Design1 { alpha } | Design::Power { alpha, .. } => {
            let base = abs_normal_moment(2.0 * alpha);
            let mut m = DMatrix::from_diagonal_element(kz, kz, base);
            m[(0, 0)] = abs_normal_moment(2.0 * alpha + 2.0);
            PopulationMoments::from_parts(m, base, rho)
        }
        Design::Design2 { alpha } => {
            // E[exp(a'z) z z'] = exp(|a|²/2)(I + aa') with a = α·1
            let scale = (0.5 * kz as f64 * alpha * alpha).exp();
            let m = (DMatrix::identity(kz, kz) + DMatrix::from_element(kz, kz, alpha * alpha)) * scale;
            PopulationMoments::from_parts(m, scale, rho)
        }
    }
}

/// Monte Carlo estimate of the population moments from `draws` instrument
/// vectors, returned with the largest standard error over the entries of
/// `E[h² zz']` and `E[h²]`.
pub fn numeric_moments(design: Design, kz: usize, rho: f64, draws: usize, seed: u64) -> (PopulationMoments, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k2 = kz * kz + 1;
    let mut sum = vec![0.0; k2];
    let mut sumsq = vec![0.0; k2];
    let mut z = vec![0.0; kz];
    for _ in 0..draws {
        for zj in z.iter_mut() {
            *zj = rng.sample(StandardNormal);
        }
        let h2 = design.skedastic(&z).powi(2);
        for a in 0..kz {
            for b in 0..kz {
                let v = h2 * z[a] * z[b];
                sum[a * kz + b] += v;
                sumsq[a * kz + b] += v * v;
            }
        }
        sum[kz * kz] += h2;
        sumsq[kz * kz] += h2 * h2;
    }
    let nd = draws as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nd).collect();
    let se = (0..k2).map(|i| ((sumsq[i] / nd - mean[i] * mean[i]).max(0.0) / nd).sqrt()).fold(0.0, f64::max);
    let m = DMatrix::from_fn(kz, kz, |a, b| mean[a * kz + b]);
    (PopulationMoments::from_parts(m, mean[kz * kz], rho), se)
}

/// Common first-stage coefficient π giving population concentration `mu2`:
/// `π = sqrt(μ² 𝒱_ZV / (k_z² n))`.
pub fn calibrate_pi(design: Design, kz: usize, rho: f64, mu2: f64, n: usize) -> f64 {
    calibrate_pi_with(design, kz, rho, mu2, n, Calibration::Moments)
}

pub fn calibrate_pi_with(design: Design, kz: usize, rho: f64, mu2: f64, n: usize, calibration: Calibration) -> f64 {
    if mu2 <= 0.0 {
        return 0.0;
    }
    let p = population_moments(design, kz, rho);
    let v = match calibration {
        Calibration::Moments => p.v_zv(),
        Calibration::Variance => kz as f64 * p.sigma_v,
    };
    (mu2 * v / ((kz * kz) as f64 * n as f64)).sqrt()
}

/// Random stream for one replication, independent of execution order.
pub fn replication_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws one dataset of the design. With `config.intercept` a constant column
/// is attached as an exogenous control.
pub fn generate_dataset(config: &SimulationConfig, pi: f64, rng: &mut impl Rng) -> Result<IvDataset> {
    let (n, kz, rho) = (config.n, config.kz, config.rho);
    let omega = config.design.omega();
    let c = (1.0 - rho * rho).sqrt();
    let mut z = DMatrix::zeros(n, kz);
    let mut x = DMatrix::zeros(n, 1);
    let mut y = DVector::zeros(n);
    let mut row = vec![0.0; kz];
    for i in 0..n {
        for (j, r) in row.iter_mut().enumerate() {
            *r = rng.sample(StandardNormal);
            z[(i, j)] = *r;
        }
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let h = config.design.skedastic(&row);
        let u = h * e1 + omega * row[0];
        let v = h * (rho * e1 + c * e2);
        x[(i, 0)] = pi * row.iter().sum::<f64>() + v;
        y[i] = u;
    }
    let exog = config.intercept.then(|| DMatrix::from_element(n, 1, 1.0));
    Ok(IvDataset { y, x, z, exog })
}
