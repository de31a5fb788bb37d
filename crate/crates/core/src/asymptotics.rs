//! Sampler for the weak-instrument limiting distributions of 2SLS, LIML, the
//! J test and the KP test under heteroskedasticity (`Π = C/√n`).
//!
//! One draw takes `(Ψ_Zu, vec Ψ_ZV) ~ N(0, Ω_Z)` and maps it through the
//! limiting expressions:
//!
//! * `G = Q C + Ψ_ZV`, `β̃_2SLS = (G'Q⁻¹G)⁻¹ G'Q⁻¹ Ψ_Zu`
//! * `α̃_L` = smallest generalized eigenvalue of `(Ξ'Q⁻¹Ξ, Σ*_V̄)` with
//!   `Ξ = [Gβ + Ψ_Zu, G]`
//! * `β̃_L = (G'Q⁻¹G − α̃Σ_V)⁻¹ (G'Q⁻¹Ψ_Zu − α̃Σ_Vu)`
//! * `Π̃_2SLS = Q⁻¹G`, `Π̃_L = Π̃_2SLS − Q⁻¹(Ψ_Zu − Gβ̃_L)(Σ_Vu − Σ_Vβ̃_L)'/d`
//!   with `d = σ_u² − 2β̃'Σ_Vu + β̃'Σ_Vβ̃`
//! * score statistics `g'Ω̄⁻¹g` with `g = S'(Ψ_Zu − Gβ̃)`,
//!   `S = E₂ − Π̃(Π̃'QΠ̃)⁻¹Π̃'QE₂` and
//!   `Ω̄ = S'[Ω_Zu − 2Σ_j β̃_j Ω_{Z,V_j u} + Σ_{jl} β̃_j β̃_l Ω_{Z,V_j V_l}]S`.
//!
//! β̃ is held fixed within a draw when the fourth-moment blocks are combined.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chisq::chi2_critical;
use crate::designs::{numeric_moments, population_moments, replication_rng, PopulationMoments, SimulationConfig};
use crate::error::{IvError, Result};
use crate::linalg::{
    column_matrix, inverse_quadratic_form, psd_factor, select_columns, smallest_generalized_eigen, solve_square,
    solve_square_vec, symmetrize,
};

/// Share of degenerate draws above which sampling is abandoned.
pub const MAX_DEGENERATE_SHARE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitModel {
    pub c: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub qzz: DMatrix<f64>,
    /// Joint covariance of `(Ψ_Zu, vec Ψ_ZV)`, blocks of size `k_z`.
    pub omega_z: DMatrix<f64>,
    pub sigma_v: DMatrix<f64>,
    pub sigma_vu: DVector<f64>,
    pub sigma_u2: f64,
    /// Columns of Z making up Z₂ in the score statistics.
    pub z2_cols: Vec<usize>,
}

impl LimitModel {
    pub fn kz(&self) -> usize {
        self.c.nrows()
    }

    pub fn kx(&self) -> usize {
        self.c.ncols()
    }

    /// `Σ*_V̄`, the second moments of the reduced-form errors `[u + Vβ, V]`.
    pub fn sigma_vbar(&self) -> DMatrix<f64> {
        let kx = self.kx();
        let sb = &self.sigma_v * &self.beta;
        let top = (self.beta.transpose() * &sb)[(0, 0)] + 2.0 * self.beta.dot(&self.sigma_vu) + self.sigma_u2;
        let cross = &sb + &self.sigma_vu;
        DMatrix::from_fn(kx + 1, kx + 1, |i, j| match (i, j) {
            (0, 0) => top,
            (0, j) => cross[j - 1],
            (i, 0) => cross[i - 1],
            (i, j) => self.sigma_v[(i - 1, j - 1)],
        })
    }

    /// Block `(a, b)` of `Ω_Z`, with index 0 for u and `j + 1` for `V_j`.
    pub fn omega_block(&self, a: usize, b: usize) -> DMatrix<f64> {
        let kz = self.kz();
        self.omega_z.view((a * kz, b * kz), (kz, kz)).into_owned()
    }

    /// Selection matrix `E₂` of the Z₂ columns.
    pub fn e2(&self) -> DMatrix<f64> {
        select_columns(&DMatrix::identity(self.kz(), self.kz()), &self.z2_cols)
    }

    /// `Q₂ = Q_ZZ E₂`.
    pub fn q2(&self) -> DMatrix<f64> {
        &self.qzz * self.e2()
    }

    /// `Q₂₂ = E₂' Q_ZZ E₂`.
    pub fn q22(&self) -> DMatrix<f64> {
        let e2 = self.e2();
        e2.transpose() * &self.qzz * e2
    }

    pub fn validate(&self) -> Result<()> {
        let (kz, kx) = self.c.shape();
        let m = (kx + 1) * kz;
        if kz <= kx
            || self.beta.len() != kx
            || self.qzz.shape() != (kz, kz)
            || self.omega_z.shape() != (m, m)
            || self.sigma_v.shape() != (kx, kx)
            || self.sigma_vu.len() != kx
            || self.z2_cols.len() != kz - kx
            || self.z2_cols.iter().any(|&c| c >= kz)
        {
            return Err(IvError::Dimension("limit model blocks have inconsistent dimensions".into()));
        }
        let asym = (&self.omega_z - self.omega_z.transpose()).amax();
        if asym > 1e-10 * self.omega_z.amax().max(1.0) {
            return Err(IvError::Domain("Ω_Z is not symmetric".into()));
        }
        Ok(())
    }
}

/// Limit model matching a simulation design, with `Q_ZZ = I`, `β = 0` and
/// `C = π√n·1`. The power design is mapped to its null moments.
pub fn model_from_design(config: &SimulationConfig) -> Result<LimitModel> {
    config.validate()?;
    let moments = population_moments(config.design.null(), config.kz, config.rho);
    Ok(model_from_moments(config, &moments))
}

/// As [`model_from_design`] but with moments taken by numeric expectation;
/// also returns the largest Monte Carlo standard error of the moments.
pub fn model_from_design_numeric(config: &SimulationConfig, draws: usize, seed: u64) -> Result<(LimitModel, f64)> {
    config.validate()?;
    let (moments, se) = numeric_moments(config.design.null(), config.kz, config.rho, draws, seed);
    Ok((model_from_moments(config, &moments), se))
}

fn model_from_moments(config: &SimulationConfig, m: &PopulationMoments) -> LimitModel {
    let kz = config.kz;
    let pi = config.pi();
    LimitModel {
        c: DMatrix::from_element(kz, 1, pi * (config.n as f64).sqrt()),
        beta: DVector::zeros(1),
        qzz: DMatrix::identity(kz, kz),
        omega_z: m.omega_z.clone(),
        sigma_v: DMatrix::from_element(1, 1, m.sigma_v),
        sigma_vu: DVector::from_element(1, m.sigma_vu),
        sigma_u2: m.sigma_u2,
        z2_cols: (1..kz).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitDraw {
    pub psi_zu: DVector<f64>,
    pub psi_zv: DMatrix<f64>,
    pub alpha_l: f64,
    pub beta_2sls: DVector<f64>,
    pub beta_liml: DVector<f64>,
    pub pi_2sls: DMatrix<f64>,
    pub pi_liml: DMatrix<f64>,
    pub j_limit: f64,
    pub kp_limit: f64,
}

/// Quantities shared by every draw of a model.
pub struct LimitSampler {
    model: LimitModel,
    factor: DMatrix<f64>,
    qinv: DMatrix<f64>,
    qc: DMatrix<f64>,
    sigma_vbar: DMatrix<f64>,
    e2: DMatrix<f64>,
    blocks: Vec<Vec<DMatrix<f64>>>,
}

impl LimitSampler {
    pub fn new(model: LimitModel) -> Result<Self> {
        model.validate()?;
        let kz = model.kz();
        let factor = psd_factor(&model.omega_z, "Ω_Z")?;
        let qinv = solve_square(&model.qzz, &DMatrix::identity(kz, kz), "Q_ZZ")?;
        let kx = model.kx();
        let blocks = (0..=kx).map(|a| (0..=kx).map(|b| model.omega_block(a, b)).collect()).collect();
        Ok(Self {
            qc: &model.qzz * &model.c,
            sigma_vbar: model.sigma_vbar(),
            e2: model.e2(),
            factor,
            qinv,
            blocks,
            model,
        })
    }

    pub fn model(&self) -> &LimitModel {
        &self.model
    }

    /// One draw; a `SingularityError` marks a degenerate draw.
    pub fn draw(&self, rng: &mut impl Rng) -> Result<LimitDraw> {
        let m = &self.model;
        let (kz, kx) = (m.kz(), m.kx());
        let xi = DVector::from_fn(self.factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let psi = &self.factor * xi;
        let psi_zu = psi.rows(0, kz).into_owned();
        let psi_zv = DMatrix::from_fn(kz, kx, |i, j| psi[(j + 1) * kz + i]);

        let g = &self.qc + &psi_zv;
        let qig = &self.qinv * &g;
        let gqg = g.transpose() * &qig;
        let gqu = qig.transpose() * &psi_zu;
        let beta_2sls = solve_square_vec(&gqg, &gqu, "G'Q⁻¹G")?;

        let mut xi_bar = DMatrix::zeros(kz, kx + 1);
        xi_bar.set_column(0, &(&g * &m.beta + &psi_zu));
        xi_bar.columns_mut(1, kx).copy_from(&g);
        let a = xi_bar.transpose() * &self.qinv * &xi_bar;
        let (alpha_raw, _) = smallest_generalized_eigen(&a, &self.sigma_vbar, "Σ*_V̄")?;
        let alpha_l = alpha_raw.max(0.0);
        let beta_liml =
            solve_square_vec(&(&gqg - &m.sigma_v * alpha_l), &(&gqu - &m.sigma_vu * alpha_l), "G'Q⁻¹G − α̃Σ_V")?;

        let pi_2sls = qig.clone();
        let resid_l = &psi_zu - &g * &beta_liml;
        let cov_l = &m.sigma_vu - &m.sigma_v * &beta_liml;
        let den =
            m.sigma_u2 - 2.0 * beta_liml.dot(&m.sigma_vu) + (beta_liml.transpose() * &m.sigma_v * &beta_liml)[(0, 0)];
        if den.is_nan() || den <= 1e-12 * m.sigma_u2.abs().max(1.0) {
            return Err(IvError::Singularity("LIML first-stage denominator is not positive".into()));
        }
        let pi_liml = &pi_2sls - &self.qinv * column_matrix(&resid_l) * cov_l.transpose() / den;

        let j_limit = self.score(&g, &psi_zu, &beta_2sls, &pi_2sls)?;
        let kp_limit = self.score(&g, &psi_zu, &beta_liml, &pi_liml)?;
        Ok(LimitDraw { psi_zu, psi_zv, alpha_l, beta_2sls, beta_liml, pi_2sls, pi_liml, j_limit, kp_limit })
    }

    fn annihilator(&self, pi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let q = &self.model.qzz;
        let qpi = q * pi;
        let inner = pi.transpose() * &qpi;
        let coef = solve_square(&inner, &(qpi.transpose() * &self.e2), "Π̃'QΠ̃")?;
        Ok(&self.e2 - pi * coef)
    }

    fn score(&self, g: &DMatrix<f64>, psi_zu: &DVector<f64>, beta: &DVector<f64>, pi: &DMatrix<f64>) -> Result<f64> {
        let s = self.annihilator(pi)?;
        let num = s.transpose() * (psi_zu - g * beta);
        let kx = beta.len();
        let mut mix = self.blocks[0][0].clone();
        for j in 0..kx {
            mix -= (&self.blocks[j + 1][0] + &self.blocks[0][j + 1]) * beta[j];
            for l in 0..kx {
                mix += &self.blocks[j + 1][l + 1] * (beta[j] * beta[l]);
            }
        }
        let omega_bar = symmetrize(&(s.transpose() * mix * &s));
        let stat = inverse_quadratic_form(&omega_bar, &num, "limit score variance")?;
        Ok(stat.max(0.0))
    }

    /// Draw `index` of a run keyed by `seed`. Degenerate draws are redrawn
    /// from the same stream; returns the draw and the number of rejections.
    pub fn draw_indexed(&self, seed: u64, index: u64) -> (Result<LimitDraw>, usize) {
        let mut rng = replication_rng(seed, index);
        let mut rejected = 0;
        loop {
            match self.draw(&mut rng) {
                Err(IvError::Singularity(_)) if rejected < 100 => rejected += 1,
                other => return (other, rejected),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSample {
    pub draws: Vec<LimitDraw>,
    pub degenerate: usize,
}

/// `n_draws` draws in parallel; the result depends only on `(model, seed)`.
pub fn sample_limit(model: &LimitModel, n_draws: usize, seed: u64) -> Result<LimitSample> {
    let sampler = LimitSampler::new(model.clone())?;
    let results: Vec<(Result<LimitDraw>, usize)> =
        (0..n_draws as u64).into_par_iter().map(|i| sampler.draw_indexed(seed, i)).collect();
    let mut draws = Vec::with_capacity(n_draws);
    let mut degenerate = 0;
    for (r, rej) in results {
        degenerate += rej;
        draws.push(r?);
    }
    if degenerate as f64 > MAX_DEGENERATE_SHARE * n_draws as f64 {
        return Err(IvError::Singularity(format!(
            "{degenerate} degenerate limit draws out of {n_draws} exceed the 1% cap"
        )));
    }
    Ok(LimitSample { draws, degenerate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitRates {
    pub level: f64,
    pub j_rate: f64,
    pub kp_rate: f64,
    pub draws: usize,
    pub degenerate: usize,
}

/// Fractions of limit draws of J and KP above the χ²(k_z − k_x) critical
/// value at `level`.
pub fn limit_rejection_rate(model: &LimitModel, n_draws: usize, level: f64, seed: u64) -> Result<LimitRates> {
    if n_draws < 1000 {
        return Err(IvError::Config(format!("need at least 1000 limit draws, got {n_draws}")));
    }
    let sample = sample_limit(model, n_draws, seed)?;
    rates_from_sample(&sample, model.kz() - model.kx(), level)
}

pub fn rates_from_sample(sample: &LimitSample, df: usize, level: f64) -> Result<LimitRates> {
    let crit = chi2_critical(level, df)?;
    let n = sample.draws.len() as f64;
    let j = sample.draws.iter().filter(|d| d.j_limit > crit).count() as f64 / n;
    let kp = sample.draws.iter().filter(|d| d.kp_limit > crit).count() as f64 / n;
    Ok(LimitRates { level, j_rate: j, kp_rate: kp, draws: sample.draws.len(), degenerate: sample.degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::designs::Design;
    use approx::assert_relative_eq;

    fn homoskedastic_model(kz: usize, c: f64, rho: f64) -> LimitModel {
        let corr = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        LimitModel {
            c: DMatrix::from_element(kz, 1, c),
            beta: DVector::zeros(1),
            qzz: DMatrix::identity(kz, kz),
            omega_z: corr.kronecker(&DMatrix::identity(kz, kz)),
            sigma_v: DMatrix::from_element(1, 1, 1.0),
            sigma_vu: DVector::from_element(1, rho),
            sigma_u2: 1.0,
            z2_cols: (1..kz).collect(),
        }
    }

    #[test]
    fn score_numerator_forms_agree() {
        let model = model_from_design(&SimulationConfig::new(Design::Design1 { alpha: 0.5 }, 3, 0.9, 4.0)).unwrap();
        let sampler = LimitSampler::new(model).unwrap();
        let mut rng = replication_rng(5, 0);
        for _ in 0..50 {
            let d = sampler.draw(&mut rng).unwrap();
            let g = &sampler.qc + &d.psi_zv;
            for (beta, pi) in [(&d.beta_2sls, &d.pi_2sls), (&d.beta_liml, &d.pi_liml)] {
                let resid = &d.psi_zu - &g * beta;
                let s = sampler.annihilator(pi).unwrap();
                let a = s.transpose() * &resid;
                let b = sampler.e2.transpose() * &resid;
                assert_relative_eq!(a, b, epsilon = 1e-9 * (1.0 + resid.norm()));
                // fitted limit regressors are orthogonal to the limit residual
                assert!((pi.transpose() * &resid).norm() < 1e-9 * (1.0 + resid.norm() * pi.norm()));
            }
        }
    }

    #[test]
    fn strong_instruments_concentrate_estimators() {
        let model = homoskedastic_model(2, 1e3, 0.5);
        let sample = sample_limit(&model, 2000, 3).unwrap();
        let close = |b: &DVector<f64>| b[0].abs() < 1e-2;
        let share_2sls = sample.draws.iter().filter(|d| close(&d.beta_2sls)).count() as f64 / 2000.0;
        let share_liml = sample.draws.iter().filter(|d| close(&d.beta_liml)).count() as f64 / 2000.0;
        assert!(share_2sls >= 0.99 && share_liml >= 0.99);
    }

    #[test]
    fn alpha_matches_central_wishart_minimum_eigenvalue() {
        let kz = 3;
        let model = homoskedastic_model(kz, 0.0, 0.6);
        let sample = sample_limit(&model, 200_000, 11).unwrap();
        let mean_limit = sample.draws.iter().map(|d| d.alpha_l).sum::<f64>() / 200_000.0;

        // oracle: smallest eigenvalue of A A' with A a 2 × k_z standard normal matrix
        let mut rng = replication_rng(99, 0);
        let draws = 1_000_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let a = DMatrix::<f64>::from_fn(2, kz, |_, _| rng.sample(StandardNormal));
            let w = &a * a.transpose();
            let (p, q, r) = (w[(0, 0)], w[(1, 1)], w[(0, 1)]);
            total += 0.5 * (p + q - ((p - q).powi(2) + 4.0 * r * r).sqrt());
        }
        let mean_oracle = total / draws as f64;
        assert!((mean_limit / mean_oracle - 1.0).abs() < 0.01, "{mean_limit} vs {mean_oracle}");
    }

    #[test]
    fn statistics_are_nonnegative_and_deterministic() {
        let cfg = SimulationConfig::new(Design::Design2 { alpha: 0.2 }, 4, 0.5, 2.0);
        let model = model_from_design(&cfg).unwrap();
        let a = sample_limit(&model, 500, 8).unwrap();
        let b = sample_limit(&model, 500, 8).unwrap();
        assert_eq!(a, b);
        assert!(a.draws.iter().all(|d| d.j_limit >= 0.0 && d.kp_limit >= 0.0 && d.alpha_l >= 0.0));
    }

    #[test]
    fn level_one_rejects_everything() {
        let model = homoskedastic_model(2, 2.0, 0.5);
        let r = limit_rejection_rate(&model, 1000, 1.0, 1).unwrap();
        assert_eq!((r.j_rate, r.kp_rate), (1.0, 1.0));
        assert!(limit_rejection_rate(&model, 10, 0.05, 1).is_err());
    }

    #[test]
    fn sigma_vbar_with_zero_beta() {
        let m = homoskedastic_model(2, 1.0, 0.3);
        let s = m.sigma_vbar();
        assert_relative_eq!(s, DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]), epsilon = 1e-15);
    }
}
