//! k-class (2SLS, LIML) and two-step GMM point estimators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{meat, CovarianceSpec};
use crate::error::{IvError, Result};
use crate::linalg::{
    cholesky, column_matrix, has_full_column_rank, least_squares, smallest_generalized_eigen, solve_square,
    solve_square_vec, symmetrize, RANK_TOL,
};
use crate::model::IvDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "alpha", rename_all = "snake_case")]
pub enum Method {
    TwoSls,
    Liml,
    KClass(f64),
    Gmm2,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::TwoSls => "2sls".into(),
            Method::Liml => "liml".into(),
            Method::KClass(a) => format!("kclass:{a}"),
            Method::Gmm2 => "gmm2".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub beta_hat: DVector<f64>,
    pub alpha: f64,
    pub residuals: DVector<f64>,
    /// First-stage coefficients matched to the estimator (Π̂_2SLS or Π̂_L).
    pub pi_hat: DMatrix<f64>,
    pub method: Method,
    /// `A` (k_z × k_x) such that the estimator solves `A'Z'(y - Xβ) ≈ 0`;
    /// used for sandwich standard errors.
    pub moment_weights: DMatrix<f64>,
}

/// Orthonormal basis `Q` of the instrument span, so `P_Z = QQ'`.
pub(crate) struct InstrumentBasis {
    q: DMatrix<f64>,
}

impl InstrumentBasis {
    pub(crate) fn new(z: &DMatrix<f64>) -> Result<Self> {
        if !has_full_column_rank(z) {
            return Err(IvError::Rank("instrument matrix Z is rank-deficient".into()));
        }
        Ok(Self { q: z.clone().qr().q() })
    }

    /// `Q'M`, the coordinates of `P_Z M` in the basis.
    pub(crate) fn coords(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.q.tr_mul(m)
    }
}

/// First-stage OLS coefficients `(Z'Z)⁻¹Z'X`.
pub fn first_stage(dataset: &IvDataset) -> Result<DMatrix<f64>> {
    least_squares(&dataset.z, &dataset.x, "instrument matrix Z")
}

fn kclass_beta(dataset: &IvDataset, basis: &InstrumentBasis, alpha: f64) -> Result<DVector<f64>> {
    let qx = basis.coords(&dataset.x);
    let qy = basis.coords(&column_matrix(&dataset.y));
    let a = qx.tr_mul(&qx) - dataset.x.tr_mul(&dataset.x) * alpha;
    let b = qx.tr_mul(&qy) - dataset.x.tr_mul(&column_matrix(&dataset.y)) * alpha;
    let beta = solve_square(&a, &b, "k-class bracket X'P_ZX - αX'X")?;
    Ok(beta.column(0).into_owned())
}

fn residuals(dataset: &IvDataset, beta: &DVector<f64>) -> DVector<f64> {
    &dataset.y - &dataset.x * beta
}

/// k-class estimator with a fixed `alpha`.
pub fn estimate_kclass(dataset: &IvDataset, alpha: f64) -> Result<EstimationResult> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(IvError::Domain(format!("k-class alpha must be finite and >= 0, got {alpha}")));
    }
    let basis = InstrumentBasis::new(&dataset.z)?;
    let beta = kclass_beta(dataset, &basis, alpha)?;
    let pi = first_stage(dataset)?;
    Ok(EstimationResult {
        residuals: residuals(dataset, &beta),
        beta_hat: beta,
        alpha,
        moment_weights: pi.clone(),
        pi_hat: pi,
        method: if alpha == 0.0 { Method::TwoSls } else { Method::KClass(alpha) },
    })
}

pub fn estimate_2sls(dataset: &IvDataset) -> Result<EstimationResult> {
    let mut r = estimate_kclass(dataset, 0.0)?;
    r.method = Method::TwoSls;
    Ok(r)
}

/// LIML `α̂_L`: the smallest generalized eigenvalue of `(W'P_ZW, W'W)`,
/// clamped to `[0, 1]`.
pub fn liml_alpha(dataset: &IvDataset) -> Result<f64> {
    let basis = InstrumentBasis::new(&dataset.z)?;
    liml_alpha_with(dataset, &basis)
}

fn liml_alpha_with(dataset: &IvDataset, basis: &InstrumentBasis) -> Result<f64> {
    let w = dataset.reduced_form();
    let qw = basis.coords(&w);
    let a = qw.tr_mul(&qw);
    let b = w.tr_mul(&w);
    let lambda = match smallest_generalized_eigen(&a, &b, "W'W") {
        Ok((l, _)) => l,
        Err(e) => {
            // W'W is singular; an exact fit y = Xβ still has α = 0
            if exact_fit(&b)? {
                0.0
            } else {
                return Err(e);
            }
        }
    };
    if !lambda.is_finite() {
        return Err(IvError::Convergence("LIML eigenvalue is not finite".into()));
    }
    Ok(lambda.clamp(0.0, 1.0))
}

/// True when the null space of `W'W` involves `y`, i.e. `y` is an exact
/// linear combination of the columns of `X`.
fn exact_fit(wtw: &DMatrix<f64>) -> Result<bool> {
    let eig = nalgebra::SymmetricEigen::try_new(symmetrize(wtw), 1e-14, 10_000)
        .ok_or_else(|| IvError::Convergence("eigen-solver failed on W'W".into()))?;
    let max = eig.eigenvalues.amax();
    let (idx, min) = eig.eigenvalues.argmin();
    Ok(max > 0.0 && min <= RANK_TOL * max && eig.eigenvectors[(0, idx)].abs() > RANK_TOL.sqrt())
}

/// `Π̂_L = (Z'M_ûZ)⁻¹Z'M_ûX`. When `û` is numerically zero the annihilator is
/// undefined and the plain first stage is returned.
pub fn liml_first_stage(dataset: &IvDataset, u: &DVector<f64>) -> Result<DMatrix<f64>> {
    let uu = u.norm_squared();
    let scale = dataset.y.norm_squared() + dataset.x.norm_squared();
    if uu <= 1e-24 * scale.max(f64::MIN_POSITIVE) {
        return first_stage(dataset);
    }
    let annihilate = |m: &DMatrix<f64>| -> DMatrix<f64> {
        let coef = u.transpose() * m / uu;
        m - column_matrix(u) * coef
    };
    least_squares(&annihilate(&dataset.z), &annihilate(&dataset.x), "M_û Z")
}

pub fn estimate_liml(dataset: &IvDataset) -> Result<EstimationResult> {
    let basis = InstrumentBasis::new(&dataset.z)?;
    let alpha = liml_alpha_with(dataset, &basis)?;
    let beta = kclass_beta(dataset, &basis, alpha)?;
    let u = residuals(dataset, &beta);
    let pi = liml_first_stage(dataset, &u)?;
    Ok(EstimationResult {
        beta_hat: beta,
        alpha,
        residuals: u,
        moment_weights: pi.clone(),
        pi_hat: pi,
        method: Method::Liml,
    })
}

/// Two-step GMM using `first_step.pi_hat` and the supplied meat `Z'HZ`.
pub fn estimate_gmm2(
    dataset: &IvDataset,
    first_step: &EstimationResult,
    meat_matrix: &DMatrix<f64>,
) -> Result<EstimationResult> {
    let kz = dataset.kz();
    if meat_matrix.shape() != (kz, kz) || first_step.pi_hat.shape() != (kz, dataset.kx()) {
        return Err(IvError::Dimension("GMM2: meat or first stage has the wrong shape".into()));
    }
    let chol = cholesky(meat_matrix, "GMM weighting matrix")?;
    let ztz = dataset.z.tr_mul(&dataset.z);
    // A = S⁻¹ Z'Z Π̂₁, so the estimator solves A'Z'(y - Xβ) = 0
    let weights = chol.solve(&(&ztz * &first_step.pi_hat));
    let zx = dataset.z.tr_mul(&dataset.x);
    let zy = dataset.z.tr_mul(&dataset.y);
    let beta = solve_square_vec(&weights.tr_mul(&zx), &weights.tr_mul(&zy), "GMM2 bracket")?;
    Ok(EstimationResult {
        residuals: residuals(dataset, &beta),
        beta_hat: beta,
        alpha: 0.0,
        pi_hat: first_step.pi_hat.clone(),
        method: Method::Gmm2,
        moment_weights: weights,
    })
}

/// Standard pipeline: 2SLS first step, meat from its residuals, GMM second step.
pub fn estimate_gmm2_default(
    dataset: &IvDataset,
    spec: CovarianceSpec,
) -> Result<(EstimationResult, EstimationResult)> {
    let first = estimate_2sls(dataset)?;
    let s = meat(&dataset.z, &first.residuals, spec)?;
    let second = estimate_gmm2(dataset, &first, &s)?;
    Ok((first, second))
}

/// Sandwich covariance `(A'Z'X)⁻¹ A'(Z'HZ)A (X'ZA)⁻¹` of `β̂`.
pub fn robust_covariance(dataset: &IvDataset, est: &EstimationResult, spec: CovarianceSpec) -> Result<DMatrix<f64>> {
    let a = &est.moment_weights;
    let bread = a.tr_mul(&dataset.z.tr_mul(&dataset.x));
    let s = meat(&dataset.z, &est.residuals, spec)?;
    let inner = a.tr_mul(&(s * a));
    let left = solve_square(&bread, &inner, "sandwich bread")?;
    let cov = solve_square(&bread, &left.transpose(), "sandwich bread")?;
    Ok((&cov + cov.transpose()) * 0.5)
}

pub fn standard_errors(cov: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(cov.nrows(), |i, _| cov[(i, i)].max(0.0).sqrt())
}
