//! Instrument-strength measures: effective F with its simplified conservative
//! critical value, and the heteroskedastic concentration matrix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::chisq::noncentral_chi2_quantile;
use crate::covariance::{meat, CovarianceSpec};
use crate::error::{IvError, Result};
use crate::linalg::{inverse_sqrt, symmetric_eigenvalues, symmetrize};
use crate::model::IvDataset;
use crate::overid::{TestKind, TestResult};

/// Worst-case bias threshold τ used for κ.
pub const KAPPA_TAU: f64 = 0.10;
pub const KAPPA_SIZE: f64 = 0.05;

/// Effective first-stage F for a single endogenous regressor, with κ in
/// `critical_value`. Instruments are orthonormalized first; all sums are
/// raw (no small-sample scaling).
pub fn effective_f(dataset: &IvDataset, spec: CovarianceSpec) -> Result<TestResult> {
    if dataset.kx() != 1 {
        return Err(IvError::Unsupported(format!("effective F needs one endogenous regressor, got {}", dataset.kx())));
    }
    let d = dataset.orthonormalize()?;
    let n = d.n() as f64;
    let x = d.x.column(0).into_owned();
    let pi = d.z.tr_mul(&x) / n;
    let v = &x - &d.z * &pi;
    let w2 = meat(&d.z, &v, spec)? / n;
    let trace = w2.trace();
    if trace <= 0.0 {
        return Err(IvError::Singularity("first-stage covariance has zero trace".into()));
    }
    let stat = n * pi.norm_squared() / trace;
    Ok(TestResult {
        test: TestKind::EffectiveF,
        statistic: stat,
        df: d.kz(),
        p_value: None,
        partition_cols: Vec::new(),
        critical_value: Some(kappa(&w2, KAPPA_TAU, KAPPA_SIZE)?),
    })
}

/// Effective degrees of freedom of the simplified conservative rule.
pub fn effective_dof(w2: &DMatrix<f64>, tau: f64) -> Result<f64> {
    let s = symmetrize(w2);
    let x = 1.0 / tau;
    let tr = s.trace();
    let tr2 = (&s * &s).trace();
    let eig = symmetric_eigenvalues(&s, "first-stage covariance")?;
    let lmax = *eig.last().unwrap_or(&0.0);
    let denom = tr2 + 2.0 * x * tr * lmax;
    if denom <= 0.0 {
        return Err(IvError::Singularity("effective degrees of freedom undefined".into()));
    }
    Ok(tr * tr * (1.0 + 2.0 * x) / denom)
}

/// Simplified conservative critical value:
/// the `1 - size` quantile of `χ²_{K}(K/τ)` divided by `K`, with `K` the
/// effective degrees of freedom.
pub fn kappa(w2: &DMatrix<f64>, tau: f64, size: f64) -> Result<f64> {
    let k = effective_dof(w2, tau)?;
    Ok(noncentral_chi2_quantile(1.0 - size, k, k / tau)? / k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationResult {
    pub mu2: DMatrix<f64>,
    pub v_zv: DMatrix<f64>,
}

/// `𝒱_ZV = R'(Ω_ZV ⊗ Q⁻¹)R` with `R = I_{k_x} ⊗ vec(I_{k_z})`.
pub fn v_zv(omega_zv: &DMatrix<f64>, qzz_inv: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let kz = qzz_inv.nrows();
    if qzz_inv.ncols() != kz || kz == 0 || !omega_zv.nrows().is_multiple_of(kz) || !omega_zv.is_square() {
        return Err(IvError::Dimension("concentration: Ω_ZV and Q⁻¹ are not conformable".into()));
    }
    let kx = omega_zv.nrows() / kz;
    let vec_i = DMatrix::from_fn(kz * kz, 1, |r, _| if r / kz == r % kz { 1.0 } else { 0.0 });
    let r = DMatrix::<f64>::identity(kx, kx).kronecker(&vec_i);
    let big = omega_zv.kronecker(qzz_inv);
    Ok(symmetrize(&(r.transpose() * big * r)))
}

/// `μ² = k_z · 𝒱^{-1/2} Π'Z'ZΠ 𝒱^{-1/2}`.
pub fn concentration(
    pi: &DMatrix<f64>,
    ztz: &DMatrix<f64>,
    omega_zv: &DMatrix<f64>,
    qzz_inv: &DMatrix<f64>,
) -> Result<ConcentrationResult> {
    let (kz, kx) = pi.shape();
    if ztz.shape() != (kz, kz) || omega_zv.shape() != (kx * kz, kx * kz) || qzz_inv.shape() != (kz, kz) {
        return Err(IvError::Dimension("concentration: inputs are not conformable".into()));
    }
    let v = v_zv(omega_zv, qzz_inv)?;
    let vis = inverse_sqrt(&v, "𝒱_ZV")?;
    let mu2 = &vis * (pi.transpose() * ztz * pi) * &vis * kz as f64;
    Ok(ConcentrationResult { mu2: symmetrize(&mu2), v_zv: v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::solve_square;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    #[test]
    fn v_zv_equals_blockwise_traces() {
        let (kx, kz) = (2, 3);
        let a = DMatrix::from_fn(kx * kz, kx * kz, |i, j| ((i * 7 + j * 3) % 5) as f64 / 5.0);
        let omega = &a * a.transpose() + DMatrix::identity(6, 6);
        let q = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0]);
        let qi = q.clone().try_inverse().unwrap();
        let v = v_zv(&omega, &qi).unwrap();
        for p in 0..kx {
            for r in 0..kx {
                let block = omega.view((p * kz, r * kz), (kz, kz));
                assert_relative_eq!(v[(p, r)], (block * &qi).trace(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn homoskedastic_concentration_collapses() {
        let q = DMatrix::from_row_slice(2, 2, &[1.2, 0.4, 0.4, 0.9]);
        let sigma_v = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let omega = sigma_v.kronecker(&q);
        let pi = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.7]);
        let ztz = &q * 100.0;
        let c = concentration(&pi, &ztz, &omega, &q.clone().try_inverse().unwrap()).unwrap();
        let s = inverse_sqrt(&sigma_v, "Σ_V").unwrap();
        let want = &s * (pi.transpose() * &ztz * &pi) * &s;
        assert_relative_eq!(c.mu2, want, epsilon = 1e-10);
    }

    #[test]
    fn scalar_concentration_formula() {
        let (kz, n, pi) = (2usize, 120.0, 0.2);
        let omega = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8]);
        let c = concentration(
            &DMatrix::from_element(kz, 1, pi),
            &(DMatrix::identity(kz, kz) * n),
            &omega,
            &DMatrix::identity(kz, kz),
        )
        .unwrap();
        assert_relative_eq!(c.v_zv[(0, 0)], 2.3, epsilon = 1e-14);
        assert_relative_eq!(c.mu2[(0, 0)], (kz * kz) as f64 * n * pi * pi / 2.3, epsilon = 1e-12);
    }

    #[test]
    fn zero_first_stage_has_zero_concentration() {
        let c = concentration(
            &DMatrix::zeros(3, 1),
            &DMatrix::identity(3, 3),
            &DMatrix::identity(3, 3),
            &DMatrix::identity(3, 3),
        )
        .unwrap();
        assert_eq!(c.mu2[(0, 0)], 0.0);
    }

    #[test]
    fn homoskedastic_feff_is_classical_f() {
        let n = 80;
        let z = DMatrix::from_fn(n, 3, |i, j| (((i + 1) * (j + 3)) % 13) as f64 - 6.0 + 0.3 * j as f64);
        let x = DMatrix::from_fn(n, 1, |i, _| 0.2 * z[(i, 0)] - 0.1 * z[(i, 2)] + ((i * 7 % 9) as f64 - 4.0) / 3.0);
        let y = DVector::from_fn(n, |i, _| x[(i, 0)] + ((i % 4) as f64 - 1.5));
        let d = IvDataset::new(y, x.clone(), z.clone(), None).unwrap();
        let f = effective_f(&d, CovarianceSpec::Homoskedastic).unwrap();
        let coef = solve_square(&(z.transpose() * &z), &(z.transpose() * &x), "zz").unwrap();
        let fitted = &z * coef;
        let ess = fitted.norm_squared();
        let rss = (&x - &fitted).norm_squared();
        let classical = (ess / 3.0) / (rss / n as f64);
        assert_relative_eq!(f.statistic, classical, max_relative = 1e-8);
        assert!(f.critical_value.unwrap() > 0.0);
        assert!(f.p_value.is_none());
    }

    #[test]
    fn feff_rejects_two_regressors() {
        let n = 30;
        let z = DMatrix::from_fn(n, 3, |i, j| ((i * (j + 2)) % 7) as f64 + j as f64 * 0.1);
        let x = DMatrix::from_fn(n, 2, |i, j| ((i * (j + 5)) % 11) as f64);
        let d = IvDataset::new(DVector::from_fn(n, |i, _| i as f64), x, z, None).unwrap();
        assert!(matches!(effective_f(&d, CovarianceSpec::Hc0), Err(IvError::Unsupported(_))));
    }

    #[test]
    fn kappa_for_identity_covariance() {
        // with W₂ ∝ I the effective dof is k_z exactly
        let w = DMatrix::<f64>::identity(4, 4) * 0.7;
        assert_relative_eq!(effective_dof(&w, 0.1).unwrap(), 4.0, epsilon = 1e-12);
        let k = kappa(&w, 0.1, 0.05).unwrap();
        assert!(k > 10.0 && k < 30.0, "{k}");
    }
}
