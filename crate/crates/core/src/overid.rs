//! Overidentification tests: Hansen J, robust score, Kleibergen-Paap, Sargan.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chisq::chi2_sf;
use crate::covariance::{meat, CovarianceSpec};
use crate::error::{IvError, Result};
use crate::estimators::{estimate_liml, EstimationResult, InstrumentBasis, Method};
use crate::linalg::{inverse_condition, inverse_quadratic_form, residualize, select_columns, select_rows, RANK_TOL};
use crate::model::IvDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestKind {
    HansenJ,
    RobustScore2SLS,
    RobustScoreLIML,
    RobustScoreKClass,
    RobustScoreGmm2,
    KP,
    Sargan,
    EffectiveF,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: TestKind,
    pub statistic: f64,
    pub df: usize,
    /// Upper-tail χ²(df) probability; `None` for the effective F.
    pub p_value: Option<f64>,
    /// Columns of Z forming Z₂; empty when the test has no partition.
    pub partition_cols: Vec<usize>,
    /// Companion critical value (κ for the effective F).
    pub critical_value: Option<f64>,
}

/// Statistics within `1e-10` below zero are rounding noise.
fn clamp_statistic(s: f64) -> Result<f64> {
    if !s.is_finite() {
        return Err(IvError::NonFinite("test statistic is not finite".into()));
    }
    if s < -1e-10 * (1.0 + s.abs()) {
        return Err(IvError::Singularity(format!("negative quadratic form {s}")));
    }
    Ok(s.max(0.0))
}

fn overid_result(test: TestKind, stat: f64, df: usize, partition: Vec<usize>) -> Result<TestResult> {
    let statistic = clamp_statistic(stat)?;
    Ok(TestResult {
        test,
        statistic,
        df,
        p_value: Some(chi2_sf(statistic, df)?),
        partition_cols: partition,
        critical_value: None,
    })
}

/// Hansen J with the weight built from the first-step residuals.
pub fn j_test(
    dataset: &IvDataset,
    first_step: &EstimationResult,
    second_step: &EstimationResult,
    spec: CovarianceSpec,
) -> Result<TestResult> {
    let s = meat(&dataset.z, &first_step.residuals, spec)?;
    let g = dataset.z.tr_mul(&second_step.residuals);
    let stat = inverse_quadratic_form(&s, &g, "J weighting matrix Z'HZ")?;
    overid_result(TestKind::HansenJ, stat, dataset.kz() - dataset.kx(), Vec::new())
}

fn complement(kz: usize, z2: &[usize]) -> Vec<usize> {
    (0..kz).filter(|c| !z2.contains(c)).collect()
}

fn check_partition(kz: usize, kx: usize, z2: &[usize]) -> Result<()> {
    if z2.len() != kz - kx {
        return Err(IvError::Partition(format!("Z₂ must have {} columns, got {}", kz - kx, z2.len())));
    }
    let mut seen = vec![false; kz];
    for &c in z2 {
        if c >= kz || seen[c] {
            return Err(IvError::Partition(format!("invalid or repeated column index {c}")));
        }
        seen[c] = true;
    }
    Ok(())
}

fn pi1_invertible(pi: &DMatrix<f64>, z2: &[usize]) -> bool {
    let z1 = complement(pi.nrows(), z2);
    inverse_condition(&select_rows(pi, &z1)) >= RANK_TOL
}

/// Chooses Z₂ for a score test. The default is the last `k_z - k_x` columns;
/// if the matching Π̂₁ is singular the split is rotated cyclically.
pub fn resolve_partition(pi: &DMatrix<f64>, requested: Option<&[usize]>) -> Result<Vec<usize>> {
    let (kz, kx) = pi.shape();
    if let Some(z2) = requested {
        check_partition(kz, kx, z2)?;
        if !pi1_invertible(pi, z2) {
            return Err(IvError::Partition("Π̂₁ is singular for the requested partition".into()));
        }
        return Ok(z2.to_vec());
    }
    for shift in 0..kz {
        let z2: Vec<usize> = (kx..kz).map(|c| (c + shift) % kz).collect();
        if pi1_invertible(pi, &z2) {
            return Ok(z2);
        }
    }
    Err(IvError::Partition("no partition gives a nonsingular Π̂₁".into()))
}

/// All admissible Z₂ index sets for `k_z` instruments and `k_x` regressors.
pub fn all_partitions(kz: usize, kx: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, kz: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for c in start..kz {
            cur.push(c);
            rec(c + 1, kz, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, kz, kz - kx, &mut Vec::new(), &mut out);
    out
}

/// One-step robust score test of `θ = 0` in `y = Xβ + Z₂θ + η`, with
/// `X̂ = Z·estimate.pi_hat` and `H` from `spec`.
pub fn robust_score(
    dataset: &IvDataset,
    estimate: &EstimationResult,
    spec: CovarianceSpec,
    partition: Option<&[usize]>,
) -> Result<TestResult> {
    let z2_cols = resolve_partition(&estimate.pi_hat, partition)?;
    let stat = score_statistic(dataset, estimate, spec, &z2_cols)?;
    let tag = match estimate.method {
        Method::TwoSls => TestKind::RobustScore2SLS,
        Method::Liml => TestKind::RobustScoreLIML,
        Method::KClass(_) => TestKind::RobustScoreKClass,
        Method::Gmm2 => TestKind::RobustScoreGmm2,
    };
    overid_result(tag, stat, dataset.kz() - dataset.kx(), z2_cols)
}

fn score_statistic(
    dataset: &IvDataset,
    estimate: &EstimationResult,
    spec: CovarianceSpec,
    z2_cols: &[usize],
) -> Result<f64> {
    let xhat = &dataset.z * &estimate.pi_hat;
    let z2 = select_columns(&dataset.z, z2_cols);
    let mz2 = residualize(&xhat, &z2, "fitted regressors ZΠ̂").map_err(|e| IvError::Singularity(e.to_string()))?;
    let u = &estimate.residuals;
    let g: DVector<f64> = mz2.tr_mul(u);
    let v = meat(&mz2, u, spec)?;
    inverse_quadratic_form(&v, &g, "score variance Z₂'M H M Z₂")
}

/// Kleibergen-Paap rank test, computed as the LIML robust score test.
pub fn kp_test(dataset: &IvDataset, spec: CovarianceSpec) -> Result<TestResult> {
    let liml = estimate_liml(dataset)?;
    kp_test_with(dataset, &liml, spec)
}

/// KP from an existing LIML estimate.
pub fn kp_test_with(dataset: &IvDataset, liml: &EstimationResult, spec: CovarianceSpec) -> Result<TestResult> {
    if liml.method != Method::Liml {
        return Err(IvError::Config("KP needs a LIML estimate".into()));
    }
    let mut r = robust_score(dataset, liml, spec, None)?;
    r.test = TestKind::KP;
    Ok(r)
}

/// Sargan's homoskedastic test `û'P_Zû / (û'û/n)`.
pub fn sargan_test(dataset: &IvDataset, estimate: &EstimationResult) -> Result<TestResult> {
    let basis = InstrumentBasis::new(&dataset.z)?;
    let u = &estimate.residuals;
    let uu = u.norm_squared();
    let df = dataset.kz() - dataset.kx();
    if uu == 0.0 {
        return overid_result(TestKind::Sargan, 0.0, df, Vec::new());
    }
    let qu = basis.coords(&DMatrix::from_column_slice(u.len(), 1, u.as_slice()));
    let stat = qu.norm_squared() / (uu / dataset.n() as f64);
    overid_result(TestKind::Sargan, stat, df, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{estimate_2sls, estimate_gmm2_default};
    use approx::assert_relative_eq;

    fn fixture(kz: usize, n: usize) -> IvDataset {
        let z = DMatrix::from_fn(n, kz, |i, j| {
            (((i + 3) * (2 * j + 5)) % 17) as f64 / 4.0 - 2.0 + 0.05 * (j * i % 3) as f64
        });
        let e = DVector::from_fn(n, |i, _| ((i * 7 % 13) as f64 - 6.0) / 6.0);
        let v = DVector::from_fn(n, |i, _| ((i * 5 % 11) as f64 - 5.0) / 5.0);
        let x = DMatrix::from_fn(n, 1, |i, _| 0.4 * z.row(i).sum() + v[i]);
        let y = DVector::from_fn(n, |i, _| 0.8 * x[(i, 0)] + e[i] * (1.0 + z[(i, 0)].abs()) + 0.5 * v[i]);
        IvDataset::new(y, x, z, None).unwrap()
    }

    #[test]
    fn j_equals_explicit_quadratic_form() {
        let d = fixture(3, 20);
        let (first, second) = estimate_gmm2_default(&d, CovarianceSpec::Hc0).unwrap();
        let j = j_test(&d, &first, &second, CovarianceSpec::Hc0).unwrap();
        let mut s = DMatrix::zeros(3, 3);
        for i in 0..20 {
            let zi = d.z.row(i).transpose();
            s += &zi * zi.transpose() * first.residuals[i].powi(2);
        }
        let g = d.z.transpose() * &second.residuals;
        let want = (g.transpose() * s.try_inverse().unwrap() * &g)[(0, 0)];
        assert_relative_eq!(j.statistic, want, max_relative = 1e-10);
        assert_eq!(j.df, 2);
    }

    #[test]
    fn j_equals_two_sls_score_for_every_partition() {
        let d = fixture(4, 60);
        let (first, second) = estimate_gmm2_default(&d, CovarianceSpec::Hc0).unwrap();
        let j = j_test(&d, &first, &second, CovarianceSpec::Hc0).unwrap().statistic;
        for p in all_partitions(4, 1) {
            let s = robust_score(&d, &first, CovarianceSpec::Hc0, Some(&p)).unwrap();
            assert!((s.statistic - j).abs() / j.max(1.0) < 1e-8, "{p:?}");
            assert_eq!(s.test, TestKind::RobustScore2SLS);
        }
    }

    #[test]
    fn kp_is_normalization_invariant() {
        let d = fixture(3, 50);
        let a = kp_test(&d, CovarianceSpec::Hc0).unwrap().statistic;
        let b = kp_test(&d.swap_normalization().unwrap(), CovarianceSpec::Hc0).unwrap().statistic;
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn sargan_equals_homoskedastic_j() {
        let d = fixture(3, 40);
        let tsls = estimate_2sls(&d).unwrap();
        let s = sargan_test(&d, &tsls).unwrap();
        let j = j_test(&d, &tsls, &tsls, CovarianceSpec::Homoskedastic).unwrap();
        assert_relative_eq!(s.statistic, j.statistic, max_relative = 1e-10);
    }

    #[test]
    fn orthogonal_residuals_give_zero() {
        let d = fixture(3, 40);
        let mut tsls = estimate_2sls(&d).unwrap();
        tsls.residuals = residualize(&d.z, &DMatrix::from_column_slice(40, 1, tsls.residuals.as_slice()), "z")
            .unwrap()
            .column(0)
            .into_owned();
        assert!(sargan_test(&d, &tsls).unwrap().statistic < 1e-20);
        assert!(j_test(&d, &estimate_2sls(&d).unwrap(), &tsls, CovarianceSpec::Hc0).unwrap().statistic < 1e-20);
    }

    #[test]
    fn bad_partitions_are_rejected() {
        let d = fixture(3, 40);
        let tsls = estimate_2sls(&d).unwrap();
        assert!(matches!(robust_score(&d, &tsls, CovarianceSpec::Hc0, Some(&[0])), Err(IvError::Partition(_))));
        assert!(matches!(robust_score(&d, &tsls, CovarianceSpec::Hc0, Some(&[1, 1])), Err(IvError::Partition(_))));
    }

    #[test]
    fn default_partition_rotates_past_zero_first_stage_row() {
        let pi = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        assert_eq!(resolve_partition(&pi, None).unwrap(), vec![2, 0]);
        let pi = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 2.0]);
        assert_eq!(resolve_partition(&pi, None).unwrap(), vec![1, 2]);
    }
}
