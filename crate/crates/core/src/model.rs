//! Dataset representation for the linear IV model `y = Xβ + u`, `X = ZΠ + V`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IvError, Result};
use crate::linalg::{has_full_column_rank, residualize};

/// Observations for one IV regression. Row `i` of `z` is `z_i'`.
///
/// Intercepts are never implicit: a constant must be supplied as a column of
/// `exog` and removed with [`IvDataset::partial_out`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvDataset {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub exog: Option<DMatrix<f64>>,
}

impl IvDataset {
    /// Builds and validates a dataset.
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>, exog: Option<DMatrix<f64>>) -> Result<Self> {
        let d = Self { y, x, z, exog };
        d.validate()?;
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn kx(&self) -> usize {
        self.x.ncols()
    }

    pub fn kz(&self) -> usize {
        self.z.ncols()
    }

    /// Checks shapes, finiteness and the rank conditions of the model.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.x.nrows() != n || self.z.nrows() != n {
            return Err(IvError::Dimension(format!(
                "row mismatch: y has {n}, X has {}, Z has {}",
                self.x.nrows(),
                self.z.nrows()
            )));
        }
        let (kx, kz) = (self.kx(), self.kz());
        let ke = match &self.exog {
            Some(e) if e.nrows() != n => {
                return Err(IvError::Dimension(format!("exogenous controls have {} rows, expected {n}", e.nrows())))
            }
            Some(e) => e.ncols(),
            None => 0,
        };
        if kx < 1 {
            return Err(IvError::Dimension("need at least one endogenous regressor".into()));
        }
        if kz <= kx {
            return Err(IvError::Dimension(format!("model is not overidentified: k_z = {kz}, k_x = {kx}")));
        }
        if n <= kz + ke {
            return Err(IvError::Dimension(format!("too few observations: n = {n}, k_z + k_e = {}", kz + ke)));
        }
        let finite = self.y.iter().all(|v| v.is_finite())
            && self.x.iter().all(|v| v.is_finite())
            && self.z.iter().all(|v| v.is_finite())
            && self.exog.as_ref().is_none_or(|e| e.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(IvError::NonFinite("dataset contains NaN or infinite values".into()));
        }
        if !has_full_column_rank(&self.z) {
            return Err(IvError::Rank("instrument matrix Z is rank-deficient".into()));
        }
        if !has_full_column_rank(&self.x) {
            return Err(IvError::Rank("regressor matrix X is rank-deficient".into()));
        }
        if let Some(e) = &self.exog {
            if !has_full_column_rank(e) {
                return Err(IvError::Rank("exogenous controls are rank-deficient".into()));
            }
        }
        Ok(())
    }

    /// `W = [y X]`, the reduced-form outcome matrix.
    pub fn reduced_form(&self) -> DMatrix<f64> {
        let n = self.n();
        let kx = self.kx();
        DMatrix::from_fn(n, kx + 1, |i, j| if j == 0 { self.y[i] } else { self.x[(i, j - 1)] })
    }

    /// Residualizes `y`, `X` and `Z` on the exogenous controls and drops them.
    /// A dataset without controls is returned unchanged.
    pub fn partial_out(&self) -> Result<IvDataset> {
        let Some(e) = &self.exog else {
            return Ok(self.clone());
        };
        if !has_full_column_rank(e) {
            return Err(IvError::Rank("exogenous controls are rank-deficient".into()));
        }
        let n = self.n();
        let (kx, kz) = (self.kx(), self.kz());
        let mut stacked = DMatrix::zeros(n, 1 + kx + kz);
        stacked.set_column(0, &self.y);
        stacked.view_mut((0, 1), (n, kx)).copy_from(&self.x);
        stacked.view_mut((0, 1 + kx), (n, kz)).copy_from(&self.z);
        let r = residualize(e, &stacked, "exogenous controls")?;
        let out = IvDataset {
            y: r.column(0).into_owned(),
            x: r.columns(1, kx).into_owned(),
            z: r.columns(1 + kx, kz).into_owned(),
            exog: None,
        };
        if !has_full_column_rank(&out.z) {
            return Err(IvError::Rank("instruments lose rank after partialling out".into()));
        }
        out.validate()?;
        Ok(out)
    }

    /// Rotates the instruments to `Z T` with `T` the inverse of the upper
    /// Cholesky factor of `Z'Z/n` (positive diagonal), so `Z'Z/n = I`.
    pub fn orthonormalize(&self) -> Result<IvDataset> {
        let t = orthonormalizing_transform(&self.z)?;
        Ok(IvDataset { z: &self.z * t, ..self.clone() })
    }

    /// Swaps the roles of `y` and the single endogenous regressor.
    pub fn swap_normalization(&self) -> Result<IvDataset> {
        if self.kx() != 1 {
            return Err(IvError::Unsupported("normalization swap needs exactly one endogenous regressor".into()));
        }
        Ok(IvDataset {
            y: self.x.column(0).into_owned(),
            x: DMatrix::from_column_slice(self.n(), 1, self.y.as_slice()),
            z: self.z.clone(),
            exog: self.exog.clone(),
        })
    }
}

/// `T` such that `(ZT)'(ZT)/n = I`, built from the QR factor of `Z`.
pub fn orthonormalizing_transform(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !has_full_column_rank(z) {
        return Err(IvError::Rank("instrument matrix Z is rank-deficient".into()));
    }
    let n = z.nrows() as f64;
    let k = z.ncols();
    let mut r = z.clone().qr().r() / n.sqrt();
    for i in 0..k {
        if r[(i, i)] < 0.0 {
            let mut row = r.row_mut(i);
            row *= -1.0;
        }
    }
    r.solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| IvError::Singularity("Cholesky factor of Z'Z/n is singular".into()))
}
