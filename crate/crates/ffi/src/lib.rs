//! C ABI for `weakiv`.
//!
//! Datasets and estimates are opaque handles created by `weakiv_*_new` /
//! `weakiv_estimate` and released with the matching `*_free`. Every fallible
//! function returns a `WeakivStatus`; on failure the message is available from
//! `weakiv_last_error_message` on the same thread. Matrices are column-major.
//!
//! # Safety
//!
//! Pointers must be null or valid for the stated lengths. Handles must come
//! from this library and are not thread-safe.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use nalgebra::{DMatrix, DVector};
use weakiv::designs::{Calibration, Design, SimulationConfig};
use weakiv::estimators::{estimate_2sls, estimate_kclass, estimate_liml, robust_covariance, standard_errors};
use weakiv::{CovarianceSpec, EstimationResult, IvDataset, IvError};

/// Status codes. Zero is success; each error kind has its own negative code.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeakivStatus {
    Ok = 0,
    NullPointer = -1,
    Dimension = -2,
    Rank = -3,
    NonFinite = -4,
    Singularity = -5,
    Convergence = -6,
    Partition = -7,
    Unsupported = -8,
    Domain = -9,
    Config = -10,
    Parse = -11,
    Gap = -12,
    Schema = -13,
    Io = -14,
    Panic = -99,
}

impl From<&IvError> for WeakivStatus {
    fn from(e: &IvError) -> Self {
        match e {
            IvError::Dimension(_) => WeakivStatus::Dimension,
            IvError::Rank(_) => WeakivStatus::Rank,
            IvError::NonFinite(_) => WeakivStatus::NonFinite,
            IvError::Singularity(_) => WeakivStatus::Singularity,
            IvError::Convergence(_) => WeakivStatus::Convergence,
            IvError::Partition(_) => WeakivStatus::Partition,
            IvError::Unsupported(_) => WeakivStatus::Unsupported,
            IvError::Domain(_) => WeakivStatus::Domain,
            IvError::Config(_) => WeakivStatus::Config,
            IvError::Parse(_) => WeakivStatus::Parse,
            IvError::Gap(_) => WeakivStatus::Gap,
            IvError::Schema(_) => WeakivStatus::Schema,
            IvError::Io(_) => WeakivStatus::Io,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeakivMethod {
    TwoSls = 0,
    Liml = 1,
    /// Uses the `kclass_alpha` argument.
    KClass = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeakivTest {
    HansenJ = 0,
    KP = 1,
    Score2sls = 2,
    ScoreLiml = 3,
    Sargan = 4,
    EffectiveF = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeakivCovariance {
    Homoskedastic = 0,
    Hc0 = 1,
    Hc1 = 2,
    /// Uses the `lags` argument.
    NeweyWest = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeakivDesign {
    Design1 = 0,
    Design2 = 1,
    /// Uses the `omega` argument.
    Power = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakivTestResult {
    pub statistic: f64,
    pub df: usize,
    /// NaN when the test has no χ² p-value.
    pub p_value: f64,
    /// NaN when the test has no companion critical value.
    pub critical_value: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakivSimulationSummary {
    pub j_rate: f64,
    pub kp_rate: f64,
    pub median_bias_2sls: f64,
    pub median_bias_liml: f64,
    pub range_90_10_2sls: f64,
    pub range_90_10_liml: f64,
    pub pi_used: f64,
    pub replications_completed: usize,
    pub degenerate_count: usize,
}

/// Opaque dataset with exogenous controls already partialled out.
pub struct WeakivDataset(IvDataset);

/// Opaque estimation result.
pub struct WeakivEstimate {
    result: EstimationResult,
    std_errors: DVector<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), WeakivStatus>) -> WeakivStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WeakivStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            WeakivStatus::Panic
        }
    }
}

fn fail(e: IvError) -> WeakivStatus {
    let s = WeakivStatus::from(&e);
    set_error(e.to_string());
    s
}

fn null() -> WeakivStatus {
    set_error("null pointer argument".into());
    WeakivStatus::NullPointer
}

unsafe fn read<'a>(p: *const f64, len: usize) -> Result<&'a [f64], WeakivStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(slice::from_raw_parts(p, len))
}

fn spec(cov: WeakivCovariance, lags: usize, kx: usize) -> CovarianceSpec {
    match cov {
        WeakivCovariance::Homoskedastic => CovarianceSpec::Homoskedastic,
        WeakivCovariance::Hc0 => CovarianceSpec::Hc0,
        WeakivCovariance::Hc1 => CovarianceSpec::Hc1 { k: kx },
        WeakivCovariance::NeweyWest => CovarianceSpec::NeweyWest { lags },
    }
}

/// Length of the last error message on this thread, excluding the NUL.
#[no_mangle]
pub extern "C" fn weakiv_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// Copies the last error message into `buf` (NUL-terminated, truncated to
/// `len`). Returns the number of bytes written excluding the NUL.
///
/// # Safety
///
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn weakiv_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_ref().map_or(&[][..], |c| c.as_bytes());
        let n = bytes.len().min(len - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
        *buf.add(n) = 0;
        n
    })
}

/// Static, NUL-terminated library version.
#[no_mangle]
pub extern "C" fn weakiv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Builds a dataset from column-major arrays: `y` (n), `x` (n × kx),
/// `z` (n × kz) and optional `exog` (n × kw, null when kw = 0). Exogenous
/// columns are partialled out immediately.
///
/// # Safety
///
/// Array pointers must be valid for the stated sizes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn weakiv_dataset_new(
    n: usize,
    kx: usize,
    kz: usize,
    kw: usize,
    y: *const f64,
    x: *const f64,
    z: *const f64,
    exog: *const f64,
    out: *mut *mut WeakivDataset,
) -> WeakivStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        *out = ptr::null_mut();
        let y = DVector::from_column_slice(read(y, n)?);
        let x = DMatrix::from_column_slice(n, kx, read(x, n * kx)?);
        let z = DMatrix::from_column_slice(n, kz, read(z, n * kz)?);
        let exog = (kw > 0).then(|| read(exog, n * kw).map(|w| DMatrix::from_column_slice(n, kw, w))).transpose()?;
        let d = IvDataset::new(y, x, z, exog).and_then(|d| d.partial_out()).map_err(fail)?;
        *out = Box::into_raw(Box::new(WeakivDataset(d)));
        Ok(())
    })
}

/// # Safety
///
/// `d` must be null or a handle from `weakiv_dataset_new`, freed once.
#[no_mangle]
pub unsafe extern "C" fn weakiv_dataset_free(d: *mut WeakivDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Point estimate with HC0 sandwich standard errors.
///
/// # Safety
///
/// `d` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn weakiv_estimate(
    d: *const WeakivDataset,
    method: WeakivMethod,
    kclass_alpha: f64,
    out: *mut *mut WeakivEstimate,
) -> WeakivStatus {
    guard(|| {
        let (Some(d), false) = (d.as_ref(), out.is_null()) else {
            return Err(null());
        };
        *out = ptr::null_mut();
        let data = &d.0;
        let result = match method {
            WeakivMethod::TwoSls => estimate_2sls(data),
            WeakivMethod::Liml => estimate_liml(data),
            WeakivMethod::KClass => estimate_kclass(data, kclass_alpha),
        }
        .map_err(fail)?;
        let std_errors = standard_errors(&robust_covariance(data, &result, CovarianceSpec::Hc0).map_err(fail)?);
        *out = Box::into_raw(Box::new(WeakivEstimate { result, std_errors }));
        Ok(())
    })
}

/// # Safety
///
/// `e` must be null or a handle from `weakiv_estimate`, freed once.
#[no_mangle]
pub unsafe extern "C" fn weakiv_estimate_free(e: *mut WeakivEstimate) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Number of coefficients in an estimate (0 for a null handle).
///
/// # Safety
///
/// `e` must be null or a live estimate handle.
#[no_mangle]
pub unsafe extern "C" fn weakiv_estimate_len(e: *const WeakivEstimate) -> usize {
    e.as_ref().map_or(0, |e| e.result.beta_hat.len())
}

/// Copies β̂, standard errors and the k-class α into caller buffers of length
/// `len` (must equal `weakiv_estimate_len`). Any output pointer may be null.
///
/// # Safety
///
/// `e` must be a live estimate handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn weakiv_estimate_values(
    e: *const WeakivEstimate,
    len: usize,
    beta: *mut f64,
    std_errors: *mut f64,
    alpha: *mut f64,
) -> WeakivStatus {
    guard(|| {
        let e = e.as_ref().ok_or_else(null)?;
        if len != e.result.beta_hat.len() {
            return Err(fail(IvError::Dimension(format!(
                "buffer length {len} does not match {} coefficients",
                e.result.beta_hat.len()
            ))));
        }
        if !beta.is_null() {
            ptr::copy_nonoverlapping(e.result.beta_hat.as_ptr(), beta, len);
        }
        if !std_errors.is_null() {
            ptr::copy_nonoverlapping(e.std_errors.as_ptr(), std_errors, len);
        }
        if let Some(a) = alpha.as_mut() {
            *a = e.result.alpha;
        }
        Ok(())
    })
}

/// Runs one overidentification or strength test with the default partition.
///
/// # Safety
///
/// `d` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn weakiv_test(
    d: *const WeakivDataset,
    test: WeakivTest,
    cov: WeakivCovariance,
    lags: usize,
    out: *mut WeakivTestResult,
) -> WeakivStatus {
    guard(|| {
        let (Some(d), Some(out)) = (d.as_ref(), out.as_mut()) else {
            return Err(null());
        };
        let name = match test {
            WeakivTest::HansenJ => "j",
            WeakivTest::KP => "kp",
            WeakivTest::Score2sls => "score-2sls",
            WeakivTest::ScoreLiml => "score-liml",
            WeakivTest::Sargan => "sargan",
            WeakivTest::EffectiveF => "feff",
        };
        let s = spec(cov, lags, d.0.kx());
        let r = weakiv::cli::run_tests(&d.0, &[name.to_string()], s, None).map_err(fail)?;
        let r = &r[0];
        *out = WeakivTestResult {
            statistic: r.statistic,
            df: r.df,
            p_value: r.p_value.unwrap_or(f64::NAN),
            critical_value: r.critical_value.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Upper-tail χ²(df) probability.
///
/// # Safety
///
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn weakiv_chi2_sf(x: f64, df: usize, out: *mut f64) -> WeakivStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(null)?;
        *out = weakiv::chisq::chi2_sf(x, df).map_err(fail)?;
        Ok(())
    })
}

/// Monte Carlo size study for one design cell at a single nominal `level`,
/// with an intercept and variance calibration of π.
///
/// # Safety
///
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn weakiv_simulate(
    design: WeakivDesign,
    alpha: f64,
    omega: f64,
    kz: usize,
    rho: f64,
    mu2: f64,
    n: usize,
    replications: usize,
    seed: u64,
    level: f64,
    out: *mut WeakivSimulationSummary,
) -> WeakivStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(null)?;
        let design = match design {
            WeakivDesign::Design1 => Design::Design1 { alpha },
            WeakivDesign::Design2 => Design::Design2 { alpha },
            WeakivDesign::Power => Design::Power { alpha, omega },
        };
        let config = SimulationConfig {
            n,
            replications,
            seed,
            levels: vec![level],
            calibration: Calibration::Variance,
            ..SimulationConfig::new(design, kz, rho, mu2)
        };
        let s = weakiv::simulation::run_design(&config).map_err(fail)?;
        let r = &s.rejection[0];
        *out = WeakivSimulationSummary {
            j_rate: r.j_rate,
            kp_rate: r.kp_rate,
            median_bias_2sls: s.median_bias_2sls,
            median_bias_liml: s.median_bias_liml,
            range_90_10_2sls: s.range_90_10_2sls,
            range_90_10_liml: s.range_90_10_liml,
            pi_used: s.pi_used,
            replications_completed: s.replications_completed,
            degenerate_count: s.degenerate_count,
        };
        Ok(())
    })
}
