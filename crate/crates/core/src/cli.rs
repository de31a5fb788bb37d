//! Command-line front end. Results go to stdout or files; diagnostics go to
//! stderr only. Exit codes: 0 success, 2 bad arguments, 3 data error,
//! 4 numerical error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Value};

use crate::asymptotics::{model_from_design, model_from_design_numeric, rates_from_sample, sample_limit};
use crate::covariance::{meat, CovarianceSpec};
use crate::designs::{Design, SimulationConfig};
use crate::empirics::{eis_csv_row, load_panels, run_eis, InstrumentSet, Normalization, Schema, EIS_CSV_HEADER};
use crate::error::{IvError, Result};
use crate::estimators::{
    estimate_2sls, estimate_gmm2, estimate_kclass, estimate_liml, robust_covariance, standard_errors, EstimationResult,
};
use crate::linalg::percentile_sorted;
use crate::model::IvDataset;
use crate::overid::{j_test, kp_test_with, robust_score, sargan_test, TestResult};
use crate::simulation::{power_curve, run_design, summary_csv_header, summary_csv_row};
use crate::strength::effective_f;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "weakiv", version, about = "Robust IV estimation and overidentification tests under weak instruments")]
pub struct Cli {
    /// Worker threads for simulation and limit sampling (results do not depend on it).
    #[arg(long, global = true, env = "WEAKIV_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate β with 2SLS, LIML, a fixed k-class or two-step GMM.
    Estimate(EstimateArgs),
    /// Overidentification and instrument-strength tests.
    Test(TestArgs),
    /// Monte Carlo rejection rates and estimator metrics.
    Simulate(SimulateArgs),
    /// Sample the weak-instrument limiting distributions.
    Limit(LimitArgs),
    /// Per-country EIS regressions.
    Eis(EisArgs),
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub y: String,
    /// Comma-separated endogenous regressors.
    #[arg(long, value_delimiter = ',', required = true)]
    pub x: Vec<String>,
    /// Comma-separated instruments.
    #[arg(long, value_delimiter = ',', required = true)]
    pub z: Vec<String>,
    /// Comma-separated exogenous controls, partialled out; `const` adds an
    /// intercept unless the file has a column of that name.
    #[arg(long, value_delimiter = ',')]
    pub exog: Vec<String>,
    /// homo, hc0, hc1 or nw:L.
    #[arg(long, default_value = "hc0")]
    pub cov: String,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// 2sls, liml, kclass:A or gmm2.
    #[arg(long, default_value = "2sls")]
    pub method: String,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Any of j, kp, score-2sls, score-liml, sargan, feff.
    #[arg(long, value_delimiter = ',', default_value = "j,kp")]
    pub tests: Vec<String>,
    /// Z₂ columns (0-based positions in --z) for the score tests.
    #[arg(long, value_delimiter = ',')]
    pub partition: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// 1:A, 2:A or power:A,W.
    #[arg(long)]
    pub design: String,
    #[arg(long)]
    pub kz: usize,
    #[arg(long)]
    pub rho: f64,
    /// Comma-separated μ² grid.
    #[arg(long, value_delimiter = ',', required = true)]
    pub mu2: Vec<f64>,
    #[arg(long, default_value_t = 120)]
    pub n: usize,
    #[arg(long, default_value_t = 20_000)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.05,0.01")]
    pub levels: Vec<f64>,
    /// Leave the constant out of the simulated regressions.
    #[arg(long)]
    pub no_intercept: bool,
    /// μ² to π mapping: variance or moments.
    #[arg(long, default_value = "variance")]
    pub calibration: String,
    /// ω grid for a power curve (power design only).
    #[arg(long, value_delimiter = ',')]
    pub omega_grid: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LimitArgs {
    #[arg(long)]
    pub design: String,
    #[arg(long)]
    pub kz: usize,
    #[arg(long)]
    pub rho: f64,
    #[arg(long)]
    pub mu2: f64,
    #[arg(long, default_value_t = 120)]
    pub n: usize,
    #[arg(long, default_value_t = 20_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 0.05)]
    pub level: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Take population moments by numeric expectation over this many draws.
    #[arg(long)]
    pub numeric_moments: Option<usize>,
    /// μ² to π mapping: variance or moments.
    #[arg(long, default_value = "variance")]
    pub calibration: String,
    /// Directory for limit.json and manifest.json; stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EisArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// yogo or housing.
    #[arg(long)]
    pub schema: String,
    /// psi, invpsi or both.
    #[arg(long, default_value = "both")]
    pub normalization: String,
    /// Newey-West lags for every country (default: 6 for USA and 4 otherwise
    /// with yogo, 4 with housing).
    #[arg(long)]
    pub hac_lags: Option<usize>,
    /// Housing instrument set: lag1 or lag2.
    #[arg(long, default_value = "lag1")]
    pub instruments: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub version: String,
    pub wall_time_seconds: f64,
    pub outputs: Vec<String>,
}

fn manifest(command: &str, config: Value, seed: Option<u64>, start: Instant, outputs: Vec<String>) -> RunManifest {
    RunManifest {
        command: command.into(),
        config,
        seed,
        version: env!("CARGO_PKG_VERSION").into(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        outputs,
    }
}

/// Maps a library error to the exit-code contract.
pub fn exit_code(e: &IvError) -> i32 {
    match e {
        IvError::Config(_) | IvError::Unsupported(_) | IvError::Partition(_) | IvError::Domain(_) => EXIT_USAGE,
        e if e.is_data_error() => EXIT_DATA,
        _ => EXIT_NUMERIC,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            if e.use_stderr() {
                let _ = write!(std::io::stderr(), "{e}");
            } else {
                let _ = write!(std::io::stdout(), "{e}");
            }
            return code;
        }
    };
    let outcome = match cli.threads {
        Some(0) => Err(IvError::Config("--threads must be positive".into())),
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| dispatch(&cli.command)),
            Err(e) => Err(IvError::Config(format!("cannot start thread pool: {e}"))),
        },
        None => dispatch(&cli.command),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Test(a) => cmd_test(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Limit(a) => cmd_limit(a),
        Command::Eis(a) => cmd_eis(a),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| IvError::Io(e.to_string()))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{s}")?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| IvError::Io(e.to_string()))?;
    fs::write(path, s + "\n")?;
    Ok(())
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| IvError::Io(format!("{}: {e}", dir.display())))
}

/// Reads the named columns of a CSV file into a dataset.
pub fn load_dataset(a: &DataArgs) -> Result<IvDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&a.data)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    let records = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
    if records.is_empty() {
        return Err(IvError::Parse(format!("{}: no data rows", a.data.display())));
    }
    let n = records.len();
    let column = |name: &str| -> Result<Vec<f64>> {
        match header.iter().position(|h| h == name) {
            Some(k) => records
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let cell = r.get(k).unwrap_or("").trim();
                    cell.parse::<f64>()
                        .map_err(|_| IvError::Parse(format!("row {}: cannot parse '{cell}' in column '{name}'", i + 1)))
                })
                .collect(),
            None if name == "const" => Ok(vec![1.0; n]),
            None => Err(IvError::Schema(format!("{}: missing column '{name}'", a.data.display()))),
        }
    };
    let matrix = |names: &[String]| -> Result<DMatrix<f64>> {
        let cols = names.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]))
    };
    let y = DVector::from_vec(column(&a.y)?);
    let x = matrix(&a.x)?;
    let z = matrix(&a.z)?;
    let exog = if a.exog.is_empty() { None } else { Some(matrix(&a.exog)?) };
    IvDataset::new(y, x, z, exog)
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

#[derive(Debug, Serialize)]
struct EstimateOutput {
    method: String,
    covariance: String,
    n: usize,
    kx: usize,
    kz: usize,
    beta_hat: Vec<f64>,
    standard_errors: Vec<f64>,
    covariance_matrix: Vec<Vec<f64>>,
    alpha: f64,
    pi_hat: Vec<Vec<f64>>,
    residuals: Vec<f64>,
}

fn estimate(d: &IvDataset, method: &str, spec: CovarianceSpec) -> Result<EstimationResult> {
    match method {
        "2sls" => estimate_2sls(d),
        "liml" => estimate_liml(d),
        "gmm2" => {
            let first = estimate_2sls(d)?;
            let s = meat(&d.z, &first.residuals, spec)?;
            estimate_gmm2(d, &first, &s)
        }
        m => {
            let alpha = m
                .strip_prefix("kclass:")
                .and_then(|a| a.parse::<f64>().ok())
                .ok_or_else(|| IvError::Config(format!("unknown method '{m}'")))?;
            estimate_kclass(d, alpha)
        }
    }
}

fn cmd_estimate(a: &EstimateArgs) -> Result<()> {
    let start = Instant::now();
    let raw = load_dataset(&a.data)?;
    let spec = CovarianceSpec::parse(&a.data.cov, raw.kx())?;
    let d = raw.partial_out()?;
    let est = estimate(&d, &a.method, spec)?;
    let cov = robust_covariance(&d, &est, spec)?;
    let out = EstimateOutput {
        method: est.method.label(),
        covariance: spec.to_string(),
        n: d.n(),
        kx: d.kx(),
        kz: d.kz(),
        beta_hat: est.beta_hat.iter().cloned().collect(),
        standard_errors: standard_errors(&cov).iter().cloned().collect(),
        covariance_matrix: matrix_rows(&cov),
        alpha: est.alpha,
        pi_hat: matrix_rows(&est.pi_hat),
        residuals: est.residuals.iter().cloned().collect(),
    };
    let m = manifest(
        "estimate",
        json!({"method": a.method, "cov": a.data.cov, "data": a.data.data}),
        None,
        start,
        vec!["stdout".into()],
    );
    print_json(&json!({"result": out, "manifest": m}))
}

/// Runs the named tests on a prepared dataset.
pub fn run_tests(
    d: &IvDataset,
    names: &[String],
    spec: CovarianceSpec,
    partition: Option<&[usize]>,
) -> Result<Vec<TestResult>> {
    let mut out = Vec::new();
    for name in names {
        let r = match name.trim() {
            "j" => {
                let first = estimate_2sls(d)?;
                let s = meat(&d.z, &first.residuals, spec)?;
                let second = estimate_gmm2(d, &first, &s)?;
                j_test(d, &first, &second, spec)?
            }
            "kp" => {
                let liml = estimate_liml(d)?;
                match partition {
                    Some(p) => {
                        let mut r = robust_score(d, &liml, spec, Some(p))?;
                        r.test = crate::overid::TestKind::KP;
                        r
                    }
                    None => kp_test_with(d, &liml, spec)?,
                }
            }
            "score-2sls" => robust_score(d, &estimate_2sls(d)?, spec, partition)?,
            "score-liml" => robust_score(d, &estimate_liml(d)?, spec, partition)?,
            "sargan" => sargan_test(d, &estimate_2sls(d)?)?,
            "feff" => effective_f(d, spec)?,
            other => return Err(IvError::Config(format!("unknown test '{other}'"))),
        };
        out.push(r);
    }
    Ok(out)
}

fn cmd_test(a: &TestArgs) -> Result<()> {
    let start = Instant::now();
    let raw = load_dataset(&a.data)?;
    let spec = CovarianceSpec::parse(&a.data.cov, raw.kx())?;
    if a.tests.iter().any(|t| t == "feff") && raw.kx() != 1 {
        return Err(IvError::Unsupported(format!("feff needs one endogenous regressor, got {}", raw.kx())));
    }
    let d = raw.partial_out()?;
    let partition = (!a.partition.is_empty()).then_some(a.partition.as_slice());
    let results = run_tests(&d, &a.tests, spec, partition)?;
    let m = manifest(
        "test",
        json!({"tests": a.tests, "cov": a.data.cov, "data": a.data.data}),
        None,
        start,
        vec!["stdout".into()],
    );
    print_json(&json!({"result": results, "manifest": m}))
}

fn mu2_label(mu2: f64) -> String {
    format!("{mu2}").replace('.', "p")
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let start = Instant::now();
    let design: Design = a.design.parse()?;
    let mut grid = a.mu2.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    ensure_dir(&a.out)?;
    let base = SimulationConfig {
        design,
        n: a.n,
        kz: a.kz,
        rho: a.rho,
        mu2_target: grid.first().copied().unwrap_or(0.0),
        replications: a.reps,
        seed: a.seed,
        levels: a.levels.clone(),
        intercept: !a.no_intercept,
        calibration: a.calibration.parse()?,
    };
    base.validate()?;
    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    for &mu2 in &grid {
        let cfg = SimulationConfig { mu2_target: mu2, ..base.clone() };
        let summary = run_design(&cfg)?;
        if summary.degenerate_flag {
            eprintln!(
                "warning: mu2 = {mu2}: {} of {} replications were degenerate",
                summary.degenerate_count, cfg.replications
            );
        }
        let path = a.out.join(format!("summary_mu2_{}.json", mu2_label(mu2)));
        write_json(&path, &summary)?;
        outputs.push(path.display().to_string());
        rows.push(summary_csv_row(&summary));
    }
    let csv_path = a.out.join("summary.csv");
    write_csv(&csv_path, &summary_csv_header(&base.levels), &rows)?;
    outputs.push(csv_path.display().to_string());
    if !a.omega_grid.is_empty() {
        let mut power = Vec::new();
        for &mu2 in &grid {
            let cfg = SimulationConfig { mu2_target: mu2, ..base.clone() };
            for p in power_curve(&cfg, &a.omega_grid)? {
                power.push(vec![mu2.to_string(), p.omega.to_string(), p.j_rate.to_string(), p.kp_rate.to_string()]);
            }
        }
        let path = a.out.join("power.csv");
        let header: Vec<String> = ["mu2", "omega", "j_rate", "kp_rate"].iter().map(|s| s.to_string()).collect();
        write_csv(&path, &header, &power)?;
        outputs.push(path.display().to_string());
    }
    let config = serde_json::to_value(&base).map_err(|e| IvError::Io(e.to_string()))?;
    let m = manifest(
        "simulate",
        json!({"base": config, "mu2_grid": grid, "omega_grid": a.omega_grid}),
        Some(a.seed),
        start,
        outputs,
    );
    write_json(&a.out.join("manifest.json"), &m)
}

#[derive(Debug, Serialize)]
struct Quantiles {
    p05: f64,
    p25: f64,
    p50: f64,
    p75: f64,
    p95: f64,
}

fn quantiles(mut v: Vec<f64>) -> Quantiles {
    v.sort_by(f64::total_cmp);
    let q = |p| percentile_sorted(&v, p);
    Quantiles { p05: q(0.05), p25: q(0.25), p50: q(0.5), p75: q(0.75), p95: q(0.95) }
}

#[derive(Debug, Serialize)]
struct LimitOutput {
    design: String,
    kz: usize,
    rho: f64,
    mu2: f64,
    level: f64,
    draws: usize,
    degenerate: usize,
    j_rate: f64,
    kp_rate: f64,
    moment_standard_error: Option<f64>,
    j_quantiles: Quantiles,
    kp_quantiles: Quantiles,
    alpha_liml_quantiles: Quantiles,
    beta_2sls_quantiles: Quantiles,
    beta_liml_quantiles: Quantiles,
}

fn cmd_limit(a: &LimitArgs) -> Result<()> {
    let start = Instant::now();
    let design: Design = a.design.parse()?;
    if a.draws < 1000 {
        return Err(IvError::Config(format!("--draws must be at least 1000, got {}", a.draws)));
    }
    if !(0.0..=1.0).contains(&a.level) {
        return Err(IvError::Config(format!("--level must lie in [0, 1], got {}", a.level)));
    }
    let cfg = SimulationConfig {
        n: a.n,
        seed: a.seed,
        calibration: a.calibration.parse()?,
        ..SimulationConfig::new(design, a.kz, a.rho, a.mu2)
    };
    let (model, se) = match a.numeric_moments {
        Some(nm) => {
            let (m, se) = model_from_design_numeric(&cfg, nm, a.seed)?;
            (m, Some(se))
        }
        None => (model_from_design(&cfg)?, None),
    };
    let sample = sample_limit(&model, a.draws, a.seed)?;
    let rates = rates_from_sample(&sample, model.kz() - model.kx(), a.level)?;
    let col = |f: &dyn Fn(&crate::asymptotics::LimitDraw) -> f64| quantiles(sample.draws.iter().map(f).collect());
    let out = LimitOutput {
        design: design.to_string(),
        kz: a.kz,
        rho: a.rho,
        mu2: a.mu2,
        level: a.level,
        draws: a.draws,
        degenerate: sample.degenerate,
        j_rate: rates.j_rate,
        kp_rate: rates.kp_rate,
        moment_standard_error: se,
        j_quantiles: col(&|d| d.j_limit),
        kp_quantiles: col(&|d| d.kp_limit),
        alpha_liml_quantiles: col(&|d| d.alpha_l),
        beta_2sls_quantiles: col(&|d| d.beta_2sls[0]),
        beta_liml_quantiles: col(&|d| d.beta_liml[0]),
    };
    let config = json!({"design": a.design, "kz": a.kz, "rho": a.rho, "mu2": a.mu2, "n": a.n,
        "draws": a.draws, "level": a.level, "numeric_moments": a.numeric_moments});
    match &a.out {
        Some(dir) => {
            ensure_dir(dir)?;
            let path = dir.join("limit.json");
            write_json(&path, &out)?;
            let m = manifest("limit", config, Some(a.seed), start, vec![path.display().to_string()]);
            write_json(&dir.join("manifest.json"), &m)
        }
        None => {
            let m = manifest("limit", config, Some(a.seed), start, vec!["stdout".into()]);
            print_json(&json!({"result": out, "manifest": m}))
        }
    }
}

fn cmd_eis(a: &EisArgs) -> Result<()> {
    let start = Instant::now();
    let schema: Schema = a.schema.parse()?;
    let set: InstrumentSet = a.instruments.parse()?;
    let norms = match a.normalization.as_str() {
        "psi" => vec![Normalization::PsiOnR],
        "invpsi" => vec![Normalization::InvPsiOnDc],
        "both" => vec![Normalization::PsiOnR, Normalization::InvPsiOnDc],
        other => return Err(IvError::Config(format!("unknown normalization '{other}'"))),
    };
    let loaded = load_panels(&a.data, schema, set)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let rows = run_eis(&loaded.panels, schema, &norms, a.hac_lags)?;
    ensure_dir(&a.out)?;
    let csv_path = a.out.join("eis.csv");
    let header: Vec<String> = EIS_CSV_HEADER.iter().map(|s| s.to_string()).collect();
    write_csv(&csv_path, &header, &rows.iter().map(eis_csv_row).collect::<Vec<_>>())?;
    let json_path = a.out.join("eis.json");
    write_json(&json_path, &rows)?;
    let config = json!({"data": a.data, "schema": a.schema, "normalization": a.normalization,
        "hac_lags": a.hac_lags, "instruments": a.instruments});
    let m = manifest("eis", config, None, start, vec![csv_path.display().to_string(), json_path.display().to_string()]);
    write_json(&a.out.join("manifest.json"), &m)
}
