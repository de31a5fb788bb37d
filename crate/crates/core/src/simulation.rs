//! Monte Carlo engine: size of J and KP, and the bias and dispersion of 2SLS
//! and LIML, over replications of a design.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chisq::chi2_critical;
use crate::covariance::{meat, CovarianceSpec};
use crate::designs::{generate_dataset, replication_rng, Design, SimulationConfig};
use crate::error::{IvError, Result};
use crate::estimators::{estimate_2sls, estimate_gmm2, estimate_liml};
use crate::linalg::percentile_sorted;
use crate::overid::{j_test, kp_test_with};

/// Degenerate share above which a summary is flagged.
pub const DEGENERATE_FLAG_SHARE: f64 = 0.001;

/// Statistics from one replication. The true β is 0 in every design, so the
/// estimates are also the estimation errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub beta_2sls: f64,
    pub beta_liml: f64,
    pub j: f64,
    pub kp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRates {
    pub level: f64,
    pub j_rate: f64,
    pub kp_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub config: SimulationConfig,
    pub rejection: Vec<LevelRates>,
    pub median_bias_2sls: f64,
    pub median_bias_liml: f64,
    pub range_90_10_2sls: f64,
    pub range_90_10_liml: f64,
    pub pi_used: f64,
    pub replications_completed: usize,
    pub degenerate_count: usize,
    /// Set when more than 0.1% of replications were degenerate.
    pub degenerate_flag: bool,
}

impl SimulationSummary {
    pub fn rates_at(&self, level: f64) -> Option<&LevelRates> {
        self.rejection.iter().find(|r| (r.level - level).abs() < 1e-12)
    }
}

/// J (2SLS first step, HC0 weight) and KP (HC0) for one dataset, together
/// with the 2SLS and LIML slopes.
pub fn replication_statistics(dataset: &crate::model::IvDataset) -> Result<Replication> {
    let d = dataset.partial_out()?;
    let tsls = estimate_2sls(&d)?;
    let s = meat(&d.z, &tsls.residuals, CovarianceSpec::Hc0)?;
    let gmm = estimate_gmm2(&d, &tsls, &s)?;
    let j = j_test(&d, &tsls, &gmm, CovarianceSpec::Hc0)?.statistic;
    let liml = estimate_liml(&d)?;
    let kp = kp_test_with(&d, &liml, CovarianceSpec::Hc0)?.statistic;
    Ok(Replication { beta_2sls: tsls.beta_hat[0], beta_liml: liml.beta_hat[0], j, kp })
}

/// Runs every replication and returns them in index order; `None` marks a
/// degenerate replication.
pub fn run_replications(config: &SimulationConfig) -> Result<(f64, Vec<Option<Replication>>)> {
    config.validate()?;
    let pi = config.pi();
    let reps = (0..config.replications as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = replication_rng(config.seed, i);
            generate_dataset(config, pi, &mut rng).and_then(|d| replication_statistics(&d)).ok()
        })
        .collect();
    Ok((pi, reps))
}

pub fn run_design(config: &SimulationConfig) -> Result<SimulationSummary> {
    let (pi, reps) = run_replications(config)?;
    summarize(config, pi, &reps)
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

pub fn summarize(config: &SimulationConfig, pi: f64, reps: &[Option<Replication>]) -> Result<SimulationSummary> {
    let ok: Vec<Replication> = reps.iter().flatten().copied().collect();
    let degenerate = reps.len() - ok.len();
    if ok.is_empty() {
        return Err(IvError::Convergence("every replication was degenerate".into()));
    }
    let df = config.kz - 1;
    let nr = ok.len() as f64;
    let mut rejection = Vec::with_capacity(config.levels.len());
    for &level in &config.levels {
        let crit = chi2_critical(level, df)?;
        rejection.push(LevelRates {
            level,
            j_rate: ok.iter().filter(|r| r.j > crit).count() as f64 / nr,
            kp_rate: ok.iter().filter(|r| r.kp > crit).count() as f64 / nr,
        });
    }
    let b2 = sorted(ok.iter().map(|r| r.beta_2sls).collect());
    let bl = sorted(ok.iter().map(|r| r.beta_liml).collect());
    let range = |v: &[f64]| percentile_sorted(v, 0.9) - percentile_sorted(v, 0.1);
    Ok(SimulationSummary {
        config: config.clone(),
        rejection,
        median_bias_2sls: percentile_sorted(&b2, 0.5),
        median_bias_liml: percentile_sorted(&bl, 0.5),
        range_90_10_2sls: range(&b2),
        range_90_10_liml: range(&bl),
        pi_used: pi,
        replications_completed: ok.len(),
        degenerate_count: degenerate,
        degenerate_flag: degenerate as f64 > DEGENERATE_FLAG_SHARE * reps.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub omega: f64,
    pub j_rate: f64,
    pub kp_rate: f64,
}

/// 5%-level rejection rates of J and KP across direct-effect sizes ω.
pub fn power_curve(config: &SimulationConfig, omega_grid: &[f64]) -> Result<Vec<PowerPoint>> {
    let Design::Power { alpha, .. } = config.design else {
        return Err(IvError::Config("power curves need the power design".into()));
    };
    omega_grid
        .iter()
        .map(|&omega| {
            let cfg = SimulationConfig { design: Design::Power { alpha, omega }, levels: vec![0.05], ..config.clone() };
            let s = run_design(&cfg)?;
            let r = &s.rejection[0];
            Ok(PowerPoint { omega, j_rate: r.j_rate, kp_rate: r.kp_rate })
        })
        .collect()
}

/// Flat CSV header matching [`summary_csv_row`].
pub fn summary_csv_header(levels: &[f64]) -> Vec<String> {
    let mut h: Vec<String> =
        ["design", "n", "kz", "rho", "mu2", "replications", "seed", "pi"].iter().map(|s| s.to_string()).collect();
    for l in levels {
        h.push(format!("j_rate_{l}"));
        h.push(format!("kp_rate_{l}"));
    }
    h.extend(
        [
            "median_bias_2sls",
            "median_bias_liml",
            "range_90_10_2sls",
            "range_90_10_liml",
            "replications_completed",
            "degenerate_count",
            "degenerate_flag",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    h
}

pub fn summary_csv_row(s: &SimulationSummary) -> Vec<String> {
    let c = &s.config;
    let mut row = vec![
        c.design.to_string(),
        c.n.to_string(),
        c.kz.to_string(),
        c.rho.to_string(),
        c.mu2_target.to_string(),
        c.replications.to_string(),
        c.seed.to_string(),
        s.pi_used.to_string(),
    ];
    for r in &s.rejection {
        row.push(r.j_rate.to_string());
        row.push(r.kp_rate.to_string());
    }
    row.extend([
        s.median_bias_2sls.to_string(),
        s.median_bias_liml.to_string(),
        s.range_90_10_2sls.to_string(),
        s.range_90_10_liml.to_string(),
        s.replications_completed.to_string(),
        s.degenerate_count.to_string(),
        s.degenerate_flag.to_string(),
    ]);
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(design: Design) -> SimulationConfig {
        SimulationConfig { replications: 300, seed: 42, ..SimulationConfig::new(design, 2, 0.5, 8.0) }
    }

    #[test]
    fn zero_replications_is_config_error() {
        let cfg = SimulationConfig { replications: 0, ..small(Design::Design1 { alpha: 0.5 }) };
        assert!(matches!(run_design(&cfg), Err(IvError::Config(_))));
    }

    #[test]
    fn same_seed_same_summary_regardless_of_threads() {
        let cfg = small(Design::Design1 { alpha: 1.0 });
        let a = run_design(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| run_design(&cfg)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.replications_completed + a.degenerate_count, 300);
    }

    #[test]
    fn rates_are_probabilities() {
        let s = run_design(&small(Design::Design2 { alpha: 0.1 })).unwrap();
        for r in &s.rejection {
            assert!((0.0..=1.0).contains(&r.j_rate) && (0.0..=1.0).contains(&r.kp_rate));
        }
        assert!(s.range_90_10_2sls > 0.0);
    }

    #[test]
    fn power_curve_needs_power_design() {
        assert!(power_curve(&small(Design::Design1 { alpha: 0.5 }), &[0.0]).is_err());
    }

    #[test]
    fn csv_row_matches_header() {
        let s = run_design(&small(Design::Design1 { alpha: 0.5 })).unwrap();
        assert_eq!(summary_csv_header(&s.config.levels).len(), summary_csv_row(&s).len());
    }
}
