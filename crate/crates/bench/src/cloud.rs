//! Robust mean estimation on synthetic gradient clouds.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;

use sgrgmm::datagen::make_cloud;
use sgrgmm::sgr::{run_sgr, weighted_mean, GradientCloud, SgrIteration, SgrReport};
use sgrgmm::weights::{geometric_median, outlier_mass, EPSILON_LIMIT};

use crate::config::ExperimentConfig;
use crate::output::{mean_std, num, opt_num, Table};
use crate::RunError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    SampleMean,
    CoordinateMedian,
    GeometricMedian,
    OracleMean,
    Sgr,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::SampleMean,
        Estimator::CoordinateMedian,
        Estimator::GeometricMedian,
        Estimator::OracleMean,
        Estimator::Sgr,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Estimator::SampleMean => "sample_mean",
            Estimator::CoordinateMedian => "coordinate_median",
            Estimator::GeometricMedian => "geometric_median",
            Estimator::OracleMean => "oracle_mean",
            Estimator::Sgr => "sgr",
        }
    }
}

pub fn coordinate_median(cloud: &GradientCloud) -> DVector<f64> {
    DVector::from_fn(cloud.dim(), |j, _| {
        let mut col: Vec<f64> = cloud.points().column(j).iter().copied().collect();
        col.sort_by(f64::total_cmp);
        let m = col.len() / 2;
        if col.len() % 2 == 1 {
            col[m]
        } else {
            0.5 * (col[m - 1] + col[m])
        }
    })
}

pub fn oracle_mean(cloud: &GradientCloud) -> DVector<f64> {
    let idx = cloud.inlier_indices().unwrap_or_else(|| (0..cloud.n()).collect());
    idx.iter().map(|&i| cloud.point(i)).sum::<DVector<f64>>() / idx.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub epsilon: f64,
    pub trial: u64,
    pub method: Estimator,
    pub error: f64,
    pub outlier_mass: Option<f64>,
    pub seconds: f64,
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t0 = Instant::now();
    let v = f();
    (v, t0.elapsed().as_secs_f64())
}

/// Every estimator on one cloud; SGR runs with `assumed` and is skipped
/// outside its admissible range.
fn estimate_all(cfg: &ExperimentConfig, epsilon: f64, assumed: f64, trial: u64, methods: &[Estimator]) -> Result<Vec<Estimate>, RunError> {
    let cloud = make_cloud(&cfg.cloud.spec(epsilon, cfg.seed, trial))?;
    let truth = cloud.truth_mean().expect("benchmark clouds carry their mean").clone();
    let out = cloud.outlier_indices().unwrap_or_default();
    let mut rows = Vec::new();
    for &m in methods {
        let row = |error: f64, mass: Option<f64>, seconds: f64| Estimate { epsilon, trial, method: m, error, outlier_mass: mass, seconds };
        match m {
            Estimator::SampleMean => {
                let (e, s) = timed(|| cloud.points().row_mean().transpose());
                rows.push(row((e - &truth).norm(), None, s));
            }
            Estimator::CoordinateMedian => {
                let (e, s) = timed(|| coordinate_median(&cloud));
                rows.push(row((e - &truth).norm(), None, s));
            }
            Estimator::GeometricMedian => {
                let (e, s) = timed(|| geometric_median(&cloud.rows(), 1e-9, 1000));
                rows.push(row((e? - &truth).norm(), None, s));
            }
            Estimator::OracleMean => {
                let (e, s) = timed(|| oracle_mean(&cloud));
                rows.push(row((e - &truth).norm(), None, s));
            }
            Estimator::Sgr if assumed < EPSILON_LIMIT => {
                let (res, s) = timed(|| run_sgr(&cloud, &cfg.sgr.config(assumed)));
                let (w, _) = res?;
                let e = weighted_mean(&cloud, &w)?;
                rows.push(row((e - &truth).norm(), Some(outlier_mass(&w, &out)?), s));
            }
            Estimator::Sgr => {}
        }
    }
    Ok(rows)
}

fn collect<T: Send>(jobs: Vec<(f64, f64, u64)>, f: impl Fn(f64, f64, u64) -> Result<Vec<T>, RunError> + Sync) -> Result<Vec<T>, RunError> {
    let parts: Vec<Result<Vec<T>, RunError>> = jobs.into_par_iter().map(|(e, a, t)| f(e, a, t)).collect();
    let mut all = Vec::new();
    for p in parts {
        all.extend(p?);
    }
    Ok(all)
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub estimates: Vec<Estimate>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean_err: f64,
    pub std_err: f64,
    pub mean_outlier_mass: Option<f64>,
    pub max_outlier_mass: Option<f64>,
}

fn summarize<'a>(rows: impl Iterator<Item = &'a Estimate>) -> Option<Summary> {
    let rows: Vec<&Estimate> = rows.collect();
    if rows.is_empty() {
        return None;
    }
    let errs: Vec<f64> = rows.iter().map(|r| r.error).collect();
    let (mean_err, std_err) = mean_std(&errs);
    let masses: Vec<f64> = rows.iter().filter_map(|r| r.outlier_mass).collect();
    let (mean_outlier_mass, max_outlier_mass) = if masses.is_empty() {
        (None, None)
    } else {
        (Some(mean_std(&masses).0), Some(masses.iter().copied().fold(0.0, f64::max)))
    };
    Some(Summary { mean_err, std_err, mean_outlier_mass, max_outlier_mass })
}

impl Sweep {
    pub fn summary(&self, epsilon: f64, method: Estimator) -> Option<Summary> {
        summarize(self.estimates.iter().filter(|r| r.epsilon == epsilon && r.method == method))
    }

    /// Largest per-trial `error(SGR) − error(oracle)` at `epsilon`.
    pub fn max_gap(&self, epsilon: f64) -> Option<f64> {
        let pick = |m: Estimator| -> Vec<(u64, f64)> {
            self.estimates.iter().filter(|r| r.epsilon == epsilon && r.method == m).map(|r| (r.trial, r.error)).collect()
        };
        let oracle = pick(Estimator::OracleMean);
        let sgr = pick(Estimator::Sgr);
        sgr.iter()
            .filter_map(|(t, e)| oracle.iter().find(|(u, _)| u == t).map(|(_, o)| e - o))
            .reduce(f64::max)
    }

    pub fn epsilons(&self) -> Vec<f64> {
        let mut eps: Vec<f64> = Vec::new();
        for r in &self.estimates {
            if !eps.contains(&r.epsilon) {
                eps.push(r.epsilon);
            }
        }
        eps
    }

    pub fn tables(&self) -> Vec<Table> {
        let mut summary = Table::new("contamination_sweep", &["epsilon", "method", "mean_err", "std_err", "mean_outlier_mass"]);
        for eps in self.epsilons() {
            for m in Estimator::ALL {
                if let Some(s) = self.summary(eps, m) {
                    summary.push(vec![num(eps), m.as_str().into(), num(s.mean_err), num(s.std_err), opt_num(s.mean_outlier_mass)]);
                }
            }
        }
        let mut trials = Table::new("contamination_sweep_trials", &["epsilon", "trial", "method", "error", "outlier_mass"]);
        let mut times = Table::new("runtimes", &["epsilon", "trial", "method", "seconds"]);
        for r in &self.estimates {
            trials.push(vec![num(r.epsilon), r.trial.to_string(), r.method.as_str().into(), num(r.error), opt_num(r.outlier_mass)]);
            times.push(vec![num(r.epsilon), r.trial.to_string(), r.method.as_str().into(), num(r.seconds)]);
        }
        vec![summary, trials, times]
    }
}

pub fn contamination_sweep(cfg: &ExperimentConfig) -> Result<Sweep, RunError> {
    let jobs = cfg
        .sweep
        .epsilons
        .iter()
        .flat_map(|&e| (0..cfg.trials() as u64).map(move |t| (e, e, t)))
        .collect();
    let estimates = collect(jobs, |e, a, t| estimate_all(cfg, e, a, t, &Estimator::ALL))?;
    Ok(Sweep { estimates })
}

#[derive(Debug, Clone)]
pub struct OuterLoop {
    pub report: SgrReport,
    pub oracle_error: f64,
    /// Top eigenvalue of the inlier covariance.
    pub inlier_op_norm: f64,
    pub seconds: f64,
}

impl OuterLoop {
    pub fn history(&self) -> &[SgrIteration] {
        &self.report.history
    }

    pub fn tables(&self) -> Vec<Table> {
        let mut t = Table::new(
            "outer_loop",
            &["s", "gamma", "mean_error", "outlier_mass", "weight_l1_change", "center_l2_change", "inlier_op_norm", "oracle_error"],
        );
        for h in &self.report.history {
            t.push(vec![
                h.s.to_string(),
                num(h.gamma),
                opt_num(h.mean_error),
                opt_num(h.outlier_mass),
                num(h.weight_l1_change),
                num(h.center_l2_change),
                num(self.inlier_op_norm),
                num(self.oracle_error),
            ]);
        }
        let mut meta = Table::new("outer_loop_summary", &["stop_reason", "nu", "eta_w", "eta_rho", "iterations"]);
        meta.push(vec![
            self.report.stop_reason.as_str().into(),
            num(self.report.nu),
            num(self.report.eta_w),
            num(self.report.eta_rho),
            self.report.history.len().to_string(),
        ]);
        let mut times = Table::new("runtimes", &["method", "seconds"]);
        times.push(vec!["sgr".into(), num(self.seconds)]);
        vec![t, meta, times]
    }
}

/// One SGR run on trial 0 at the configured contamination level.
pub fn outer_loop(cfg: &ExperimentConfig) -> Result<OuterLoop, RunError> {
    let spec = cfg.cloud.spec(cfg.cloud.epsilon, cfg.seed, 0);
    let cloud = make_cloud(&spec)?;
    let ((_, report), seconds) = {
        let (r, s) = timed(|| run_sgr(&cloud, &cfg.sgr.config(cfg.cloud.epsilon)));
        (r?, s)
    };
    let truth = cloud.truth_mean().expect("benchmark clouds carry their mean");
    Ok(OuterLoop {
        oracle_error: (oracle_mean(&cloud) - truth).norm(),
        inlier_op_norm: spec.inlier_cov_diag.iter().copied().fold(0.0, f64::max),
        report,
        seconds,
    })
}

#[derive(Debug, Clone)]
pub struct Sensitivity {
    pub true_epsilon: f64,
    pub estimates: Vec<Estimate>,
}

impl Sensitivity {
    /// SGR summary at an assumed level (`Estimate::epsilon` holds the assumed value).
    pub fn summary(&self, assumed: f64) -> Option<Summary> {
        summarize(self.estimates.iter().filter(|r| r.epsilon == assumed && r.method == Estimator::Sgr))
    }

    pub fn oracle(&self) -> Option<Summary> {
        summarize(self.estimates.iter().filter(|r| r.method == Estimator::OracleMean))
    }

    pub fn tables(&self, assumed: &[f64]) -> Vec<Table> {
        let mut t = Table::new(
            "epsilon_sensitivity",
            &["true_epsilon", "assumed_epsilon", "mean_err", "std_err", "mean_outlier_mass", "oracle_mean_err"],
        );
        let oracle = self.oracle().map(|s| s.mean_err);
        for &a in assumed {
            if let Some(s) = self.summary(a) {
                t.push(vec![num(self.true_epsilon), num(a), num(s.mean_err), num(s.std_err), opt_num(s.mean_outlier_mass), opt_num(oracle)]);
            }
        }
        let mut times = Table::new("runtimes", &["assumed_epsilon", "trial", "method", "seconds"]);
        for r in &self.estimates {
            times.push(vec![num(r.epsilon), r.trial.to_string(), r.method.as_str().into(), num(r.seconds)]);
        }
        vec![t, times]
    }
}

pub fn epsilon_sensitivity(cfg: &ExperimentConfig) -> Result<Sensitivity, RunError> {
    let eps = cfg.sensitivity.true_epsilon;
    let trials = cfg.trials() as u64;
    let mut jobs: Vec<(f64, f64, u64)> = Vec::new();
    for &a in &cfg.sensitivity.assumed {
        jobs.extend((0..trials).map(|t| (eps, a, t)));
    }
    let mut estimates = collect(jobs, |e, a, t| {
        let mut rows = estimate_all(cfg, e, a, t, &[Estimator::Sgr])?;
        for r in &mut rows {
            r.epsilon = a;
        }
        Ok(rows)
    })?;
    let oracle = collect((0..trials).map(|t| (eps, eps, t)).collect(), |e, a, t| estimate_all(cfg, e, a, t, &[Estimator::OracleMean]))?;
    estimates.extend(oracle);
    Ok(Sensitivity { true_epsilon: eps, estimates })
}
