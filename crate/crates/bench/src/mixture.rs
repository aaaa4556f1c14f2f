//! End-to-end mixture estimation: repeated trials, a single diagnostic run,
//! and the comparison against EM under two outlier geometries.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use sgrgmm::datagen::{make_mixture_data, rng_for, stream, MixtureData};
use sgrgmm::dgmm::{
    dgmm_fit_precomputed, em_fit, kmeans_center_init, kmeans_init, mixture_errors, random_init, Layout, MixtureErrors,
    MixtureEstimate, MixtureParams, PrecomputedMoments, UnconstrainedParams,
};
use sgrgmm::engine::FitReport;

use crate::config::{ExperimentConfig, Geometry, InitMode};
use crate::output::{mean_std, num, opt_num, Table};
use crate::RunError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Naive,
    NoiseAware,
    Robust,
    Em,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::NoiseAware => "noise_aware",
            Method::Robust => "robust",
            Method::Em => "em",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Setting {
    Clean,
    ContaminationOnly,
    NoiseOnly,
    Both,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::Clean, Setting::ContaminationOnly, Setting::NoiseOnly, Setting::Both];

    pub fn as_str(&self) -> &'static str {
        match self {
            Setting::Clean => "clean",
            Setting::ContaminationOnly => "contamination_only",
            Setting::NoiseOnly => "noise_only",
            Setting::Both => "both",
        }
    }

    fn noisy(&self) -> bool {
        matches!(self, Setting::NoiseOnly | Setting::Both)
    }

    fn contaminated(&self) -> bool {
        matches!(self, Setting::ContaminationOnly | Setting::Both)
    }
}

/// Starting point for trial `trial`, plus the k-means centers when they were computed.
pub fn initial_params(cfg: &ExperimentConfig, data: &MixtureData, trial: u64) -> Result<(MixtureParams, Option<Vec<DVector<f64>>>), RunError> {
    let m = &cfg.mixture;
    let mut rng = rng_for(cfg.seed, trial, stream::INIT);
    Ok(match cfg.dgmm.init {
        InitMode::Random => (random_init(&mut rng, m.k, m.d, m.rank), None),
        InitMode::KmeansCenters => {
            let (p, c) = kmeans_center_init(&mut rng, &data.observations, m.k, m.rank)?;
            (p, Some(c))
        }
        InitMode::KmeansPca => {
            let (p, _) = kmeans_init(&mut rng, &data.observations, m.k, m.rank)?;
            let c = p.mu.clone();
            (p, Some(c))
        }
    })
}

/// Hex SHA-256 over the little-endian bytes of the centers.
pub fn centers_hash(centers: &[DVector<f64>]) -> String {
    let mut h = Sha256::new();
    for c in centers {
        for x in c.iter() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub estimate: MixtureEstimate,
    pub errors: MixtureErrors,
    /// Final per-order outlier mass (robust runs with labels only).
    pub outlier_mass: Vec<Option<f64>>,
    pub seconds: f64,
    pub report: Option<FitReport>,
}

fn run_dgmm(
    cfg: &ExperimentConfig,
    pre: &PrecomputedMoments,
    data: &MixtureData,
    init: &MixtureParams,
    method: Method,
    epsilon: f64,
    noisy: bool,
) -> Result<MethodRun, RunError> {
    let m = &cfg.mixture;
    let sigma = if noisy && method != Method::Naive {
        DMatrix::identity(m.d, m.d) * m.noise
    } else {
        DMatrix::zeros(m.d, m.d)
    };
    let sgr = (method == Method::Robust).then(|| cfg.sgr.config(epsilon));
    let labels = (method == Method::Robust).then_some(data.outliers.as_slice());
    let t0 = Instant::now();
    let (params, report) = dgmm_fit_precomputed(pre.clone(), init, &sigma, &cfg.dgmm.options(m.orders), sgr, labels)?;
    let seconds = t0.elapsed().as_secs_f64();
    let estimate = MixtureEstimate::from(&params);
    let errors = mixture_errors(&estimate, &MixtureEstimate::from(&data.truth))?;
    let outlier_mass = report.rows.last().map(|r| r.outlier_mass.clone()).unwrap_or_default();
    Ok(MethodRun { method, estimate, errors, outlier_mass, seconds, report: Some(report) })
}

fn run_em(cfg: &ExperimentConfig, data: &MixtureData, centers: &[DVector<f64>]) -> Result<MethodRun, RunError> {
    let t0 = Instant::now();
    let fit = em_fit(&data.observations, centers, &cfg.em.options())?;
    let seconds = t0.elapsed().as_secs_f64();
    let errors = mixture_errors(&fit.estimate, &MixtureEstimate::from(&data.truth))?;
    Ok(MethodRun { method: Method::Em, estimate: fit.estimate, errors, outlier_mass: Vec::new(), seconds, report: None })
}

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub setting: Setting,
    pub trial: u64,
    pub runs: Vec<MethodRun>,
}

impl TrialRecord {
    pub fn run(&self, m: Method) -> Option<&MethodRun> {
        self.runs.iter().find(|r| r.method == m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSummary {
    pub err_pi: (f64, f64),
    pub err_mu: (f64, f64),
    pub err_sigma: (f64, f64),
    pub seconds: f64,
}

fn summarize(runs: &[&MethodRun]) -> ErrorSummary {
    let col = |f: fn(&MixtureErrors) -> f64| mean_std(&runs.iter().map(|r| f(&r.errors)).collect::<Vec<_>>());
    ErrorSummary {
        err_pi: col(|e| e.err_pi),
        err_mu: col(|e| e.err_mu),
        err_sigma: col(|e| e.err_sigma),
        seconds: mean_std(&runs.iter().map(|r| r.seconds).collect::<Vec<_>>()).0,
    }
}

fn error_cells(e: &MixtureErrors) -> Vec<String> {
    vec![num(e.err_pi), num(e.err_mu), num(e.err_sigma)]
}

fn mass_cell(mass: &[Option<f64>]) -> String {
    mass.iter().map(|m| opt_num(*m)).collect::<Vec<_>>().join(";")
}

#[derive(Debug, Clone)]
pub struct Trials {
    pub records: Vec<TrialRecord>,
}

impl Trials {
    pub fn summary(&self, s: Setting, m: Method) -> Option<ErrorSummary> {
        let runs: Vec<&MethodRun> = self.records.iter().filter(|r| r.setting == s).filter_map(|r| r.run(m)).collect();
        (!runs.is_empty()).then(|| summarize(&runs))
    }

    pub fn tables(&self) -> Vec<Table> {
        let methods = [Method::Naive, Method::NoiseAware, Method::Robust];
        let mut per = Table::new("dgmm_trials", &["configuration", "method", "trial", "err_pi", "err_mu", "err_sigma", "outlier_mass"]);
        let mut times = Table::new("runtimes", &["configuration", "method", "trial", "seconds"]);
        for r in &self.records {
            for run in &r.runs {
                let mut row = vec![r.setting.as_str().into(), run.method.as_str().into(), r.trial.to_string()];
                row.extend(error_cells(&run.errors));
                row.push(mass_cell(&run.outlier_mass));
                per.push(row);
                times.push(vec![r.setting.as_str().into(), run.method.as_str().into(), r.trial.to_string(), num(run.seconds)]);
            }
        }
        let mut sum = Table::new(
            "dgmm_trials_summary",
            &["configuration", "method", "err_pi_mean", "err_pi_std", "err_mu_mean", "err_mu_std", "err_sigma_mean", "err_sigma_std"],
        );
        let mut time_sum = Table::new("runtimes_summary", &["configuration", "method", "runtime_mean"]);
        for s in Setting::ALL {
            for m in methods {
                if let Some(e) = self.summary(s, m) {
                    sum.push(vec![
                        s.as_str().into(),
                        m.as_str().into(),
                        num(e.err_pi.0),
                        num(e.err_pi.1),
                        num(e.err_mu.0),
                        num(e.err_mu.1),
                        num(e.err_sigma.0),
                        num(e.err_sigma.1),
                    ]);
                    time_sum.push(vec![s.as_str().into(), m.as_str().into(), num(e.seconds)]);
                }
            }
        }
        vec![sum, per, times, time_sum]
    }
}

fn one_trial(cfg: &ExperimentConfig, setting: Setting, trial: u64) -> Result<TrialRecord, RunError> {
    let m = &cfg.mixture;
    let eps = if setting.contaminated() { m.epsilon } else { 0.0 };
    let geometry = setting.contaminated().then_some(Geometry::GaussianReplacement);
    let data = make_mixture_data(&m.spec(setting.noisy(), eps, geometry, cfg.seed, trial))?;
    let (init, _) = initial_params(cfg, &data, trial)?;
    let pre = PrecomputedMoments::new(&data.observations, m.orders);
    let runs = [Method::Naive, Method::NoiseAware, Method::Robust]
        .into_iter()
        .map(|method| {
            let mut run = run_dgmm(cfg, &pre, &data, &init, method, eps, setting.noisy())?;
            run.report = None;
            Ok(run)
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    Ok(TrialRecord { setting, trial, runs })
}

/// Four settings × three DGMM variants × `trials` seeds.
pub fn dgmm_trials(cfg: &ExperimentConfig) -> Result<Trials, RunError> {
    dgmm_trials_for(cfg, &Setting::ALL)
}

pub fn dgmm_trials_for(cfg: &ExperimentConfig, settings: &[Setting]) -> Result<Trials, RunError> {
    let jobs: Vec<(Setting, u64)> = settings.iter().flat_map(|&s| (0..cfg.trials() as u64).map(move |t| (s, t))).collect();
    let records = jobs
        .into_par_iter()
        .map(|(s, t)| one_trial(cfg, s, t))
        .collect::<Result<Vec<_>, RunError>>()?;
    Ok(Trials { records })
}

#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub run: MethodRun,
    pub truth: MixtureEstimate,
    /// Errors at the iterate of each reweighting event.
    pub trajectory: Vec<MixtureErrors>,
}

impl Diagnostics {
    pub fn report(&self) -> &FitReport {
        self.run.report.as_ref().expect("diagnostic runs keep their report")
    }

    pub fn tables(&self, orders: usize) -> Vec<Table> {
        let report = self.report();
        let header = FitReport::csv_header(orders);
        let mut fit = Table::new("dgmm_fit", &header.split(',').collect::<Vec<_>>());
        for r in &report.rows {
            let mut row = vec![r.t.to_string(), r.i.to_string(), num(r.objective), num(r.grad_norm), num(r.param_change), (r.reweighted as u8).to_string()];
            row.extend(r.outlier_mass.iter().map(|m| opt_num(*m)));
            fit.push(row);
        }
        let mut cols = vec!["t".to_string(), "i".to_string()];
        cols.extend((1..=orders).map(|k| format!("order_weight_{k}")));
        cols.extend((1..=orders).map(|k| format!("weight_change_{k}")));
        cols.extend(["fallback", "err_pi", "err_mu", "err_sigma"].map(String::from));
        let mut rw = Table { name: "dgmm_reweightings".into(), header: cols, rows: Vec::new() };
        for (ev, e) in report.reweightings.iter().zip(&self.trajectory) {
            let mut row = vec![ev.t.to_string(), ev.i.to_string()];
            row.extend(ev.order_weights.iter().map(|x| num(*x)));
            row.extend(ev.weight_change.iter().map(|x| num(*x)));
            row.push((ev.fallback.iter().any(|&f| f) as u8).to_string());
            row.extend(error_cells(e));
            rw.push(row);
        }
        let mut comp = Table::new("dgmm_components", &["component", "matched_truth", "err_pi", "err_mu", "err_sigma"]);
        let est = &self.run.estimate;
        for (j, &t) in self.run.errors.permutation.iter().enumerate() {
            let tr = &self.truth;
            comp.push(vec![
                j.to_string(),
                t.to_string(),
                num((est.pi[j] - tr.pi[t]).abs() / tr.pi[t]),
                num((&est.mu[j] - &tr.mu[t]).norm() / tr.mu[t].norm()),
                num((&est.cov[j] - &tr.cov[t]).norm() / tr.cov[t].norm()),
            ]);
        }
        let mut summary = Table::new("dgmm_summary", &["stop", "final_objective", "delta_opt", "reweightings", "err_pi", "err_mu", "err_sigma"]);
        let mut row = vec![
            report.stop.as_str().into(),
            num(report.final_objective),
            num(report.delta_opt),
            report.reweight_epochs().len().to_string(),
        ];
        row.extend(error_cells(&self.run.errors));
        summary.push(row);
        let mut times = Table::new("runtimes", &["method", "seconds"]);
        times.push(vec!["robust".into(), num(self.run.seconds)]);
        vec![fit, rw, comp, summary, times]
    }
}

/// A single RobustDGMM run on noisy, contaminated data (trial 0).
pub fn dgmm_diagnostics(cfg: &ExperimentConfig) -> Result<Diagnostics, RunError> {
    let m = &cfg.mixture;
    let data = make_mixture_data(&m.spec(true, m.epsilon, Some(Geometry::GaussianReplacement), cfg.seed, 0))?;
    let (init, _) = initial_params(cfg, &data, 0)?;
    let pre = PrecomputedMoments::new(&data.observations, m.orders);
    let run = run_dgmm(cfg, &pre, &data, &init, Method::Robust, m.epsilon, true)?;
    let truth = MixtureEstimate::from(&data.truth);
    let layout = Layout::of(&init);
    let sigma = DMatrix::identity(m.d, m.d) * m.noise;
    let trajectory = run
        .report
        .as_ref()
        .expect("robust runs keep their report")
        .reweightings
        .iter()
        .map(|ev| {
            let p = UnconstrainedParams { layout: layout.clone(), theta: ev.theta.clone() }.to_params(&sigma)?;
            Ok(mixture_errors(&MixtureEstimate::from(&p), &truth)?)
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    Ok(Diagnostics { run, truth, trajectory })
}

#[derive(Debug, Clone)]
pub struct BaselineRecord {
    pub geometry: Geometry,
    pub trial: u64,
    pub init_hash: String,
    pub runs: Vec<MethodRun>,
}

#[derive(Debug, Clone)]
pub struct Baselines {
    pub records: Vec<BaselineRecord>,
}

pub const BASELINE_METHODS: [Method; 4] = [Method::Naive, Method::NoiseAware, Method::Em, Method::Robust];

impl Baselines {
    pub fn summary(&self, g: Geometry, m: Method) -> Option<ErrorSummary> {
        let runs: Vec<&MethodRun> = self
            .records
            .iter()
            .filter(|r| r.geometry == g)
            .filter_map(|r| r.runs.iter().find(|x| x.method == m))
            .collect();
        (!runs.is_empty()).then(|| summarize(&runs))
    }

    pub fn tables(&self) -> Vec<Table> {
        let mut per = Table::new("baseline_comparison_trials", &["geometry", "method", "trial", "err_pi", "err_mu", "err_sigma", "init_hash"]);
        let mut times = Table::new("runtimes", &["geometry", "method", "trial", "seconds"]);
        for r in &self.records {
            for run in &r.runs {
                let mut row = vec![r.geometry.as_str().into(), run.method.as_str().into(), r.trial.to_string()];
                row.extend(error_cells(&run.errors));
                row.push(r.init_hash.clone());
                per.push(row);
                times.push(vec![r.geometry.as_str().into(), run.method.as_str().into(), r.trial.to_string(), num(run.seconds)]);
            }
        }
        let mut sum = Table::new(
            "baseline_comparison",
            &["geometry", "method", "err_pi_mean", "err_pi_std", "err_mu_mean", "err_mu_std", "err_sigma_mean", "err_sigma_std"],
        );
        for g in [Geometry::GaussianReplacement, Geometry::UniformBox] {
            for m in BASELINE_METHODS {
                if let Some(e) = self.summary(g, m) {
                    sum.push(vec![
                        g.as_str().into(),
                        m.as_str().into(),
                        num(e.err_pi.0),
                        num(e.err_pi.1),
                        num(e.err_mu.0),
                        num(e.err_mu.1),
                        num(e.err_sigma.0),
                        num(e.err_sigma.1),
                    ]);
                }
            }
        }
        vec![sum, per, times]
    }
}

/// Noisy data with either outlier geometry; every method starts from the
/// same k-means centers.
pub fn baseline_comparison(cfg: &ExperimentConfig) -> Result<Baselines, RunError> {
    let mut cfg = cfg.clone();
    if cfg.dgmm.init == InitMode::Random {
        cfg.dgmm.init = InitMode::KmeansCenters;
    }
    let cfg = &cfg;
    let jobs: Vec<(Geometry, u64)> = [Geometry::GaussianReplacement, Geometry::UniformBox]
        .into_iter()
        .flat_map(|g| (0..cfg.trials() as u64).map(move |t| (g, t)))
        .collect();
    let records = jobs
        .into_par_iter()
        .map(|(geometry, trial)| {
            let m = &cfg.mixture;
            let data = make_mixture_data(&m.spec(true, m.epsilon, Some(geometry), cfg.seed, trial))?;
            let (init, centers) = initial_params(cfg, &data, trial)?;
            let centers = centers.expect("k-means init yields centers");
            let pre = PrecomputedMoments::new(&data.observations, m.orders);
            let mut runs = Vec::new();
            for method in BASELINE_METHODS {
                let mut run = match method {
                    Method::Em => run_em(cfg, &data, &centers)?,
                    _ => run_dgmm(cfg, &pre, &data, &init, method, m.epsilon, true)?,
                };
                run.report = None;
                runs.push(run);
            }
            Ok(BaselineRecord { geometry, trial, init_hash: centers_hash(&centers), runs })
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    Ok(Baselines { records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_every_bit() {
        let a = vec![DVector::from_vec(vec![1.0, 2.0])];
        let b = vec![DVector::from_vec(vec![1.0, 2.0 + f64::EPSILON * 2.0])];
        assert_eq!(centers_hash(&a), centers_hash(&a.clone()));
        assert_ne!(centers_hash(&a), centers_hash(&b));
        assert_eq!(centers_hash(&a).len(), 64);
    }
}
