//! Initialization, the three DGMM estimators, the EM baseline and error metrics.

use itertools::Itertools;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::kernel::PrecomputedMoments;
use super::model::DgmmModel;
use super::params::MixtureParams;
use crate::datagen::{random_orthonormal, random_sphere};
use crate::engine::{fit, DriverConfig, FitReport};
use crate::sgr::SgrConfig;
use crate::specmat::{sym_eigen, SymMatrix};
use crate::{Error, Result};

/// Uniform `π`, unit-sphere means and random orthonormal factors.
pub fn random_init<R: Rng>(rng: &mut R, k: usize, d: usize, rank: usize) -> MixtureParams {
    MixtureParams {
        pi: vec![1.0 / k as f64; k],
        mu: (0..k).map(|_| random_sphere(rng, d, 1.0)).collect(),
        v: (0..k).map(|_| random_orthonormal(rng, d, rank)).collect(),
        sigma_xi: DMatrix::zeros(d, d),
    }
}

/// k-means++ seeding: the first center uniformly, the rest by squared distance.
pub fn kmeans_pp<R: Rng>(rng: &mut R, y: &DMatrix<f64>, k: usize) -> Result<Vec<DVector<f64>>> {
    let n = y.nrows();
    if k == 0 || n < k {
        return Err(Error::Config(format!("cannot seed {k} centers from {n} points")));
    }
    let row = |i: usize| y.row(i).transpose();
    let mut centers = vec![row(rng.random_range(0..n))];
    let mut dist: Vec<f64> = (0..n).map(|i| (row(i) - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&dist) {
            Ok(w) => w.sample(rng),
            // every point coincides with a center
            Err(_) => rng.random_range(0..n),
        };
        let c = row(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min((row(i) - &c).norm_squared());
        }
        centers.push(c);
    }
    Ok(centers)
}

/// Lloyd iterations from `centers`; returns the final centers and labels.
pub fn lloyd(y: &DMatrix<f64>, mut centers: Vec<DVector<f64>>, max_iter: usize) -> (Vec<DVector<f64>>, Vec<usize>) {
    let n = y.nrows();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, l) in labels.iter_mut().enumerate() {
            let yi = y.row(i).transpose();
            let best = (0..centers.len())
                .min_by(|&a, &b| (&yi - &centers[a]).norm_squared().total_cmp(&(&yi - &centers[b]).norm_squared()))
                .unwrap();
            changed |= *l != best;
            *l = best;
        }
        if !changed {
            break;
        }
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == j).collect();
            if !members.is_empty() {
                *c = members.iter().map(|&i| y.row(i).transpose()).sum::<DVector<f64>>() / members.len() as f64;
            }
        }
    }
    (centers, labels)
}

/// Seeds from k-means++ plus Lloyd: cluster fractions, centers, and the top
/// `rank` principal directions of each cluster scaled by their spread.
pub fn kmeans_init<R: Rng>(rng: &mut R, y: &DMatrix<f64>, k: usize, rank: usize) -> Result<(MixtureParams, Vec<usize>)> {
    let (n, d) = y.shape();
    let (centers, labels) = lloyd(y, kmeans_pp(rng, y, k)?, 100);
    let mut pi = Vec::with_capacity(k);
    let mut v = Vec::with_capacity(k);
    for (j, c) in centers.iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == j).collect();
        pi.push(members.len().max(1) as f64);
        let mut cov = DMatrix::zeros(d, d);
        for &i in &members {
            let r = y.row(i).transpose() - c;
            cov.ger(1.0, &r, &r, 1.0);
        }
        cov /= members.len().max(1) as f64;
        let eig = sym_eigen(&SymMatrix::symmetrized(cov))?;
        v.push(DMatrix::from_fn(d, rank, |r, c| eig.vectors[(r, c)] * eig.values[c].max(0.0).sqrt()));
    }
    let total: f64 = pi.iter().sum();
    let params = MixtureParams {
        pi: pi.into_iter().map(|p| p / total).collect(),
        mu: centers,
        v,
        sigma_xi: DMatrix::zeros(d, d),
    };
    Ok((params, labels))
}

/// Random initialization with the means replaced by k-means centers, the
/// same centers the EM baseline starts from.
pub fn kmeans_center_init<R: Rng>(rng: &mut R, y: &DMatrix<f64>, k: usize, rank: usize) -> Result<(MixtureParams, Vec<DVector<f64>>)> {
    let (centers, _) = lloyd(y, kmeans_pp(rng, y, k)?, 100);
    let mut params = random_init(rng, k, y.ncols(), rank);
    params.mu = centers.clone();
    Ok((params, centers))
}

/// Shape and schedule shared by the DGMM estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct DgmmOptions {
    pub orders: usize,
    pub driver: DriverConfig,
}

/// Moment matching from `init` with noise model `sigma_xi`; `sgr = None`
/// keeps uniform observation weights.
pub fn dgmm_fit(
    y: &DMatrix<f64>,
    init: &MixtureParams,
    sigma_xi: &DMatrix<f64>,
    opts: &DgmmOptions,
    sgr: Option<SgrConfig>,
    outliers: Option<&[bool]>,
) -> Result<(MixtureParams, FitReport)> {
    dgmm_fit_precomputed(PrecomputedMoments::new(y, opts.orders), init, sigma_xi, opts, sgr, outliers)
}

pub fn dgmm_fit_precomputed(
    pre: PrecomputedMoments,
    init: &MixtureParams,
    sigma_xi: &DMatrix<f64>,
    opts: &DgmmOptions,
    sgr: Option<SgrConfig>,
    outliers: Option<&[bool]>,
) -> Result<(MixtureParams, FitReport)> {
    if pre.orders() != opts.orders {
        return Err(Error::Config("precomputed orders disagree with the options".into()));
    }
    let model = DgmmModel::new(pre, init.k(), init.ranks(), sigma_xi.clone())?;
    let theta0 = model.theta_of(init)?;
    let driver = DriverConfig { sgr, ..opts.driver.clone() };
    let (theta, report) = fit(&model, &theta0, &driver, outliers)?;
    Ok((model.params(&theta), report))
}

/// Ignores the additive noise and any contamination.
pub fn naive_fit(y: &DMatrix<f64>, init: &MixtureParams, opts: &DgmmOptions) -> Result<(MixtureParams, FitReport)> {
    let d = y.ncols();
    dgmm_fit(y, init, &DMatrix::zeros(d, d), opts, None, None)
}

/// Includes the known noise covariance; uniform observation weights.
pub fn noise_aware_fit(
    y: &DMatrix<f64>,
    init: &MixtureParams,
    sigma_xi: &DMatrix<f64>,
    opts: &DgmmOptions,
) -> Result<(MixtureParams, FitReport)> {
    dgmm_fit(y, init, sigma_xi, opts, None, None)
}

/// Noise-aware moments with spectral reweighting of the per-observation gradients.
pub fn robust_fit(
    y: &DMatrix<f64>,
    init: &MixtureParams,
    sigma_xi: &DMatrix<f64>,
    opts: &DgmmOptions,
    sgr: SgrConfig,
    outliers: Option<&[bool]>,
) -> Result<(MixtureParams, FitReport)> {
    dgmm_fit(y, init, sigma_xi, opts, Some(sgr), outliers)
}

/// A fitted mixture reduced to what the error metrics compare.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureEstimate {
    pub pi: Vec<f64>,
    pub mu: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

impl From<&MixtureParams> for MixtureEstimate {
    /// Uses the signal covariances `V_j V_jᵀ`.
    fn from(p: &MixtureParams) -> Self {
        Self { pi: p.pi.clone(), mu: p.mu.clone(), cov: (0..p.k()).map(|j| p.signal_cov(j)).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureErrors {
    pub err_pi: f64,
    pub err_mu: f64,
    pub err_sigma: f64,
    /// Estimated component `j` is matched to true component `permutation[j]`.
    pub permutation: Vec<usize>,
}

/// Average relative errors under the relabeling with the smallest mean
/// relative covariance error.
pub fn mixture_errors(est: &MixtureEstimate, truth: &MixtureEstimate) -> Result<MixtureErrors> {
    let k = truth.pi.len();
    if est.pi.len() != k {
        return Err(Error::KMismatch { est: est.pi.len(), truth: k });
    }
    if k > 8 {
        return Err(Error::Config("permutation search is limited to 8 components".into()));
    }
    let cov_err = |j: usize, t: usize| (&est.cov[j] - &truth.cov[t]).norm() / truth.cov[t].norm();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..k).permutations(k) {
        let score = (0..k).map(|j| cov_err(j, perm[j])).sum::<f64>();
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, perm));
        }
    }
    let (score, perm) = best.unwrap();
    let kf = k as f64;
    Ok(MixtureErrors {
        err_pi: (0..k).map(|j| (est.pi[j] - truth.pi[perm[j]]).abs() / truth.pi[perm[j]].abs()).sum::<f64>() / kf,
        err_mu: (0..k).map(|j| (&est.mu[j] - &truth.mu[perm[j]]).norm() / truth.mu[perm[j]].norm()).sum::<f64>() / kf,
        err_sigma: score / kf,
        permutation: perm,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub reg: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-8, reg: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub estimate: MixtureEstimate,
    /// Mean log-likelihood after each iteration.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    /// Set when a component needed more than the base regularization.
    pub singular: bool,
}

fn log_densities(y: &DMatrix<f64>, est: &MixtureEstimate, reg: f64) -> (DMatrix<f64>, bool) {
    let (n, d) = y.shape();
    let k = est.pi.len();
    let mut out = DMatrix::zeros(n, k);
    let mut singular = false;
    let log2pi = (2.0 * std::f64::consts::PI).ln();
    for j in 0..k {
        let mut jitter = 0.0;
        let chol = loop {
            match Cholesky::new(&est.cov[j] + DMatrix::identity(d, d) * jitter) {
                Some(c) => break c,
                None => {
                    singular = true;
                    jitter = if jitter == 0.0 { reg.max(1e-12) } else { jitter * 10.0 };
                }
            }
        };
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        for i in 0..n {
            let r = y.row(i).transpose() - &est.mu[j];
            let z = chol.l().solve_lower_triangular(&r).unwrap();
            out[(i, j)] = est.pi[j].ln() - 0.5 * (d as f64 * log2pi + logdet + z.norm_squared());
        }
    }
    (out, singular)
}

/// Full-covariance EM started from hard assignment to `init_centers`.
pub fn em_fit(y: &DMatrix<f64>, init_centers: &[DVector<f64>], opts: &EmOptions) -> Result<EmFit> {
    let (n, d) = y.shape();
    let k = init_centers.len();
    if k == 0 || n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut resp = DMatrix::zeros(n, k);
    for i in 0..n {
        let yi = y.row(i).transpose();
        let j = (0..k)
            .min_by(|&a, &b| (&yi - &init_centers[a]).norm_squared().total_cmp(&(&yi - &init_centers[b]).norm_squared()))
            .unwrap();
        resp[(i, j)] = 1.0;
    }
    let mut history = Vec::new();
    let mut singular = false;
    let mut converged = false;
    let mut est;
    loop {
        // M step
        let mut pi = Vec::with_capacity(k);
        let mut mu = Vec::with_capacity(k);
        let mut cov = Vec::with_capacity(k);
        for j in 0..k {
            let nj = resp.column(j).sum() + 10.0 * f64::EPSILON;
            let m = y.transpose() * resp.column(j) / nj;
            let mut c = DMatrix::identity(d, d) * opts.reg;
            for i in 0..n {
                let r = y.row(i).transpose() - &m;
                c.ger(resp[(i, j)] / nj, &r, &r, 1.0);
            }
            pi.push(nj / n as f64);
            mu.push(m);
            cov.push(c);
        }
        est = MixtureEstimate { pi, mu, cov };

        // E step
        let (logp, sing) = log_densities(y, &est, opts.reg);
        singular |= sing;
        let mut ll = 0.0;
        for i in 0..n {
            let top = logp.row(i).max();
            let s: f64 = logp.row(i).iter().map(|v| (v - top).exp()).sum();
            let lse = top + s.ln();
            ll += lse;
            for j in 0..k {
                resp[(i, j)] = (logp[(i, j)] - lse).exp();
            }
        }
        ll /= n as f64;
        if !ll.is_finite() {
            return Err(Error::NonFiniteObjective);
        }
        let done = history.last().is_some_and(|&prev: &f64| (ll - prev).abs() <= opts.tol);
        history.push(ll);
        if done {
            converged = true;
            break;
        }
        if history.len() >= opts.max_iter {
            break;
        }
    }
    Ok(EmFit { estimate: est, log_likelihood: history, converged, singular })
}
