//! Spectral gradient reweighting.
//!
//! For a fixed center the weights come out of a two-player game: a density
//! matrix picks the direction of largest weighted spread (matrix
//! multiplicative weights) and the sample weights shrink the points that are
//! expensive along it (multiplicative weights plus a KL projection onto the
//! capped simplex). The outer loop moves the center to the weighted mean and
//! replays the game until the spectral certificate is small or the iterates
//! stop moving.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::specmat::{gibbs_state, op_norm, SymMatrix};
use crate::weights::{geometric_median, kl_project, outlier_mass, WeightVector, EPSILON_LIMIT};
use crate::{Error, Result};

/// Above this size the diameter is bounded instead of scanned.
const EXACT_DIAMETER_LIMIT: usize = 5000;
const FIXED_POINT_TOL: f64 = 1e-7;

/// `N` points in `R^p`, stored row-wise, with optional diagnostics that the
/// algorithm never reads.
#[derive(Debug, Clone)]
pub struct GradientCloud {
    points: DMatrix<f64>,
    outliers: Option<Vec<bool>>,
    truth_mean: Option<DVector<f64>>,
}

impl GradientCloud {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::EmptyInput);
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput("gradient cloud"));
        }
        Ok(Self { points, outliers: None, truth_mean: None })
    }

    pub fn from_rows(rows: &[DVector<f64>]) -> Result<Self> {
        let p = rows.first().ok_or(Error::EmptyInput)?.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != p) {
            return Err(Error::DimMismatch { expected: p, got: bad.len() });
        }
        Self::new(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
    }

    /// Marks which rows are outliers (`true`).
    pub fn with_labels(mut self, outliers: Vec<bool>) -> Result<Self> {
        if outliers.len() != self.n() {
            return Err(Error::DimMismatch { expected: self.n(), got: outliers.len() });
        }
        self.outliers = Some(outliers);
        Ok(self)
    }

    pub fn with_truth_mean(mut self, mean: DVector<f64>) -> Result<Self> {
        if mean.len() != self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), got: mean.len() });
        }
        self.truth_mean = Some(mean);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn point(&self, n: usize) -> DVector<f64> {
        self.points.row(n).transpose()
    }

    pub fn rows(&self) -> Vec<DVector<f64>> {
        (0..self.n()).map(|n| self.point(n)).collect()
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.outliers.as_deref()
    }

    pub fn truth_mean(&self) -> Option<&DVector<f64>> {
        self.truth_mean.as_ref()
    }

    pub fn outlier_indices(&self) -> Option<Vec<usize>> {
        self.outliers
            .as_ref()
            .map(|l| l.iter().enumerate().filter(|(_, &o)| o).map(|(i, _)| i).collect())
    }

    pub fn inlier_indices(&self) -> Option<Vec<usize>> {
        self.outliers
            .as_ref()
            .map(|l| l.iter().enumerate().filter(|(_, &o)| !o).map(|(i, _)| i).collect())
    }

    fn centered(&self, center: &DVector<f64>) -> Result<DMatrix<f64>> {
        if center.len() != self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), got: center.len() });
        }
        let mut z = self.points.clone();
        for mut row in z.row_iter_mut() {
            row -= center.transpose();
        }
        Ok(z)
    }
}

/// Squared diameter of the cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizingScale {
    pub nu: f64,
    /// `true` when `nu` is the centroid-radius bound rather than the exact diameter.
    pub upper_bound: bool,
}

pub fn normalizing_scale(cloud: &GradientCloud) -> NormalizingScale {
    let n = cloud.n();
    let g = cloud.points();
    if n > EXACT_DIAMETER_LIMIT {
        let centroid = g.row_mean();
        let radius = g.row_iter().map(|r| (r - &centroid).norm()).fold(0.0, f64::max);
        return NormalizingScale { nu: (2.0 * radius).powi(2), upper_bound: true };
    }
    let mut best = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            best = best.max((g.row(i) - g.row(j)).norm_squared());
        }
    }
    NormalizingScale { nu: best, upper_bound: false }
}

/// `zᵀ ρ z`
pub fn mw_loss(z: &DVector<f64>, rho: &crate::specmat::DensityMatrix) -> Result<f64> {
    if z.len() != rho.dim() {
        return Err(Error::DimMismatch { expected: rho.dim(), got: z.len() });
    }
    Ok(rho.as_matrix().dot(&(z * z.transpose())))
}

fn check_weights(cloud: &GradientCloud, w: &WeightVector) -> Result<()> {
    if w.len() != cloud.n() {
        return Err(Error::DimMismatch { expected: cloud.n(), got: w.len() });
    }
    Ok(())
}

/// `Zᵀ diag(w) Z` for the row matrix `Z`.
fn weighted_gram(z: &DMatrix<f64>, w: &[f64]) -> SymMatrix {
    let mut scaled = z.clone();
    for (mut row, &wn) in scaled.row_iter_mut().zip(w) {
        row *= wn;
    }
    SymMatrix::symmetrized(scaled.transpose() * z)
}

/// `Σ_n w_n (g_n - μ̂)(g_n - μ̂)ᵀ`
pub fn gain_matrix(cloud: &GradientCloud, w: &WeightVector, center: &DVector<f64>) -> Result<SymMatrix> {
    check_weights(cloud, w)?;
    let z = cloud.centered(center)?;
    Ok(weighted_gram(&z, w.values()))
}

pub fn weighted_mean(cloud: &GradientCloud, w: &WeightVector) -> Result<DVector<f64>> {
    check_weights(cloud, w)?;
    Ok(cloud.points().transpose() * w.as_dvector())
}

pub fn weighted_covariance(cloud: &GradientCloud, w: &WeightVector) -> Result<SymMatrix> {
    let mean = weighted_mean(cloud, w)?;
    gain_matrix(cloud, w, &mean)
}

/// How a step size is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    /// The regret-optimal choice `ν⁻¹ √(log(·)/T)`.
    Auto,
    /// A raw value of `η`.
    Absolute(f64),
    /// `η ν` is fixed to the given value.
    Scaled(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopThreshold {
    /// Inlier-scale plug-in with the given headroom multiplier.
    Auto { headroom: f64 },
    Fixed(f64),
    /// Never stop on the certificate.
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Restart {
    Uniform,
    WarmStart,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CenterInit {
    GeometricMedian,
    Provided(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgrConfig {
    pub epsilon: f64,
    pub inner_rounds: usize,
    pub eta_w: StepSize,
    pub eta_rho: StepSize,
    pub c_stop: StopThreshold,
    pub s_max: usize,
    pub restart: Restart,
    pub center_init: CenterInit,
}

impl SgrConfig {
    /// Defaults for a given contamination level.
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            inner_rounds: 100,
            eta_w: StepSize::Scaled(0.5),
            eta_rho: StepSize::Scaled(0.5),
            c_stop: StopThreshold::Auto { headroom: 1.2 },
            s_max: 10,
            restart: Restart::WarmStart,
            center_init: CenterInit::GeometricMedian,
        }
    }

    fn validate(&self, p: usize) -> Result<()> {
        if !(0.0..EPSILON_LIMIT).contains(&self.epsilon) {
            return Err(Error::BadEpsilon(self.epsilon));
        }
        if self.inner_rounds == 0 || self.s_max == 0 {
            return Err(Error::Config("inner_rounds and s_max must be positive".into()));
        }
        let auto = matches!(self.eta_w, StepSize::Auto) || matches!(self.eta_rho, StepSize::Auto);
        let need = 4.0 * (1.0 / (1.0 - self.epsilon)).ln().max((p as f64).ln());
        if auto && (self.inner_rounds as f64) < need {
            return Err(Error::Config(format!(
                "automatic step sizes need at least {} inner rounds",
                need.ceil()
            )));
        }
        match self.c_stop {
            StopThreshold::Auto { headroom } if !(headroom > 0.0) => {
                Err(Error::Config("c_stop headroom must be positive".into()))
            }
            StopThreshold::Fixed(c) if !(c >= 0.0) => Err(Error::Config("c_stop must be nonnegative".into())),
            _ => Ok(()),
        }
    }
}

fn resolve_step(step: StepSize, nu: f64, radius: f64, rounds: usize) -> f64 {
    match step {
        StepSize::Auto => (radius / rounds as f64).sqrt() / nu,
        StepSize::Absolute(eta) => eta,
        StepSize::Scaled(c) => c / nu,
    }
}

/// Result of one fixed-center game.
#[derive(Debug, Clone)]
pub struct GameOutcome {
    pub w_bar: WeightVector,
    pub s_bar: SymMatrix,
    pub gamma: f64,
    pub eta_w: f64,
    pub eta_rho: f64,
    pub nu: f64,
}

/// Plays `T` rounds of the fixed-center game from `start_w`.
pub fn run_mw_mmw(
    cloud: &GradientCloud,
    center: &DVector<f64>,
    start_w: &WeightVector,
    cfg: &SgrConfig,
) -> Result<GameOutcome> {
    cfg.validate(cloud.dim())?;
    let nu = normalizing_scale(cloud).nu;
    play(cloud, center, start_w, cfg, nu)
}

fn play(
    cloud: &GradientCloud,
    center: &DVector<f64>,
    start_w: &WeightVector,
    cfg: &SgrConfig,
    nu: f64,
) -> Result<GameOutcome> {
    check_weights(cloud, start_w)?;
    let p = cloud.dim();
    let z = cloud.centered(center)?;
    let rounds = cfg.inner_rounds;
    let eps = cfg.epsilon;

    if nu == 0.0 {
        // every point coincides: the losses are identical and nothing moves
        let s_bar = weighted_gram(&z, start_w.values());
        let gamma = op_norm(&s_bar)?;
        return Ok(GameOutcome { w_bar: start_w.clone(), s_bar, gamma, eta_w: 0.0, eta_rho: 0.0, nu });
    }
    let eta_w = resolve_step(cfg.eta_w, nu, (1.0 / (1.0 - eps)).ln(), rounds);
    let eta_rho = resolve_step(cfg.eta_rho, nu, (p as f64).ln(), rounds);
    let weights_move = eps > 0.0;
    if weights_move && !(eta_w > 0.0 && eta_w * nu <= 0.5 + 1e-12) {
        return Err(Error::StepSizeOutOfRange(eta_w * nu));
    }
    if p > 1 && !(eta_rho > 0.0 && eta_rho * nu <= 0.5 + 1e-12) {
        return Err(Error::StepSizeOutOfRange(eta_rho * nu));
    }

    let n = cloud.n();
    let mut w = start_w.clone();
    let mut w_sum = vec![0.0; n];
    let mut s_sum = DMatrix::zeros(p, p);
    let mut cumulative = DMatrix::zeros(p, p);
    for _ in 0..rounds {
        let s_t = weighted_gram(&z, w.values());
        for (acc, &wn) in w_sum.iter_mut().zip(w.values()) {
            *acc += wn;
        }
        s_sum += s_t.as_matrix();
        if !weights_move {
            continue;
        }
        cumulative += s_t.as_matrix();
        let rho = if p == 1 {
            DMatrix::from_element(1, 1, 1.0)
        } else {
            gibbs_state(&SymMatrix::symmetrized(cumulative.clone()), eta_rho)?.as_matrix().clone()
        };
        let zr = &z * &rho;
        let raw: Vec<f64> = (0..n)
            .map(|i| {
                let loss = zr.row(i).dot(&z.row(i));
                w.values()[i] * (1.0 - eta_w * loss)
            })
            .collect();
        w = kl_project(&raw, eps)?;
    }

    let inv = 1.0 / rounds as f64;
    let w_bar = if weights_move {
        WeightVector::from_values(w_sum.iter().map(|v| v * inv).collect(), eps)?
    } else {
        start_w.clone()
    };
    let s_bar = SymMatrix::symmetrized(s_sum * inv);
    let gamma = op_norm(&s_bar)?;
    Ok(GameOutcome { w_bar, s_bar, gamma, eta_w, eta_rho, nu })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The spectral certificate dropped below the threshold.
    Certificate,
    /// Weights and center both stopped moving.
    FixedPoint,
    MaxIterations,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Certificate => "certificate",
            StopReason::FixedPoint => "fixed_point",
            StopReason::MaxIterations => "max_iterations",
        }
    }
}

/// One outer iteration.
#[derive(Debug, Clone)]
pub struct SgrIteration {
    pub s: usize,
    pub gamma: f64,
    pub center: DVector<f64>,
    pub weight_l1_change: f64,
    pub center_l2_change: f64,
    pub mean_error: Option<f64>,
    pub outlier_mass: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SgrReport {
    pub history: Vec<SgrIteration>,
    pub stop_reason: StopReason,
    pub c_stop: Option<f64>,
    pub nu: f64,
    pub nu_is_bound: bool,
    pub eta_w: f64,
    pub eta_rho: f64,
}

impl SgrReport {
    pub fn terminated_at(&self) -> Option<usize> {
        match self.stop_reason {
            StopReason::MaxIterations => None,
            _ => self.history.last().map(|h| h.s),
        }
    }

    pub const CSV_HEADER: &'static str =
        "s,gamma,mean_error,outlier_mass,weight_l1_change,center_l2_change,stop_reason";

    /// One row per outer iteration; the stop reason appears on the last row only.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        let last = self.history.len().saturating_sub(1);
        for (i, h) in self.history.iter().enumerate() {
            let reason = if i == last { self.stop_reason.as_str() } else { "" };
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                h.s,
                h.gamma,
                opt(h.mean_error),
                opt(h.outlier_mass),
                h.weight_l1_change,
                h.center_l2_change,
                reason
            )?;
        }
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Spectral norm of the covariance of the `⌈(1-ε)N⌉` points nearest `center`.
pub fn inlier_scale(cloud: &GradientCloud, center: &DVector<f64>, epsilon: f64) -> Result<f64> {
    let n = cloud.n();
    let keep = (((1.0 - epsilon) * n as f64).ceil() as usize).clamp(1, n);
    let z = cloud.centered(center)?;
    let mut order: Vec<usize> = (0..n).collect();
    let dist: Vec<f64> = z.row_iter().map(|r| r.norm_squared()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let rows: Vec<DVector<f64>> = order[..keep].iter().map(|&i| cloud.point(i)).collect();
    let sub = GradientCloud::from_rows(&rows)?;
    let w = WeightVector::uniform(keep, 0.0)?;
    op_norm(&weighted_covariance(&sub, &w)?)
}

/// Full reweighting with outer center updates.
pub fn run_sgr(cloud: &GradientCloud, cfg: &SgrConfig) -> Result<(WeightVector, SgrReport)> {
    run_sgr_from(cloud, cfg, None)
}

/// As [`run_sgr`] but starting the first game from `start` instead of uniform weights.
pub fn run_sgr_from(
    cloud: &GradientCloud,
    cfg: &SgrConfig,
    start: Option<&WeightVector>,
) -> Result<(WeightVector, SgrReport)> {
    cfg.validate(cloud.dim())?;
    let scale = normalizing_scale(cloud);
    let uniform = WeightVector::uniform(cloud.n(), cfg.epsilon)?;
    let mut w_hat = match start {
        Some(w) => {
            check_weights(cloud, w)?;
            kl_project(w.values(), cfg.epsilon)?
        }
        None => uniform.clone(),
    };
    let mut center = match &cfg.center_init {
        CenterInit::GeometricMedian => geometric_median(&cloud.rows(), 1e-9, 1000)?,
        CenterInit::Provided(c) => c.clone(),
    };
    let c_stop = match cfg.c_stop {
        StopThreshold::Auto { headroom } => Some(headroom * inlier_scale(cloud, &center, cfg.epsilon)?),
        StopThreshold::Fixed(c) => Some(c),
        StopThreshold::Disabled => None,
    };
    let outliers = cloud.outlier_indices();

    let mut history = Vec::new();
    let mut stop_reason = StopReason::MaxIterations;
    let (mut eta_w, mut eta_rho) = (0.0, 0.0);
    for s in 1..=cfg.s_max {
        let start_w = match cfg.restart {
            Restart::Uniform => &uniform,
            Restart::WarmStart => &w_hat,
        };
        let game = play(cloud, &center, start_w, cfg, scale.nu)?;
        eta_w = game.eta_w;
        eta_rho = game.eta_rho;
        let next_center = weighted_mean(cloud, &game.w_bar)?;
        let row = SgrIteration {
            s,
            gamma: game.gamma,
            center: center.clone(),
            weight_l1_change: game.w_bar.l1_distance(&w_hat),
            center_l2_change: (&next_center - &center).norm(),
            mean_error: cloud.truth_mean().map(|m| (&next_center - m).norm()),
            outlier_mass: match &outliers {
                Some(idx) => Some(outlier_mass(&game.w_bar, idx)?),
                None => None,
            },
        };
        let certified = c_stop.is_some_and(|c| game.gamma <= c);
        let settled = row.weight_l1_change <= FIXED_POINT_TOL && row.center_l2_change <= FIXED_POINT_TOL;
        history.push(row);
        w_hat = game.w_bar;
        center = next_center;
        if certified {
            stop_reason = StopReason::Certificate;
            break;
        }
        if settled {
            stop_reason = StopReason::FixedPoint;
            break;
        }
    }
    let report = SgrReport {
        history,
        stop_reason,
        c_stop,
        nu: scale.nu,
        nu_is_bound: scale.upper_bound,
        eta_w,
        eta_rho,
    };
    Ok((w_hat, report))
}

/// Closed-form constants from the outer-loop analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryConstants {
    pub alpha: f64,
    pub delta_t: f64,
    pub r_eps_t: f64,
    pub r_inf: f64,
    /// `None` when the target radius is not above `r_inf`.
    pub s_max_bound: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryInputs {
    pub epsilon: f64,
    pub rounds: usize,
    pub p: usize,
    pub nu: f64,
    pub sigma_op: f64,
    pub delta_mu: f64,
    pub delta_sigma: f64,
    pub e1: f64,
    pub target_radius: f64,
}

pub fn contraction_factor(epsilon: f64) -> Result<f64> {
    if !(0.0..EPSILON_LIMIT).contains(&epsilon) {
        return Err(Error::BadEpsilon(epsilon));
    }
    Ok((epsilon / (1.0 - 2.0 * epsilon)).sqrt())
}

pub fn theory_constants(inp: &TheoryInputs) -> Result<TheoryConstants> {
    let alpha = contraction_factor(inp.epsilon)?;
    let t = inp.rounds.max(1) as f64;
    let delta_t = 4.0
        * inp.nu
        * (((1.0 / (1.0 - inp.epsilon)).ln() / t).sqrt() + ((inp.p.max(1) as f64).ln() / t).sqrt());
    let r_eps_t = (1.0 + alpha) * inp.delta_mu + alpha * (inp.sigma_op + inp.delta_sigma + delta_t).sqrt();
    let r_inf = r_eps_t / (1.0 - alpha);

    let head = (inp.e1 - r_inf).max(0.0);
    let room = (inp.target_radius - r_inf).max(0.0);
    let s_max_bound = if room <= 0.0 {
        None
    } else if head <= room || alpha == 0.0 {
        Some(1)
    } else {
        let steps = ((head / room).ln() / (1.0 / alpha).ln()).ceil();
        Some(1 + steps.max(0.0) as usize)
    };
    Ok(TheoryConstants { alpha, delta_t, r_eps_t, r_inf, s_max_bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specmat::{sym_eigen, DensityMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud_of(rows: &[&[f64]]) -> GradientCloud {
        GradientCloud::from_rows(&rows.iter().map(|r| DVector::from_column_slice(r)).collect::<Vec<_>>())
            .unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, p: usize) -> GradientCloud {
        GradientCloud::new(DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0))).unwrap()
    }

    fn random_weights(rng: &mut ChaCha8Rng, n: usize, eps: f64) -> WeightVector {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        kl_project(&raw, eps).unwrap()
    }

    #[test]
    fn scale_examples() {
        assert_eq!(normalizing_scale(&cloud_of(&[&[1.0, 2.0]])).nu, 0.0);
        assert_eq!(normalizing_scale(&cloud_of(&[&[0.0], &[3.0]])).nu, 9.0);
        assert_eq!(normalizing_scale(&cloud_of(&[&[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0]])).nu, 4.0);
        assert!(!normalizing_scale(&cloud_of(&[&[0.0]])).upper_bound);
        assert_eq!(GradientCloud::new(DMatrix::zeros(0, 2)).unwrap_err(), Error::EmptyInput);
    }

    #[test]
    fn scale_bound_for_large_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, EXACT_DIAMETER_LIMIT + 1, 2);
        let s = normalizing_scale(&cloud);
        assert!(s.upper_bound);
        let g = cloud.points();
        let mut exact = 0.0f64;
        for i in 0..g.nrows() {
            for j in (i + 1)..g.nrows() {
                exact = exact.max((g.row(i) - g.row(j)).norm_squared());
            }
        }
        assert!(s.nu >= exact && s.nu <= 4.0 * exact);
    }

    #[test]
    fn loss_examples() {
        let z = DVector::from_vec(vec![1.0, -2.0, 2.0]);
        let mixed = DensityMatrix::maximally_mixed(3);
        assert!((mw_loss(&z, &mixed).unwrap() - 3.0).abs() < 1e-14);
        let v = DVector::from_vec(vec![0.0, 0.6, 0.8]);
        let pure = DensityMatrix::pure(&v).unwrap();
        assert!((mw_loss(&z, &pure).unwrap() - 0.16).abs() < 1e-14);
        assert_eq!(mw_loss(&DVector::zeros(3), &pure).unwrap(), 0.0);
        assert!(mw_loss(&DVector::zeros(2), &pure).is_err());
    }

    #[test]
    fn gain_examples() {
        let cloud = cloud_of(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let w = WeightVector::uniform(2, 0.0).unwrap();
        let s = gain_matrix(&cloud, &w, &DVector::zeros(2)).unwrap();
        assert_eq!(s.as_matrix(), &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));

        let cloud = cloud_of(&[&[2.0, 3.0], &[2.0, 3.0], &[2.0, 3.0]]);
        let w = WeightVector::uniform(3, 0.1).unwrap();
        let s = gain_matrix(&cloud, &w, &DVector::from_vec(vec![2.0, 3.0])).unwrap();
        assert_eq!(s.as_matrix().amax(), 0.0);
    }

    #[test]
    fn gain_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = random_cloud(&mut rng, 5, 2);
        let w = random_weights(&mut rng, 5, 0.2);
        let mu = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let s = gain_matrix(&cloud, &w, &mu).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let mut acc = 0.0;
                for n in 0..5 {
                    let g = cloud.points();
                    acc += w.values()[n] * (g[(n, a)] - mu[a]) * (g[(n, b)] - mu[b]);
                }
                assert!((s[(a, b)] - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn centering_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let cloud = random_cloud(&mut rng, 20, 3);
            let w = random_weights(&mut rng, 20, 0.25);
            let mu = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let gain = gain_matrix(&cloud, &w, &mu).unwrap();
            let d = weighted_mean(&cloud, &w).unwrap() - &mu;
            let rhs = weighted_covariance(&cloud, &w).unwrap().as_matrix() + &d * d.transpose();
            assert!((gain.as_matrix() - rhs).amax() <= 1e-10);
            let cov_norm = op_norm(&weighted_covariance(&cloud, &w).unwrap()).unwrap();
            assert!(cov_norm <= op_norm(&gain).unwrap() + 1e-12);
        }
    }

    #[test]
    fn equal_points_give_zero_gamma() {
        let cloud = cloud_of(&[&[1.0, 1.0][..]; 6]);
        let cfg = SgrConfig::new(0.2);
        let start = WeightVector::uniform(6, 0.2).unwrap();
        let out = run_mw_mmw(&cloud, &DVector::from_vec(vec![1.0, 1.0]), &start, &cfg).unwrap();
        assert_eq!(out.gamma, 0.0);
        assert_eq!(out.w_bar, start);
    }

    #[test]
    fn averaged_gain_is_gain_of_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let cloud = random_cloud(&mut rng, 30, 4);
            let mu = weighted_mean(&cloud, &WeightVector::uniform(30, 0.0).unwrap()).unwrap();
            let cfg = SgrConfig { inner_rounds: 15, ..SgrConfig::new(0.2) };
            let start = WeightVector::uniform(30, 0.2).unwrap();
            let out = run_mw_mmw(&cloud, &mu, &start, &cfg).unwrap();
            let direct = gain_matrix(&cloud, &out.w_bar, &mu).unwrap();
            assert!((out.s_bar.as_matrix() - direct.as_matrix()).amax() <= 1e-10);
            let e = sym_eigen(&out.s_bar).unwrap();
            assert!(e.values[3] >= -1e-8 && e.values[0] <= out.nu + 1e-8);
        }
    }

    #[test]
    fn step_sizes_are_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 10, 2);
        let start = WeightVector::uniform(10, 0.1).unwrap();
        let cfg = SgrConfig { eta_w: StepSize::Scaled(0.8), ..SgrConfig::new(0.1) };
        let err = run_mw_mmw(&cloud, &DVector::zeros(2), &start, &cfg).unwrap_err();
        assert!(matches!(err, Error::StepSizeOutOfRange(_)));
        let cfg = SgrConfig { eta_w: StepSize::Auto, inner_rounds: 2, ..SgrConfig::new(0.1) };
        assert!(matches!(
            run_mw_mmw(&cloud, &DVector::zeros(2), &start, &cfg),
            Err(Error::Config(_))
        ));
    }

    /// Exact minimax value of the 1-D game: the capped-simplex minimum of the
    /// weighted second moment about the center, by grid search.
    #[test]
    fn one_dimensional_instance_matches_grid_minimax() {
        let cloud = cloud_of(&[&[0.0], &[0.0], &[0.0], &[10.0]]);
        let eps = 0.25;
        let cap = 1.0 / (0.75 * 4.0);
        // the outlier weight can go to zero; mass is spread over the inliers
        let mut best = f64::INFINITY;
        let steps = 2000;
        for i in 0..=steps {
            let w_out = cap * i as f64 / steps as f64;
            if (1.0 - w_out) / 3.0 <= cap + 1e-15 {
                best = best.min(w_out * 100.0);
            }
        }
        let cfg = SgrConfig {
            inner_rounds: 4000,
            eta_w: StepSize::Scaled(0.5),
            ..SgrConfig::new(eps)
        };
        let start = WeightVector::uniform(4, eps).unwrap();
        let out = run_mw_mmw(&cloud, &DVector::zeros(1), &start, &cfg).unwrap();
        assert!(best == 0.0);
        // with a zero optimum the gap is the averaged regret, which shrinks as 1/T
        let regret = (1.0 / (1.0 - eps)).ln() / (4000.0 * 0.5 / 100.0);
        assert!(out.gamma <= best + 1.05 * regret, "gamma {}", out.gamma);
    }

    #[test]
    fn contraction_factor_examples() {
        assert_eq!(contraction_factor(0.0).unwrap(), 0.0);
        assert!((contraction_factor(0.1).unwrap() - 0.3535534).abs() < 1e-7);
        let grid: Vec<f64> = (0..100).map(|i| contraction_factor(i as f64 * 0.0033).unwrap()).collect();
        assert!(grid.windows(2).all(|w| w[1] > w[0]));
        assert!(contraction_factor(0.3333333).unwrap() > 0.999);
        assert_eq!(contraction_factor(0.34).unwrap_err(), Error::BadEpsilon(0.34));
    }

    #[test]
    fn theory_constants_hand_values() {
        let inp = TheoryInputs {
            epsilon: 0.1,
            rounds: 100,
            p: 10,
            nu: 2.0,
            sigma_op: 1.0,
            delta_mu: 0.05,
            delta_sigma: 0.1,
            e1: 3.0,
            target_radius: 2.0,
        };
        let c = theory_constants(&inp).unwrap();
        let alpha = (0.1f64 / 0.8).sqrt();
        let dt = 8.0 * (((1.0f64 / 0.9).ln() / 100.0).sqrt() + (10f64.ln() / 100.0).sqrt());
        let r = 1.05 * 0.0 + (1.0 + alpha) * 0.05 + alpha * (1.1 + dt).sqrt();
        let r_inf = r / (1.0 - alpha);
        assert!((c.delta_t - dt).abs() < 1e-12);
        assert!((c.r_eps_t - r).abs() < 1e-12);
        assert!((c.r_inf - r_inf).abs() < 1e-12);
        let expect = 1 + (((3.0 - r_inf) / (2.0 - r_inf)).ln() / (1.0 / alpha).ln()).ceil() as usize;
        assert_eq!(c.s_max_bound, Some(expect));

        let unreachable = theory_constants(&TheoryInputs { target_radius: 0.0, ..inp }).unwrap();
        assert_eq!(unreachable.s_max_bound, None);
    }

    #[test]
    fn clean_cloud_keeps_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 400;
        let cloud = random_cloud(&mut rng, n, 3);
        let cfg = SgrConfig::new(0.0);
        let (w, report) = run_sgr(&cloud, &cfg).unwrap();
        let sample = weighted_mean(&cloud, &WeightVector::uniform(n, 0.0).unwrap()).unwrap();
        let got = weighted_mean(&cloud, &w).unwrap();
        assert!((got - sample).norm() <= 2.0 / (n as f64).sqrt());
        assert!(!report.history.is_empty());
    }

    #[test]
    fn report_csv_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = random_cloud(&mut rng, 40, 2);
        let (_, report) = run_sgr(&cloud, &SgrConfig::new(0.1)).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SgrReport::CSV_HEADER);
        assert_eq!(lines.len(), report.history.len() + 1);
        assert!(lines.last().unwrap().ends_with(report.stop_reason.as_str()));
        assert!(report.history.len() <= 30);
    }
}
