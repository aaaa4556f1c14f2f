//! Reweight-then-optimize driver for moment models, and the finite-sample bound.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::optim::{lbfgs_step, stabilization_test, BlockGradients, BlockParams, LbfgsState, StepStatus};
use crate::sgr::{contraction_factor, run_sgr_from, GradientCloud, SgrConfig, StopReason};
use crate::specmat::{sym_eigen, SymMatrix};
use crate::weights::{outlier_mass, WeightVector};
use crate::{Error, Result};

/// Per-order combination weights and whether each fell back to `1/L`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderWeights {
    pub values: Vec<f64>,
    pub fallback: Vec<bool>,
}

/// Everything held fixed between two reweightings.
#[derive(Debug, Clone)]
pub struct Frozen {
    pub weights: Vec<WeightVector>,
    pub order_weights: Vec<f64>,
    /// Data-only terms of the objective, one per order.
    pub constants: Vec<f64>,
}

/// A moment-matching model the driver can reweight and optimize.
///
/// Orders are 1-based: `k` ranges over `1..=orders()`.
pub trait MomentModel {
    fn orders(&self) -> usize;
    fn dim(&self) -> usize;
    fn n_obs(&self) -> usize;

    /// Row `n` is the order-`k` gradient contributed by observation `n`.
    fn per_obs_gradients(&self, theta: &DVector<f64>, k: usize) -> Result<DMatrix<f64>>;

    fn per_obs_gradient(&self, theta: &DVector<f64>, k: usize, n: usize) -> Result<DVector<f64>> {
        let g = self.per_obs_gradients(theta, k)?;
        if n >= g.nrows() {
            return Err(Error::IndexOutOfRange { index: n, len: g.nrows() });
        }
        Ok(g.row(n).transpose())
    }

    fn weight_constants(&self, _weights: &[WeightVector]) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.orders()])
    }

    fn order_weights(&self, theta: &DVector<f64>, weights: &[WeightVector]) -> Result<OrderWeights>;

    fn robust_objective(&self, theta: &DVector<f64>, frozen: &Frozen) -> Result<f64>;

    fn robust_gradient(&self, theta: &DVector<f64>, frozen: &Frozen) -> Result<DVector<f64>>;

    fn objective_and_gradient(&self, theta: &DVector<f64>, frozen: &Frozen) -> Result<(f64, DVector<f64>)> {
        Ok((self.robust_objective(theta, frozen)?, self.robust_gradient(theta, frozen)?))
    }

    /// Gauge fixing applied after every accepted step.
    fn normalize(&self, _theta: &mut DVector<f64>) {}

    /// Blockwise view for the stabilization gate; `None` disables the gate.
    fn blocks(&self, _theta: &DVector<f64>, _frozen: &Frozen) -> Option<(BlockParams, BlockGradients)> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriverConfig {
    pub t_gmm: usize,
    pub i_lbfgs: usize,
    pub i_interval: usize,
    pub i_min: usize,
    /// `None` keeps uniform observation weights throughout.
    pub sgr: Option<SgrConfig>,
    pub use_stabilization_gate: bool,
    pub stabilization_tol: f64,
    pub memory: usize,
    /// Inner loop stops once `|∇Q| ≤ grad_tol · max(1, |Q|)`.
    pub grad_tol: f64,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self {
            t_gmm: 5,
            i_lbfgs: 50,
            i_interval: 10,
            i_min: 3,
            sgr: None,
            use_stabilization_gate: false,
            stabilization_tol: 1e-6,
            memory: crate::optim::DEFAULT_MEMORY,
            grad_tol: 1e-10,
        }
    }
}

impl DriverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_gmm == 0 || self.i_lbfgs == 0 || self.i_interval == 0 {
            return Err(Error::Config("t_gmm, i_lbfgs and i_interval must be positive".into()));
        }
        if self.i_min > self.i_interval {
            return Err(Error::Config(format!("i_min {} exceeds i_interval {}", self.i_min, self.i_interval)));
        }
        if !(self.stabilization_tol > 0.0) || !(self.grad_tol >= 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        Ok(())
    }

    fn robust_epsilon(&self) -> f64 {
        self.sgr.as_ref().map_or(0.0, |s| s.epsilon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitRow {
    pub t: usize,
    pub i: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub param_change: f64,
    pub reweighted: bool,
    pub outlier_mass: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStop {
    Converged,
    MaxSteps,
}

impl FitStop {
    pub fn as_str(&self) -> &'static str {
        match self {
            FitStop::Converged => "converged",
            FitStop::MaxSteps => "max_steps",
        }
    }
}

/// One reweighting event.
#[derive(Debug, Clone, PartialEq)]
pub struct Reweighting {
    pub t: usize,
    pub i: usize,
    pub order_weights: Vec<f64>,
    pub fallback: Vec<bool>,
    pub sgr_stops: Vec<Option<StopReason>>,
    pub weight_change: Vec<f64>,
    /// The iterate the weights were computed at.
    pub theta: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub rows: Vec<FitRow>,
    pub reweightings: Vec<Reweighting>,
    pub stop: FitStop,
    pub final_objective: f64,
    /// Final gradient norm, the empirical optimizer residual.
    pub delta_opt: f64,
    pub weights: Vec<WeightVector>,
    pub order_weights: Vec<f64>,
}

impl FitReport {
    pub fn reweight_epochs(&self) -> Vec<(usize, usize)> {
        self.reweightings.iter().filter(|r| r.i > 0).map(|r| (r.t, r.i)).collect()
    }

    pub fn csv_header(orders: usize) -> String {
        let mut h = String::from("t,i,objective,grad_norm,param_change,reweighted");
        for k in 1..=orders {
            h.push_str(&format!(",outlier_mass_{k}"));
        }
        h
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{}", Self::csv_header(self.weights.len()))?;
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{},{}",
                r.t, r.i, r.objective, r.grad_norm, r.param_change, r.reweighted as u8
            )?;
            for m in &r.outlier_mass {
                write!(out, ",{}", m.map(|x| x.to_string()).unwrap_or_default())?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// `key: value` summary; `extra` lines are appended verbatim.
    pub fn write_summary<W: Write>(&self, mut out: W, theta: &DVector<f64>, extra: &[(&str, String)]) -> io::Result<()> {
        writeln!(out, "{{")?;
        writeln!(out, "  \"stop\": \"{}\",", self.stop.as_str())?;
        writeln!(out, "  \"steps\": {},", self.rows.len())?;
        writeln!(out, "  \"reweightings\": {},", self.reweightings.len())?;
        writeln!(out, "  \"final_objective\": {},", self.final_objective)?;
        writeln!(out, "  \"delta_opt\": {},", self.delta_opt)?;
        writeln!(out, "  \"order_weights\": [{}],", join(&self.order_weights))?;
        for (k, v) in extra {
            writeln!(out, "  \"{k}\": {v},")?;
        }
        writeln!(out, "  \"theta\": [{}]", join(theta.as_slice()))?;
        writeln!(out, "}}")
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

struct Driver<'a, M: MomentModel> {
    model: &'a M,
    cfg: &'a DriverConfig,
    outliers: Option<Vec<usize>>,
}

impl<M: MomentModel> Driver<'_, M> {
    fn masses(&self, weights: &[WeightVector]) -> Result<Vec<Option<f64>>> {
        weights
            .iter()
            .map(|w| match &self.outliers {
                Some(idx) => outlier_mass(w, idx).map(Some),
                None => Ok(None),
            })
            .collect()
    }

    fn freeze(&self, theta: &DVector<f64>, weights: Vec<WeightVector>) -> Result<(Frozen, OrderWeights)> {
        let ow = self.model.order_weights(theta, &weights)?;
        let constants = self.model.weight_constants(&weights)?;
        let frozen = Frozen { weights, order_weights: ow.values.clone(), constants };
        Ok((frozen, ow))
    }

    fn reweight(&self, theta: &DVector<f64>, prev: &[WeightVector], t: usize, i: usize) -> Result<(Frozen, Reweighting)> {
        let mut weights = prev.to_vec();
        let mut stops = vec![None; prev.len()];
        match &self.cfg.sgr {
            Some(sgr) if sgr.epsilon > 0.0 => {
                for k in 1..=self.model.orders() {
                    let cloud = GradientCloud::new(self.model.per_obs_gradients(theta, k)?)?;
                    let (w, rep) = run_sgr_from(&cloud, sgr, Some(&prev[k - 1]))?;
                    weights[k - 1] = w;
                    stops[k - 1] = Some(rep.stop_reason);
                }
            }
            // the capped simplex at ε = 0 is the single uniform vector
            _ => {}
        }
        let weight_change = weights.iter().zip(prev).map(|(a, b)| a.l1_distance(b)).collect();
        let (frozen, ow) = self.freeze(theta, weights)?;
        let event = Reweighting {
            t,
            i,
            order_weights: ow.values,
            fallback: ow.fallback,
            sgr_stops: stops,
            weight_change,
            theta: theta.clone(),
        };
        Ok((frozen, event))
    }
}

fn eval<M: MomentModel>(model: &M, x: &DVector<f64>, frozen: &Frozen) -> (f64, DVector<f64>) {
    match model.objective_and_gradient(x, frozen) {
        Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => (f, g),
        _ => (f64::NAN, DVector::zeros(x.len())),
    }
}

/// Runs the reweight-then-optimize loop from `theta0`.
///
/// `outliers` are ground-truth labels used only for reporting.
pub fn fit<M: MomentModel>(
    model: &M,
    theta0: &DVector<f64>,
    cfg: &DriverConfig,
    outliers: Option<&[bool]>,
) -> Result<(DVector<f64>, FitReport)> {
    cfg.validate()?;
    if theta0.len() != model.dim() {
        return Err(Error::DimMismatch { expected: model.dim(), got: theta0.len() });
    }
    if theta0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("initial parameters"));
    }
    let n = model.n_obs();
    let driver = Driver {
        model,
        cfg,
        outliers: outliers.map(|l| l.iter().enumerate().filter(|(_, &o)| o).map(|(i, _)| i).collect()),
    };

    let mut x = theta0.clone();
    model.normalize(&mut x);
    let uniform = WeightVector::uniform(n, cfg.robust_epsilon())?;
    let (mut frozen, first) = driver.reweight(&x, &vec![uniform; model.orders()], 0, 0)?;
    let mut reweightings = vec![first];
    let (mut f, mut g) = eval(model, &x, &frozen);
    if !f.is_finite() {
        return Err(Error::NonFiniteObjective);
    }

    let mut rows = Vec::new();
    let mut stop = FitStop::MaxSteps;
    let mut state = LbfgsState::new(cfg.memory);
    // the current weights were computed at exactly this iterate
    let mut fresh = true;
    'outer: for t in 1..=cfg.t_gmm {
        let x_start = x.clone();
        state.reset_memory();
        let mut i_prev = 0;
        let mut prev_blocks = model.blocks(&x, &frozen).map(|b| b.0);
        let mut failures = 0;
        for i in 1..=cfg.i_lbfgs {
            let since = i - i_prev;
            let converged = g.norm() <= cfg.grad_tol * f.abs().max(1.0) || failures >= 2;
            let mut due = since >= cfg.i_interval;
            if !due && cfg.use_stabilization_gate && since >= cfg.i_min {
                if let (Some((now, grads)), Some(prev)) = (model.blocks(&x, &frozen), prev_blocks.as_ref()) {
                    due = stabilization_test(&now, prev, f, &grads, cfg.stabilization_tol)?.stabilized;
                }
            }
            if converged && !due {
                if fresh {
                    stop = FitStop::Converged;
                    break 'outer;
                }
                // converged on stale weights: refresh them at this iterate
                due = true;
            }
            let mut reweighted = false;
            if due {
                let (next, event) = driver.reweight(&x, &frozen.weights, t, i)?;
                let (fn_, gn) = eval(model, &x, &next);
                if fn_.is_finite() {
                    frozen = next;
                    (f, g) = (fn_, gn);
                    reweightings.push(event);
                    reweighted = true;
                    fresh = true;
                    failures = 0;
                }
                // a non-finite objective keeps the previous weights
                i_prev = i;
                state.reset_memory();
            }

            let out = lbfgs_step(&mut state, |z: &DVector<f64>| eval(model, z, &frozen), &x, f, &g);
            let mut change = 0.0;
            if out.status == StepStatus::LineSearchFailed {
                failures += 1;
            } else {
                failures = 0;
                let mut xn = out.x;
                model.normalize(&mut xn);
                change = (&xn - &x).norm();
                if change > 0.0 {
                    fresh = false;
                }
                x = xn;
                (f, g) = (out.f, out.g);
            }
            prev_blocks = model.blocks(&x, &frozen).map(|b| b.0);
            rows.push(FitRow {
                t,
                i,
                objective: f,
                grad_norm: g.norm(),
                param_change: change,
                reweighted,
                outlier_mass: driver.masses(&frozen.weights)?,
            });
        }
        if (&x - &x_start).norm() <= 1e-14 * (1.0 + x.norm()) && fresh {
            stop = FitStop::Converged;
            break;
        }
    }

    let report = FitReport {
        rows,
        reweightings,
        stop,
        final_objective: f,
        delta_opt: g.norm(),
        order_weights: frozen.order_weights.clone(),
        weights: frozen.weights,
    };
    Ok((x, report))
}

/// Per-order constant for the finite-sample bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OrderConstant {
    /// A user-chosen stopping threshold.
    Direct(f64),
    /// `sup ‖Σ_g‖ + δ_Σ + (δ_μ + R)² + δ_T`.
    Composite { sigma_sup: f64, delta_sigma: f64, delta_mu: f64, radius: f64, delta_t: f64 },
}

impl OrderConstant {
    pub fn value(&self) -> f64 {
        match *self {
            OrderConstant::Direct(c) => c,
            OrderConstant::Composite { sigma_sup, delta_sigma, delta_mu, radius, delta_t } => {
                sigma_sup + delta_sigma + (delta_mu + radius).powi(2) + delta_t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    pub lambda_star: f64,
    pub a: Vec<f64>,
    pub delta_mu: Vec<f64>,
    pub c: Vec<OrderConstant>,
    pub delta_opt: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundResult {
    pub bound: f64,
    pub alpha: f64,
    pub sgr_error: f64,
}

/// `(2/λ*)(Σ_k a_k(δ_μ,k + α_ε √C_k) + δ_opt)`.
pub fn finite_sample_bound(b: &BoundInputs) -> Result<BoundResult> {
    if !(b.lambda_star > 0.0) {
        return Err(Error::NonpositiveLambda(b.lambda_star));
    }
    let alpha = contraction_factor(b.epsilon)?;
    let l = b.a.len();
    if b.delta_mu.len() != l || b.c.len() != l {
        return Err(Error::DimMismatch { expected: l, got: b.delta_mu.len().min(b.c.len()) });
    }
    let cs: Vec<f64> = b.c.iter().map(|c| c.value()).collect();
    let all: Vec<f64> = b.a.iter().chain(&b.delta_mu).chain(&cs).copied().chain([b.delta_opt]).collect();
    if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidParams("bound inputs must be finite and nonnegative".into()));
    }
    let sgr_error: f64 = (0..l).map(|k| b.a[k] * (b.delta_mu[k] + alpha * cs[k].sqrt())).sum();
    Ok(BoundResult { bound: 2.0 / b.lambda_star * (sgr_error + b.delta_opt), alpha, sgr_error })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentificationProbe {
    pub lambda_star: f64,
    pub lipschitz: f64,
    /// Whether the local radius condition holds at the supplied `r0`.
    pub radius_ok: bool,
}

fn jacobian<F>(m: &F, theta: &DVector<f64>, h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let m0 = m(theta);
    let mut jac = DMatrix::zeros(m0.len(), theta.len());
    for i in 0..theta.len() {
        let mut a = theta.clone();
        let mut b = theta.clone();
        a[i] += h;
        b[i] -= h;
        let col = (m(&a) - m(&b)) / (2.0 * h);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteProbe);
        }
        jac.set_column(i, &col);
    }
    Ok(jac)
}

fn op_norm_rect(a: &DMatrix<f64>) -> Result<f64> {
    let gram = SymMatrix::symmetrized(a.transpose() * a);
    Ok(sym_eigen(&gram)?.values[0].max(0.0).sqrt())
}

/// Finite-difference local identification diagnostics for a moment map `m`.
///
/// `H = GᵀWG` at `theta`; the Lipschitz constant of `G` is estimated along
/// the coordinate and diagonal directions at distance `probe_radius`.
pub fn identification_probe<F>(
    m: F,
    theta: &DVector<f64>,
    w: &DMatrix<f64>,
    r0: f64,
    probe_radius: f64,
) -> Result<IdentificationProbe>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let h = 1e-5;
    let g = jacobian(&m, theta, h)?;
    if w.nrows() != g.nrows() || w.ncols() != g.nrows() {
        return Err(Error::DimMismatch { expected: g.nrows(), got: w.nrows() });
    }
    let hmat = SymMatrix::symmetrized(g.transpose() * w * &g);
    let eig = sym_eigen(&hmat)?;
    let lambda_star = *eig.values.as_slice().last().unwrap();

    let p = theta.len();
    let mut dirs: Vec<DVector<f64>> = (0..p).map(|i| DVector::from_fn(p, |r, _| (r == i) as u8 as f64)).collect();
    dirs.push(DVector::from_element(p, 1.0 / (p as f64).sqrt()));
    let mut lipschitz: f64 = 0.0;
    for dir in dirs {
        let other = theta + dir * probe_radius;
        let g2 = jacobian(&m, &other, h)?;
        lipschitz = lipschitz.max(op_norm_rect(&(g2 - &g))? / probe_radius);
    }
    let w_op = op_norm_rect(w)?;
    let g_op = op_norm_rect(&g)?;
    let lhs = w_op * lipschitz * r0 * (1.5 * g_op + 0.5 * lipschitz * r0);
    if !lambda_star.is_finite() || !lipschitz.is_finite() {
        return Err(Error::NonFiniteProbe);
    }
    Ok(IdentificationProbe { lambda_star, lipschitz, radius_ok: lhs <= lambda_star / 2.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(lambda: f64, eps: f64, dmu: f64, c: f64, dopt: f64) -> BoundInputs {
        BoundInputs {
            lambda_star: lambda,
            a: vec![1.0],
            delta_mu: vec![dmu],
            c: vec![OrderConstant::Direct(c)],
            delta_opt: dopt,
            epsilon: eps,
        }
    }

    #[test]
    fn bound_examples() {
        assert_eq!(finite_sample_bound(&inputs(2.0, 0.0, 0.0, 4.0, 0.0)).unwrap().bound, 0.0);
        let b = finite_sample_bound(&inputs(2.0, 0.1, 0.1, 4.0, 0.05)).unwrap();
        let hand = 0.1 + (0.1f64 / 0.8).sqrt() * 2.0 + 0.05;
        assert!((b.bound - hand).abs() < 1e-12);
        assert!((b.bound - 0.857107).abs() < 1e-6);
        let half = finite_sample_bound(&inputs(4.0, 0.1, 0.1, 4.0, 0.05)).unwrap();
        assert!((half.bound - b.bound / 2.0).abs() < 1e-15);
    }

    #[test]
    fn bound_errors() {
        assert_eq!(finite_sample_bound(&inputs(0.0, 0.1, 0.1, 4.0, 0.0)).unwrap_err(), Error::NonpositiveLambda(0.0));
        assert!(matches!(finite_sample_bound(&inputs(1.0, 0.4, 0.1, 4.0, 0.0)), Err(Error::BadEpsilon(_))));
    }

    #[test]
    fn composite_constant() {
        let c = OrderConstant::Composite { sigma_sup: 1.0, delta_sigma: 0.5, delta_mu: 0.2, radius: 0.3, delta_t: 0.25 };
        assert!((c.value() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn probe_on_linear_map() {
        let a = DMatrix::from_row_slice(3, 2, &[2.0, 0.0, 1.0, 1.0, 0.0, 3.0]);
        let m = |t: &DVector<f64>| &a * t;
        let theta = DVector::from_vec(vec![0.3, -0.7]);
        let eye = DMatrix::identity(3, 3);
        let probe = identification_probe(m, &theta, &eye, 0.5, 0.1).unwrap();
        let exact = sym_eigen(&SymMatrix::symmetrized(a.transpose() * &a)).unwrap().values[1];
        assert!((probe.lambda_star - exact).abs() < 1e-8);
        assert!(probe.lipschitz <= 1e-6);
        assert!(probe.radius_ok);

        let scaled = identification_probe(|t: &DVector<f64>| &a * t, &theta, &(eye * 3.0), 0.5, 0.1).unwrap();
        assert!((scaled.lambda_star - 3.0 * probe.lambda_star).abs() < 1e-7);
    }

    #[test]
    fn probe_flags_nonfinite() {
        let m = |t: &DVector<f64>| DVector::from_element(1, 1.0 / (t[0] - 0.5).abs().min(0.0));
        let theta = DVector::from_vec(vec![0.5]);
        assert_eq!(identification_probe(m, &theta, &DMatrix::identity(1, 1), 0.1, 0.1).unwrap_err(), Error::NonFiniteProbe);
    }
}
