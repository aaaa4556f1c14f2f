//! Limited-memory BFGS with a strong Wolfe line search, plus the scaled
//! stabilization test used to gate reweighting.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

pub const DEFAULT_MEMORY: usize = 10;
const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_TRIALS: usize = 25;
const MAX_BACKTRACKS: usize = 60;
const CURVATURE_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LbfgsState {
    memory: VecDeque<(DVector<f64>, DVector<f64>)>,
    capacity: usize,
    iter: usize,
    pub last_objective: f64,
    pub last_gradient_norm: f64,
}

impl Default for LbfgsState {
    fn default() -> Self {
        Self::new(DEFAULT_MEMORY)
    }
}

impl LbfgsState {
    pub fn new(capacity: usize) -> Self {
        Self {
            memory: VecDeque::with_capacity(capacity.max(1)),
            capacity: capacity.max(1),
            iter: 0,
            last_objective: f64::NAN,
            last_gradient_norm: f64::NAN,
        }
    }

    pub fn len(&self) -> usize {
        self.memory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memory.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Steps taken since construction; survives memory resets.
    pub fn iter(&self) -> usize {
        self.iter
    }

    /// Stores a curvature pair. Pairs with `sᵀy` too small are dropped.
    pub fn push(&mut self, s: DVector<f64>, y: DVector<f64>) -> bool {
        let sy = s.dot(&y);
        if !(sy > CURVATURE_TOL * s.norm() * y.norm()) {
            return false;
        }
        if self.memory.len() == self.capacity {
            self.memory.pop_front();
        }
        self.memory.push_back((s, y));
        true
    }

    pub fn reset_memory(&mut self) {
        self.memory.clear();
    }

    /// Two-loop recursion: `-H g`.
    pub fn direction(&self, g: &DVector<f64>) -> DVector<f64> {
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(self.memory.len());
        for (s, y) in self.memory.iter().rev() {
            let rho = 1.0 / s.dot(y);
            let a = rho * s.dot(&q);
            q.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        if let Some((s, y)) = self.memory.back() {
            q *= s.dot(y) / y.dot(y);
        }
        for ((s, y), a) in self.memory.iter().zip(alphas.into_iter().rev()) {
            let rho = 1.0 / s.dot(y);
            let b = rho * y.dot(&q);
            q.axpy(a - b, s, 1.0);
        }
        -q
    }
}

/// How the accepted point was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Wolfe,
    Backtracking,
    SteepestDescent,
    /// No decrease found; `x` is unchanged and memory has been cleared.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub x: DVector<f64>,
    pub f: f64,
    pub g: DVector<f64>,
    pub status: StepStatus,
}

/// One quasi-Newton step from `x`, where `f` and `g` are the cached objective and
/// gradient at `x`. `fg` returns both at a trial point.
pub fn lbfgs_step<F>(state: &mut LbfgsState, mut fg: F, x: &DVector<f64>, f: f64, g: &DVector<f64>) -> StepOutcome
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    state.iter += 1;
    let gnorm = g.norm();
    if gnorm == 0.0 {
        return finish(state, x.clone(), f, g.clone(), StepStatus::Wolfe);
    }
    let mut d = state.direction(g);
    if !(d.dot(g) < 0.0) {
        state.reset_memory();
        d = -g;
    }
    let alpha0 = if state.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };

    if let Some((a, fa, ga)) = strong_wolfe(&mut fg, x, f, g, &d, alpha0) {
        return accept(state, x, g, a, &d, fa, ga, StepStatus::Wolfe);
    }
    if let Some((a, fa, ga)) = backtrack(&mut fg, x, f, g, &d, alpha0) {
        return accept(state, x, g, a, &d, fa, ga, StepStatus::Backtracking);
    }
    state.reset_memory();
    let sd = -g;
    if let Some((a, fa, ga)) = backtrack(&mut fg, x, f, g, &sd, (1.0 / gnorm).min(1.0)) {
        return accept(state, x, g, a, &sd, fa, ga, StepStatus::SteepestDescent);
    }
    finish(state, x.clone(), f, g.clone(), StepStatus::LineSearchFailed)
}

#[allow(clippy::too_many_arguments)]
fn accept(
    state: &mut LbfgsState,
    x: &DVector<f64>,
    g: &DVector<f64>,
    alpha: f64,
    d: &DVector<f64>,
    fa: f64,
    ga: DVector<f64>,
    status: StepStatus,
) -> StepOutcome {
    let s = d * alpha;
    let y = &ga - g;
    let xn = x + &s;
    state.push(s, y);
    finish(state, xn, fa, ga, status)
}

fn finish(state: &mut LbfgsState, x: DVector<f64>, f: f64, g: DVector<f64>, status: StepStatus) -> StepOutcome {
    state.last_objective = f;
    state.last_gradient_norm = g.norm();
    StepOutcome { x, f, g, status }
}

struct Probe {
    a: f64,
    f: f64,
    slope: f64,
    g: DVector<f64>,
}

fn probe<F>(fg: &mut F, x: &DVector<f64>, d: &DVector<f64>, a: f64) -> Probe
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let (f, g) = fg(&(x + d * a));
    let f = if f.is_finite() && g.iter().all(|v| v.is_finite()) { f } else { f64::INFINITY };
    let slope = if f.is_finite() { g.dot(d) } else { f64::NAN };
    Probe { a, f, slope, g }
}

/// Minimizer of the cubic through two probes, clamped inside the bracket.
fn interpolate(lo: &Probe, hi: &Probe) -> f64 {
    let (a0, a1) = (lo.a, hi.a);
    let width = a1 - a0;
    let mid = 0.5 * (a0 + a1);
    if !hi.f.is_finite() || !hi.slope.is_finite() {
        return a0 + 0.1 * width;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.f - hi.f) / (a0 - a1);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = width.signum() * disc.sqrt();
    let t = a1 - width * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    let (min, max) = if a0 < a1 { (a0, a1) } else { (a1, a0) };
    let margin = 0.1 * (max - min);
    if t.is_finite() && t > min + margin && t < max - margin {
        t
    } else {
        mid
    }
}

fn strong_wolfe<F>(
    fg: &mut F,
    x: &DVector<f64>,
    f0: f64,
    g0: &DVector<f64>,
    d: &DVector<f64>,
    alpha0: f64,
) -> Option<(f64, f64, DVector<f64>)>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let slope0 = g0.dot(d);
    let origin = Probe { a: 0.0, f: f0, slope: slope0, g: g0.clone() };
    let armijo = |p: &Probe| p.f <= f0 + C1 * p.a * slope0;
    let curvature = |p: &Probe| p.slope.abs() <= -C2 * slope0;

    let mut trials = 0;
    let mut prev = origin;
    let mut a = alpha0;
    let (mut lo, mut hi);
    loop {
        if trials == MAX_TRIALS {
            return None;
        }
        trials += 1;
        let cur = probe(fg, x, d, a);
        if !armijo(&cur) || (prev.a > 0.0 && cur.f >= prev.f) {
            lo = prev;
            hi = cur;
            break;
        }
        if curvature(&cur) {
            return Some((cur.a, cur.f, cur.g));
        }
        if cur.slope >= 0.0 {
            lo = cur;
            hi = prev;
            break;
        }
        a = 2.0 * cur.a;
        prev = cur;
    }

    while trials < MAX_TRIALS {
        trials += 1;
        let a = interpolate(&lo, &hi);
        let cur = probe(fg, x, d, a);
        if !armijo(&cur) || cur.f >= lo.f {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Some((cur.a, cur.f, cur.g));
            }
            if cur.slope * (hi.a - lo.a) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
        if (hi.a - lo.a).abs() <= f64::EPSILON * lo.a.abs().max(1e-300) {
            break;
        }
    }
    None
}

/// Armijo backtracking by halving.
fn backtrack<F>(
    fg: &mut F,
    x: &DVector<f64>,
    f0: f64,
    g0: &DVector<f64>,
    d: &DVector<f64>,
    alpha0: f64,
) -> Option<(f64, f64, DVector<f64>)>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let slope0 = g0.dot(d);
    if !(slope0 < 0.0) {
        return None;
    }
    let mut a = alpha0;
    for _ in 0..MAX_BACKTRACKS {
        let p = probe(fg, x, d, a);
        if p.f <= f0 + C1 * a * slope0 && p.f < f0 {
            return Some((a, p.f, p.g));
        }
        a *= 0.5;
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { memory: DEFAULT_MEMORY, max_iter: 1000, grad_tol: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub f: f64,
    pub g: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs [`lbfgs_step`] until the gradient norm falls below `grad_tol`.
pub fn minimize<F>(mut fg: F, x0: DVector<f64>, opts: &LbfgsOptions) -> Result<Minimum>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let (mut f, mut g) = fg(&x0);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective);
    }
    let mut x = x0;
    let mut state = LbfgsState::new(opts.memory);
    let mut failures = 0;
    for it in 0..opts.max_iter {
        if g.norm() <= opts.grad_tol {
            return Ok(Minimum { x, f, g, iterations: it, converged: true });
        }
        let out = lbfgs_step(&mut state, &mut fg, &x, f, &g);
        if out.status == StepStatus::LineSearchFailed {
            failures += 1;
            if failures == 2 {
                return Ok(Minimum { x, f, g, iterations: it + 1, converged: false });
            }
            continue;
        }
        failures = 0;
        (x, f, g) = (out.x, out.f, out.g);
    }
    let converged = g.norm() <= opts.grad_tol;
    Ok(Minimum { x, f, g, iterations: opts.max_iter, converged })
}

/// Parameters split into mixing weights, means, factors and the covariances they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub pi: DVector<f64>,
    pub mu: Vec<DVector<f64>>,
    pub v: Vec<DMatrix<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGradients {
    pub pi: DVector<f64>,
    pub mu: Vec<DVector<f64>>,
    pub v: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilizationVerdict {
    pub zeta_grad: f64,
    pub zeta_param: f64,
    pub stabilized: bool,
    pub threshold: f64,
}

pub fn stabilization_threshold(tol: f64) -> f64 {
    10.0 * tol.cbrt()
}

/// Scaled-gradient and scaled-step test for a local plateau.
pub fn stabilization_test(
    now: &BlockParams,
    prev: &BlockParams,
    objective: f64,
    grads: &BlockGradients,
    tol: f64,
) -> Result<StabilizationVerdict> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("stabilization tolerance must be positive, got {tol}")));
    }
    let k = now.pi.len();
    let counts = [
        prev.pi.len(),
        grads.pi.len(),
        now.mu.len(),
        prev.mu.len(),
        grads.mu.len(),
        now.v.len(),
        grads.v.len(),
        now.cov.len(),
        prev.cov.len(),
    ];
    if let Some(&got) = counts.iter().find(|&&c| c != k) {
        return Err(Error::DimMismatch { expected: k, got });
    }
    for j in 0..k {
        if now.mu[j].len() != grads.mu[j].len() || now.mu[j].len() != prev.mu[j].len() {
            return Err(Error::DimMismatch { expected: now.mu[j].len(), got: grads.mu[j].len() });
        }
        if now.v[j].shape() != grads.v[j].shape() {
            return Err(Error::DimMismatch { expected: now.v[j].len(), got: grads.v[j].len() });
        }
        if now.cov[j].shape() != prev.cov[j].shape() {
            return Err(Error::DimMismatch { expected: now.cov[j].len(), got: prev.cov[j].len() });
        }
    }

    let mut zg = grads.pi.amax();
    for j in 0..k {
        zg = zg.max(now.mu[j].norm().max(1.0) * grads.mu[j].norm());
        zg = zg.max(now.v[j].norm().max(1.0) * grads.v[j].norm());
    }
    let zeta_grad = zg / objective.abs().max(1.0);

    let mut zeta_param = (&now.pi - &prev.pi).lp_norm(1);
    for j in 0..k {
        zeta_param = zeta_param.max((&now.mu[j] - &prev.mu[j]).norm() / now.mu[j].norm().max(1.0));
        zeta_param = zeta_param.max((&now.cov[j] - &prev.cov[j]).norm() / now.cov[j].norm().max(1.0));
    }

    let threshold = stabilization_threshold(tol);
    Ok(StabilizationVerdict {
        zeta_grad,
        zeta_param,
        stabilized: zeta_grad <= threshold && zeta_param <= threshold,
        threshold,
    })
}
