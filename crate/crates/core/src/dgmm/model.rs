//! The robust DGMM objective as a [`MomentModel`].

use nalgebra::{DMatrix, DVector};

use super::kernel::PrecomputedMoments;
use super::moments::{bell_cross, model_terms, model_terms_with_grad, ParamGrad};
use super::params::{softmax, Layout, MixtureParams, UnconstrainedParams};
use crate::engine::{Frozen, MomentModel, OrderWeights};
use crate::optim::{BlockGradients, BlockParams};
use crate::weights::WeightVector;
use crate::{Error, Result};

/// Below this the order-weight denominator is treated as zero.
pub const ORDER_WEIGHT_GUARD: f64 = 1e-14;

/// Per-component quantities reused across observations.
struct CrossEval {
    pi: Vec<f64>,
    mu: Vec<DVector<f64>>,
    v: Vec<DMatrix<f64>>,
    cov: Vec<DMatrix<f64>>,
}

impl CrossEval {
    fn new(p: &MixtureParams) -> Self {
        Self {
            pi: p.pi.clone(),
            mu: p.mu.clone(),
            v: p.v.clone(),
            cov: (0..p.k()).map(|j| p.total_cov(j)).collect(),
        }
    }

    /// `B_0..B_L` of the cross recurrence for each component.
    fn bells(&self, y: &DVector<f64>, orders: usize) -> Vec<Vec<f64>> {
        (0..self.pi.len())
            .map(|j| bell_cross(y.dot(&self.mu[j]), y.dot(&(&self.cov[j] * y)), orders))
            .collect()
    }

    fn psi(&self, bells: &[Vec<f64>], k: usize) -> f64 {
        bells.iter().zip(&self.pi).map(|(b, p)| p * b[k]).sum()
    }
}

/// DGMM moment matching on fixed observations.
#[derive(Debug, Clone)]
pub struct DgmmModel {
    pre: PrecomputedMoments,
    layout: Layout,
    sigma_xi: DMatrix<f64>,
}

impl DgmmModel {
    pub fn new(pre: PrecomputedMoments, k: usize, ranks: Vec<usize>, sigma_xi: DMatrix<f64>) -> Result<Self> {
        let d = pre.d();
        if ranks.len() != k || k == 0 {
            return Err(Error::InvalidParams(format!("{} ranks for {k} components", ranks.len())));
        }
        if let Some(&r) = ranks.iter().find(|&&r| r == 0 || r > d) {
            return Err(Error::InvalidParams(format!("rank {r} outside 1..={d}")));
        }
        if sigma_xi.shape() != (d, d) {
            return Err(Error::DimMismatch { expected: d, got: sigma_xi.nrows() });
        }
        if pre.orders() == 0 {
            return Err(Error::Config("at least one moment order is required".into()));
        }
        Ok(Self { pre, layout: Layout::new(k, d, ranks), sigma_xi })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn precomputed(&self) -> &PrecomputedMoments {
        &self.pre
    }

    pub fn sigma_xi(&self) -> &DMatrix<f64> {
        &self.sigma_xi
    }

    /// Mixture at `theta`; no validation, so it is usable mid-optimization.
    pub fn params(&self, theta: &DVector<f64>) -> MixtureParams {
        let l = &self.layout;
        MixtureParams {
            pi: softmax(&theta.as_slice()[..l.k]),
            mu: (0..l.k).map(|j| theta.rows(l.mu_offset(j), l.d).into_owned()).collect(),
            v: (0..l.k)
                .map(|j| {
                    let len = l.d * l.ranks[j];
                    DMatrix::from_column_slice(l.d, l.ranks[j], &theta.as_slice()[l.v_offset(j)..][..len])
                })
                .collect(),
            sigma_xi: self.sigma_xi.clone(),
        }
    }

    pub fn theta_of(&self, params: &MixtureParams) -> Result<DVector<f64>> {
        let layout = Layout::of(params);
        if layout != self.layout {
            return Err(Error::InvalidParams("parameter shape does not match the model".into()));
        }
        Ok(UnconstrainedParams::from_params(params).theta)
    }

    /// `ψ^(k)(y_n)` as an `L × N` matrix.
    pub fn cross_terms(&self, params: &MixtureParams) -> DMatrix<f64> {
        let ev = CrossEval::new(params);
        let l = self.pre.orders();
        let mut out = DMatrix::zeros(l, self.pre.n());
        for n in 0..self.pre.n() {
            let bells = ev.bells(&self.pre.observation(n), l);
            for k in 1..=l {
                out[(k - 1, n)] = ev.psi(&bells, k);
            }
        }
        out
    }

    /// Pulls a natural-coordinate gradient back to logits.
    fn to_logit_coords(&self, pi: &[f64], g: &mut DVector<f64>) {
        let k = self.layout.k;
        let mean: f64 = (0..k).map(|j| pi[j] * g[j]).sum();
        for j in 0..k {
            g[j] = pi[j] * (g[j] - mean);
        }
    }

    /// Natural-coordinate gradient of the weighted data term `Σ_k c_k Σ_n w_kn ψ_kn`.
    fn weighted_cross_grad(&self, params: &MixtureParams, coef: &[f64], weights: &[WeightVector]) -> ParamGrad {
        let ev = CrossEval::new(params);
        let l = self.pre.orders();
        let mut g = ParamGrad::zeros(&self.layout);
        for n in 0..self.pre.n() {
            let y = self.pre.observation(n);
            let bells = ev.bells(&y, l);
            for h in 0..self.layout.k {
                let b = &bells[h];
                let (mut sp, mut sm, mut sv) = (0.0, 0.0, 0.0);
                for k in 1..=l {
                    let c = coef[k - 1] * weights[k - 1].values()[n];
                    let kf = k as f64;
                    sp += c * b[k];
                    sm += c * kf * b[k - 1];
                    if k >= 2 {
                        sv += c * kf * (kf - 1.0) * b[k - 2];
                    }
                }
                g.pi[h] += sp;
                g.mu[h].axpy(ev.pi[h] * sm, &y, 1.0);
                if sv != 0.0 {
                    let yv = ev.v[h].tr_mul(&y);
                    g.v[h].ger(ev.pi[h] * sv, &y, &yv, 1.0);
                }
            }
        }
        g
    }

    fn check_weights(&self, weights: &[WeightVector]) -> Result<()> {
        if weights.len() != self.pre.orders() {
            return Err(Error::DimMismatch { expected: self.pre.orders(), got: weights.len() });
        }
        if let Some(w) = weights.iter().find(|w| w.len() != self.pre.n()) {
            return Err(Error::DimMismatch { expected: self.pre.n(), got: w.len() });
        }
        Ok(())
    }

    fn check_frozen(&self, frozen: &Frozen) -> Result<()> {
        self.check_weights(&frozen.weights)?;
        let l = self.pre.orders();
        if frozen.order_weights.len() != l || frozen.constants.len() != l {
            return Err(Error::DimMismatch { expected: l, got: frozen.order_weights.len() });
        }
        Ok(())
    }
}

impl MomentModel for DgmmModel {
    fn orders(&self) -> usize {
        self.pre.orders()
    }

    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn n_obs(&self) -> usize {
        self.pre.n()
    }

    /// Rows are `∇ψ^(k)(y_n)` in the natural coordinates `(π, μ, vec V)`.
    fn per_obs_gradients(&self, theta: &DVector<f64>, k: usize) -> Result<DMatrix<f64>> {
        if k == 0 || k > self.orders() {
            return Err(Error::IndexOutOfRange { index: k, len: self.orders() });
        }
        let params = self.params(theta);
        let ev = CrossEval::new(&params);
        let l = &self.layout;
        let kf = k as f64;
        let mut out = DMatrix::zeros(self.pre.n(), l.dim());
        for n in 0..self.pre.n() {
            let y = self.pre.observation(n);
            let bells = ev.bells(&y, k);
            for h in 0..l.k {
                let b = &bells[h];
                out[(n, h)] = b[k];
                let cm = ev.pi[h] * kf * b[k - 1];
                for i in 0..l.d {
                    out[(n, l.mu_offset(h) + i)] = cm * y[i];
                }
                if k >= 2 {
                    let cv = ev.pi[h] * kf * (kf - 1.0) * b[k - 2];
                    let yv = ev.v[h].tr_mul(&y);
                    let off = l.v_offset(h);
                    for r in 0..l.ranks[h] {
                        for i in 0..l.d {
                            out[(n, off + r * l.d + i)] = cv * y[i] * yv[r];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn weight_constants(&self, weights: &[WeightVector]) -> Result<Vec<f64>> {
        self.check_weights(weights)?;
        Ok((1..=self.orders()).map(|k| self.pre.weighted_total(weights[k - 1].values(), k)).collect())
    }

    fn order_weights(&self, theta: &DVector<f64>, weights: &[WeightVector]) -> Result<OrderWeights> {
        self.check_weights(weights)?;
        let params = self.params(theta);
        let phi = model_terms(&params, self.orders());
        let psi = self.cross_terms(&params);
        Ok(order_weights_from_terms(&self.pre, &phi, &psi, weights))
    }

    fn robust_objective(&self, theta: &DVector<f64>, frozen: &Frozen) -> Result<f64> {
        self.check_frozen(frozen)?;
        let params = self.params(theta);
        let phi = model_terms(&params, self.orders());
        let psi = self.cross_terms(&params);
        Ok(assemble_objective(&phi, &psi, frozen))
    }

    fn robust_gradient(&self, theta: &DVector<f64>, frozen: &Frozen) -> Result<DVector<f64>> {
        Ok(self.objective_and_gradient(theta, frozen)?.1)
    }

    fn objective_and_gradient(&self, theta: &DVector<f64>, frozen: &Frozen) -> Result<(f64, DVector<f64>)> {
        self.check_frozen(frozen)?;
        let params = self.params(theta);
        let l = self.orders();
        let (phi, dphi) = model_terms_with_grad(&params, l);
        let psi = self.cross_terms(&params);
        let f = assemble_objective(&phi, &psi, frozen);

        let mut g = ParamGrad::zeros(&self.layout);
        for k in 0..l {
            g.axpy(frozen.order_weights[k], &dphi[k]);
        }
        g.axpy(-2.0, &self.weighted_cross_grad(&params, &frozen.order_weights, &frozen.weights));
        let mut flat = g.flatten(&self.layout);
        self.to_logit_coords(&params.pi, &mut flat);
        Ok((f, flat))
    }

    fn normalize(&self, theta: &mut DVector<f64>) {
        UnconstrainedParams::center_logits(theta, self.layout.k);
    }

    fn blocks(&self, theta: &DVector<f64>, frozen: &Frozen) -> Option<(BlockParams, BlockGradients)> {
        let g = self.robust_gradient(theta, frozen).ok()?;
        let p = self.params(theta);
        let l = &self.layout;
        let bp = BlockParams {
            pi: DVector::from_vec(p.pi.clone()),
            cov: (0..l.k).map(|j| p.signal_cov(j)).collect(),
            mu: p.mu,
            v: p.v,
        };
        let bg = BlockGradients {
            pi: g.rows(0, l.k).into_owned(),
            mu: (0..l.k).map(|j| g.rows(l.mu_offset(j), l.d).into_owned()).collect(),
            v: (0..l.k)
                .map(|j| DMatrix::from_column_slice(l.d, l.ranks[j], &g.as_slice()[l.v_offset(j)..][..l.d * l.ranks[j]]))
                .collect(),
        };
        Some((bp, bg))
    }
}

fn assemble_objective(phi: &[f64], psi: &DMatrix<f64>, frozen: &Frozen) -> f64 {
    (0..phi.len())
        .map(|k| {
            let o = frozen.order_weights[k];
            if o == 0.0 {
                return 0.0;
            }
            let cross: f64 = frozen.weights[k].values().iter().zip(psi.row(k).iter()).map(|(w, p)| w * p).sum();
            o * (phi[k] - 2.0 * cross + frozen.constants[k])
        })
        .sum()
}

/// Order weights from precomputed model and cross terms (`psi` is `L × N`).
pub fn order_weights_from_terms(
    pre: &PrecomputedMoments,
    phi: &[f64],
    psi: &DMatrix<f64>,
    weights: &[WeightVector],
) -> OrderWeights {
    let l = phi.len();
    let n = pre.n();
    let mut values = vec![0.0; l];
    let mut fallback = vec![false; l];
    // pair (k, k') contributes to den_k; it is symmetric so compute once
    let mut pair = DMatrix::zeros(l, l);
    for k in 0..l {
        for kp in k..l {
            let (wk, wkp) = (weights[k].values(), weights[kp].values());
            let a: Vec<f64> = wk.iter().zip(wkp).map(|(x, y)| x * y).collect();
            let u: Vec<f64> = (0..n).map(|i| phi[k] / 2.0 - psi[(k, i)]).collect();
            let up: Vec<f64> = (0..n).map(|i| phi[kp] / 2.0 - psi[(kp, i)]).collect();
            let big_a: f64 = a.iter().sum();
            let sau: f64 = a.iter().zip(&u).map(|(x, y)| x * y).sum();
            let saup: f64 = a.iter().zip(&up).map(|(x, y)| x * y).sum();
            let sauu: f64 = (0..n).map(|i| a[i] * u[i] * up[i]).sum();
            let r_k = pre.weighted_row_sums(&a, k + 1);
            let r_kp = if kp == k { r_k.clone() } else { pre.weighted_row_sums(&a, kp + 1) };
            let cc = pre.weighted_total(&a, k + kp + 2);
            let mixed: f64 = (0..n).map(|i| a[i] * (u[i] * r_kp[i] + up[i] * r_k[i])).sum();
            let v = 2.0 * (big_a * sauu + sau * saup) + 2.0 * mixed + cc;
            pair[(k, kp)] = v;
            pair[(kp, k)] = v;
        }
    }
    for k in 0..l {
        let w = weights[k].values();
        let num: f64 = (0..n).map(|i| w[i] * w[i] * (phi[k] - 2.0 * psi[(k, i)] + pre.diag[(k, i)])).sum();
        let den: f64 = pair.row(k).sum();
        let o = num / den;
        if den.abs() < ORDER_WEIGHT_GUARD || !o.is_finite() {
            values[k] = 1.0 / l as f64;
            fallback[k] = true;
        } else {
            values[k] = o;
        }
    }
    OrderWeights { values, fallback }
}
