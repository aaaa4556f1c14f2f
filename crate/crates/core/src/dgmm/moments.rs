//! Inner-product moments of Gaussian mixtures: cumulants, Bell recurrences,
//! model and cross terms with their analytic gradients.

use nalgebra::{DMatrix, DVector};

use super::params::{Layout, MixtureParams};

/// `C(n, r)` as a float.
pub(crate) fn binom(n: usize, r: usize) -> f64 {
    if r > n {
        return 0.0;
    }
    let r = r.min(n - r);
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

/// Complete exponential Bell polynomials `B_0..B_k` of `κ^(1..k)`.
pub fn bell_model(kappa: &[f64]) -> Vec<f64> {
    let k = kappa.len();
    let mut b = vec![0.0; k + 1];
    b[0] = 1.0;
    for m in 1..=k {
        b[m] = (0..m).map(|l| binom(m - 1, l) * b[m - l - 1] * kappa[l]).sum();
    }
    b
}

/// `B_0..B_k` with only the first two cumulants `a` and `b` nonzero.
pub fn bell_cross(a: f64, b: f64, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k + 1];
    out[0] = 1.0;
    if k >= 1 {
        out[1] = a;
    }
    for m in 2..=k {
        out[m] = out[m - 1] * a + (m - 1) as f64 * out[m - 2] * b;
    }
    out
}

/// Gradient blocks in the natural coordinates `(π, μ_j, V_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub pi: Vec<f64>,
    pub mu: Vec<DVector<f64>>,
    pub v: Vec<DMatrix<f64>>,
}

impl ParamGrad {
    pub fn zeros(layout: &Layout) -> Self {
        Self {
            pi: vec![0.0; layout.k],
            mu: vec![DVector::zeros(layout.d); layout.k],
            v: layout.ranks.iter().map(|&r| DMatrix::zeros(layout.d, r)).collect(),
        }
    }

    /// Concatenation `[π; μ_1..μ_K; vec V_1..vec V_K]`.
    pub fn flatten(&self, layout: &Layout) -> DVector<f64> {
        let mut out = DVector::zeros(layout.dim());
        for j in 0..layout.k {
            out[j] = self.pi[j];
            out.rows_mut(layout.mu_offset(j), layout.d).copy_from(&self.mu[j]);
            out.rows_mut(layout.v_offset(j), self.v[j].len()).copy_from_slice(self.v[j].as_slice());
        }
        out
    }

    pub fn axpy(&mut self, a: f64, other: &ParamGrad) {
        for j in 0..self.pi.len() {
            self.pi[j] += a * other.pi[j];
            self.mu[j].axpy(a, &other.mu[j], 1.0);
            self.v[j] += &other.v[j] * a;
        }
    }
}

/// Powers `P^0..P^top` of `P = C_i C_j`.
struct PairPowers {
    p: Vec<DMatrix<f64>>,
}

impl PairPowers {
    fn new(ci: &DMatrix<f64>, cj: &DMatrix<f64>, top: usize) -> Self {
        let d = ci.nrows();
        let base = ci * cj;
        let mut p = Vec::with_capacity(top + 1);
        p.push(DMatrix::identity(d, d));
        for m in 1..=top {
            let next = &p[m - 1] * &base;
            p.push(next);
        }
        Self { p }
    }
}

/// Cumulants `κ^(1..L)_ij` of `⟨X_i, X_j⟩` for independent components.
fn pair_cumulants(
    ci: &DMatrix<f64>,
    cj: &DMatrix<f64>,
    mui: &DVector<f64>,
    muj: &DVector<f64>,
    pw: &PairPowers,
    orders: usize,
) -> Vec<f64> {
    (1..=orders)
        .map(|l| {
            if l == 1 {
                return muj.dot(mui);
            }
            let lf = factorial(l);
            if l % 2 == 0 {
                let m = l / 2;
                let pm = &pw.p[m];
                let pm1 = &pw.p[m - 1];
                let tr = pm.trace();
                let left = mui.dot(&(cj * (pm1 * mui)));
                let right = muj.dot(&(pm1 * (ci * muj)));
                factorial(l - 1) * tr + 0.5 * lf * (left + right)
            } else {
                let m = (l - 1) / 2;
                lf * muj.dot(&(&pw.p[m] * mui))
            }
        })
        .collect()
}

/// Partial derivatives of `κ^(l)_ij` in the second slot: `(∂μ_j, S)` with
/// `∂V_j κ = S V_j`.
fn pair_cumulant_partials(
    ci: &DMatrix<f64>,
    mui: &DVector<f64>,
    muj: &DVector<f64>,
    pw: &PairPowers,
    orders: usize,
) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let d = ci.nrows();
    (1..=orders)
        .map(|l| {
            if l == 1 {
                return (mui.clone(), DMatrix::zeros(d, d));
            }
            let lf = factorial(l);
            if l % 2 == 0 {
                let m = l / 2;
                let pc = &pw.p[m - 1] * ci;
                let dmu = &pc * muj * lf;
                let mut s = pc * lf;
                for q in 0..m {
                    let a = &pw.p[q] * mui;
                    let b = &pw.p[m - 1 - q] * mui;
                    s += a * b.transpose() * lf;
                }
                for q in 0..m.saturating_sub(1) {
                    let a = ci * (pw.p[q].transpose() * muj);
                    let b = ci * (pw.p[m - 2 - q].transpose() * muj);
                    s += a * b.transpose() * lf;
                }
                (dmu, s)
            } else {
                let m = (l - 1) / 2;
                let dmu = &pw.p[m] * mui * lf;
                let mut g = DMatrix::zeros(d, d);
                for q in 0..m {
                    let a = ci * (pw.p[q].transpose() * muj);
                    let b = &pw.p[m - 1 - q] * mui;
                    g += a * b.transpose();
                }
                let s = (&g + g.transpose()) * lf;
                (dmu, s)
            }
        })
        .collect()
}

fn total_covs(params: &MixtureParams) -> Vec<DMatrix<f64>> {
    (0..params.k()).map(|j| params.total_cov(j)).collect()
}

/// `κ^(l)_ij` for `1 ≤ l`.
pub fn cumulant(params: &MixtureParams, i: usize, j: usize, l: usize) -> f64 {
    assert!(l >= 1, "cumulant order starts at 1");
    let ci = params.total_cov(i);
    let cj = params.total_cov(j);
    let pw = PairPowers::new(&ci, &cj, l / 2);
    pair_cumulants(&ci, &cj, &params.mu[i], &params.mu[j], &pw, l)[l - 1]
}

/// Gradient of `κ^(l)_ij` in `(μ_j, V_j)` with component `i` held fixed.
pub fn cumulant_grad(params: &MixtureParams, i: usize, j: usize, l: usize) -> (DVector<f64>, DMatrix<f64>) {
    assert!(l >= 1, "cumulant order starts at 1");
    let ci = params.total_cov(i);
    let cj = params.total_cov(j);
    let pw = PairPowers::new(&ci, &cj, l / 2);
    let (dmu, s) = pair_cumulant_partials(&ci, &params.mu[i], &params.mu[j], &pw, l).pop().unwrap();
    (dmu, s * &params.v[j])
}

/// Model terms `φ^(1..L)`.
pub fn model_terms(params: &MixtureParams, orders: usize) -> Vec<f64> {
    model_terms_impl(params, orders, false).0
}

pub fn model_term(params: &MixtureParams, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    model_terms(params, k)[k - 1]
}

/// `φ^(1..L)` together with their gradients.
pub fn model_terms_with_grad(params: &MixtureParams, orders: usize) -> (Vec<f64>, Vec<ParamGrad>) {
    let (phi, grads) = model_terms_impl(params, orders, true);
    (phi, grads.unwrap())
}

pub fn model_term_grad(params: &MixtureParams, k: usize) -> ParamGrad {
    model_terms_with_grad(params, k).1.pop().unwrap()
}

fn model_terms_impl(params: &MixtureParams, orders: usize, with_grad: bool) -> (Vec<f64>, Option<Vec<ParamGrad>>) {
    let kk = params.k();
    let layout = Layout::of(params);
    let covs = total_covs(params);
    let mut phi = vec![0.0; orders];
    let mut grads = with_grad.then(|| vec![ParamGrad::zeros(&layout); orders]);
    for i in 0..kk {
        for j in 0..kk {
            let pw = PairPowers::new(&covs[i], &covs[j], orders / 2);
            let kappa = pair_cumulants(&covs[i], &covs[j], &params.mu[i], &params.mu[j], &pw, orders);
            let bell = bell_model(&kappa);
            let w = params.pi[i] * params.pi[j];
            for k in 1..=orders {
                phi[k - 1] += w * bell[k];
            }
            let Some(grads) = grads.as_mut() else { continue };
            let partials = pair_cumulant_partials(&covs[i], &params.mu[i], &params.mu[j], &pw, orders);
            for k in 1..=orders {
                let g = &mut grads[k - 1];
                g.pi[j] += 2.0 * params.pi[i] * bell[k];
                let mut smat = DMatrix::zeros(layout.d, layout.d);
                for l in 1..=k {
                    let c = 2.0 * w * binom(k, l) * bell[k - l];
                    g.mu[j].axpy(c, &partials[l - 1].0, 1.0);
                    smat += &partials[l - 1].1 * c;
                }
                g.v[j] += smat * &params.v[j];
            }
        }
    }
    (phi, grads)
}

/// `ψ^(k)(y)`.
pub fn cross_term(params: &MixtureParams, k: usize, y: &DVector<f64>) -> f64 {
    (0..params.k())
        .map(|j| {
            let a = y.dot(&params.mu[j]);
            let b = y.dot(&(params.total_cov(j) * y));
            params.pi[j] * bell_cross(a, b, k)[k]
        })
        .sum()
}

/// `∇ψ^(k)(y)` flattened in the natural coordinates.
pub fn cross_term_grad(params: &MixtureParams, k: usize, y: &DVector<f64>) -> DVector<f64> {
    let layout = Layout::of(params);
    let mut g = ParamGrad::zeros(&layout);
    let kf = k as f64;
    for h in 0..params.k() {
        let a = y.dot(&params.mu[h]);
        let b = y.dot(&(params.total_cov(h) * y));
        let bell = bell_cross(a, b, k);
        g.pi[h] = bell[k];
        if k >= 1 {
            g.mu[h] = y * (params.pi[h] * kf * bell[k - 1]);
        }
        if k >= 2 {
            let yv = params.v[h].tr_mul(y);
            g.v[h] = y * yv.transpose() * (params.pi[h] * kf * (kf - 1.0) * bell[k - 2]);
        }
    }
    g.flatten(&layout)
}
