//! Data-only sums of powered inner products `C_k(n, n') = ⟨y_n, y_n'⟩^k`.

use nalgebra::{DMatrix, DVector};

/// Largest sample size for which the full Gram matrix is stored.
pub const EXACT_LIMIT: usize = 2000;

/// Feature map with `⟨F(y), F(z)⟩ = ⟨y, z⟩^m`: one coordinate per monomial
/// `y^α`, `|α| = m`, scaled by the root of its multinomial coefficient.
#[derive(Debug, Clone)]
struct MonomialMap {
    m: usize,
    exps: Vec<Vec<usize>>,
    coef: Vec<f64>,
}

impl MonomialMap {
    fn new(d: usize, m: usize) -> Self {
        let mut exps = Vec::new();
        let mut cur = vec![0; d];
        compositions(m, 0, &mut cur, &mut exps);
        let fact = |n: usize| (1..=n).fold(1.0, |a, i| a * i as f64);
        let coef = exps
            .iter()
            .map(|a| (fact(m) / a.iter().map(|&e| fact(e)).product::<f64>()).sqrt())
            .collect();
        Self { m, exps, coef }
    }

    fn dim(&self) -> usize {
        self.exps.len()
    }

    fn eval(&self, y: &[f64], out: &mut [f64]) {
        let pow: Vec<Vec<f64>> = y
            .iter()
            .map(|&v| {
                let mut p = vec![1.0; self.m + 1];
                for e in 1..=self.m {
                    p[e] = p[e - 1] * v;
                }
                p
            })
            .collect();
        for (f, (a, c)) in out.iter_mut().zip(self.exps.iter().zip(&self.coef)) {
            *f = c * a.iter().enumerate().map(|(i, &e)| pow[i][e]).product::<f64>();
        }
    }
}

fn compositions(left: usize, i: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if i + 1 == cur.len() {
        cur[i] = left;
        out.push(cur.clone());
        return;
    }
    for e in (0..=left).rev() {
        cur[i] = e;
        compositions(left - e, i + 1, cur, out);
    }
}

/// Observations with their per-order diagonal and row sums.
#[derive(Debug, Clone)]
pub struct PrecomputedMoments {
    y: DMatrix<f64>,
    orders: usize,
    /// `diag[(k-1, n)] = ⟨y_n, y_n⟩^k`.
    pub diag: DMatrix<f64>,
    /// `row_sums[(k-1, n)] = Σ_n' ⟨y_n, y_n'⟩^k`.
    pub row_sums: DMatrix<f64>,
    /// Elementwise powers `G^{∘m}`, `m = 1..=2L`, of the Gram matrix when stored.
    gram: Option<Vec<DMatrix<f64>>>,
}

impl PrecomputedMoments {
    pub fn new(y: &DMatrix<f64>, orders: usize) -> Self {
        Self::with_exact_limit(y, orders, EXACT_LIMIT)
    }

    /// Stores the Gram matrix only when `N ≤ limit`; otherwise double sums go
    /// through monomial features.
    pub fn with_exact_limit(y: &DMatrix<f64>, orders: usize, limit: usize) -> Self {
        let n = y.nrows();
        // order weights pair orders k and k', so powers up to 2L are needed
        let gram = (n <= limit).then(|| {
            let g = y * y.transpose();
            let mut powers = vec![g.clone()];
            for _ in 1..2 * orders {
                let next = powers.last().unwrap().component_mul(&g);
                powers.push(next);
            }
            powers
        });
        let mut pre = Self {
            y: y.clone(),
            orders,
            diag: DMatrix::zeros(orders, n),
            row_sums: DMatrix::zeros(orders, n),
            gram,
        };
        let ones = vec![1.0; n];
        for k in 1..=orders {
            let r = pre.weighted_row_sums(&ones, k);
            pre.row_sums.set_row(k - 1, &r.transpose());
            for i in 0..n {
                pre.diag[(k - 1, i)] = y.row(i).norm_squared().powi(k as i32);
            }
        }
        pre
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn d(&self) -> usize {
        self.y.ncols()
    }

    pub fn orders(&self) -> usize {
        self.orders
    }

    pub fn observations(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn observation(&self, n: usize) -> DVector<f64> {
        self.y.row(n).transpose()
    }

    pub fn is_exact(&self) -> bool {
        self.gram.is_some()
    }

    /// `⟨y_a, y_b⟩^m` computed directly.
    pub fn c(&self, m: usize, a: usize, b: usize) -> f64 {
        self.y.row(a).dot(&self.y.row(b)).powi(m as i32)
    }

    /// `R_n = Σ_n' a_n' ⟨y_n, y_n'⟩^m` for every `n`.
    pub fn weighted_row_sums(&self, a: &[f64], m: usize) -> DVector<f64> {
        let n = self.n();
        assert_eq!(a.len(), n);
        if let Some(powers) = &self.gram {
            let a = DVector::from_column_slice(a);
            if let Some(gm) = m.checked_sub(1).and_then(|i| powers.get(i)) {
                return gm * a;
            }
            return powers[0].map(|v| v.powi(m as i32)) * a;
        }
        let map = MonomialMap::new(self.d(), m);
        let mut f = vec![0.0; map.dim()];
        let mut total = vec![0.0; map.dim()];
        for i in 0..n {
            if a[i] == 0.0 {
                continue;
            }
            map.eval(self.y.row(i).transpose().as_slice(), &mut f);
            for (t, v) in total.iter_mut().zip(&f) {
                *t += a[i] * v;
            }
        }
        DVector::from_fn(n, |i, _| {
            map.eval(self.y.row(i).transpose().as_slice(), &mut f);
            f.iter().zip(&total).map(|(x, t)| x * t).sum()
        })
    }

    /// `Σ_{n,n'} a_n a_n' ⟨y_n, y_n'⟩^m`.
    pub fn weighted_total(&self, a: &[f64], m: usize) -> f64 {
        self.weighted_row_sums(a, m).iter().zip(a).map(|(r, w)| r * w).sum()
    }
}
