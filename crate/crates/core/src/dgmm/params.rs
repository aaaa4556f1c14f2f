use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::specmat::{sym_eigen, SymMatrix};
use crate::{Error, Result};

/// A `K`-component low-rank Gaussian mixture observed through known additive
/// noise: component `j` is `N(μ_j, V_j V_jᵀ + Σ_ξ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub pi: Vec<f64>,
    pub mu: Vec<DVector<f64>>,
    pub v: Vec<DMatrix<f64>>,
    pub sigma_xi: DMatrix<f64>,
}

impl MixtureParams {
    pub fn new(
        pi: Vec<f64>,
        mu: Vec<DVector<f64>>,
        v: Vec<DMatrix<f64>>,
        sigma_xi: DMatrix<f64>,
    ) -> Result<Self> {
        let params = Self { pi, mu, v, sigma_xi };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.pi.len();
        if k == 0 {
            return Err(Error::EmptyInput);
        }
        if self.mu.len() != k || self.v.len() != k {
            return Err(Error::InvalidParams("component counts disagree".into()));
        }
        let d = self.mu[0].len();
        if (self.pi.iter().sum::<f64>() - 1.0).abs() > 1e-10 || self.pi.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::InvalidParams("mixing weights must be positive and sum to one".into()));
        }
        for j in 0..k {
            if self.mu[j].len() != d {
                return Err(Error::DimMismatch { expected: d, got: self.mu[j].len() });
            }
            if self.v[j].nrows() != d || self.v[j].ncols() > d {
                return Err(Error::InvalidParams(format!("factor {j} has shape {:?}", self.v[j].shape())));
            }
        }
        if self.sigma_xi.shape() != (d, d) {
            return Err(Error::DimMismatch { expected: d, got: self.sigma_xi.nrows() });
        }
        let all_finite = self.pi.iter().all(|x| x.is_finite())
            && self.mu.iter().all(|m| m.iter().all(|x| x.is_finite()))
            && self.v.iter().all(|m| m.iter().all(|x| x.is_finite()))
            && self.sigma_xi.iter().all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::NonFiniteInput("mixture parameters"));
        }
        if (&self.sigma_xi - self.sigma_xi.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidParams("noise covariance is not symmetric".into()));
        }
        let eig = sym_eigen(&SymMatrix::symmetrized(self.sigma_xi.clone()))?;
        if eig.values[d - 1] < -1e-10 {
            return Err(Error::InvalidParams("noise covariance is not PSD".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn d(&self) -> usize {
        self.mu[0].len()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.v.iter().map(|v| v.ncols()).collect()
    }

    /// Signal covariance `V_j V_jᵀ`.
    pub fn signal_cov(&self, j: usize) -> DMatrix<f64> {
        &self.v[j] * self.v[j].transpose()
    }

    /// Observed covariance `V_j V_jᵀ + Σ_ξ`.
    pub fn total_cov(&self, j: usize) -> DMatrix<f64> {
        self.signal_cov(j) + &self.sigma_xi
    }

    /// Same signal, different noise model.
    pub fn with_noise(&self, sigma_xi: DMatrix<f64>) -> Self {
        Self { sigma_xi, ..self.clone() }
    }

    /// Plain-text layout: a header line `K d`, the ranks, the mixing weights,
    /// one line per mean, each factor row-major one row per line, then `Σ_ξ`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |xs: &mut dyn Iterator<Item = f64>| xs.map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "mixture {} {}", self.k(), self.d());
        let _ = writeln!(
            s,
            "ranks {}",
            self.ranks().iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" ")
        );
        let _ = writeln!(s, "pi {}", join(&mut self.pi.iter().copied()));
        for m in &self.mu {
            let _ = writeln!(s, "mu {}", join(&mut m.iter().copied()));
        }
        for v in &self.v {
            for row in v.row_iter() {
                let _ = writeln!(s, "v {}", join(&mut row.iter().copied()));
            }
        }
        for row in self.sigma_xi.row_iter() {
            let _ = writeln!(s, "noise {}", join(&mut row.iter().copied()));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Config(format!("mixture text: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut next = |tag: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(tag) {
                return Err(bad(&format!("expected `{tag}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let floats = |xs: Vec<String>| -> Result<Vec<f64>> {
            xs.iter().map(|x| x.parse::<f64>().map_err(|_| bad("bad number"))).collect()
        };
        let head = next("mixture")?;
        let (k, d): (usize, usize) = match head.as_slice() {
            [a, b] => (a.parse().map_err(|_| bad("K"))?, b.parse().map_err(|_| bad("d"))?),
            _ => return Err(bad("header")),
        };
        let ranks: Vec<usize> = next("ranks")?
            .iter()
            .map(|r| r.parse().map_err(|_| bad("rank")))
            .collect::<Result<_>>()?;
        if ranks.len() != k {
            return Err(bad("rank count"));
        }
        let pi = floats(next("pi")?)?;
        let mut mu = Vec::with_capacity(k);
        for _ in 0..k {
            mu.push(DVector::from_vec(floats(next("mu")?)?));
        }
        let mut v = Vec::with_capacity(k);
        for &r in &ranks {
            let mut rows = Vec::with_capacity(d * r);
            for _ in 0..d {
                let row = floats(next("v")?)?;
                if row.len() != r {
                    return Err(bad("factor width"));
                }
                rows.extend(row);
            }
            v.push(DMatrix::from_row_slice(d, r, &rows));
        }
        let mut noise = Vec::with_capacity(d * d);
        for _ in 0..d {
            noise.extend(floats(next("noise")?)?);
        }
        if noise.len() != d * d {
            return Err(bad("noise shape"));
        }
        Self::new(pi, mu, v, DMatrix::from_row_slice(d, d, &noise))
    }
}

/// Shape of the flat parameter vector: `K` logits, then the means, then each
/// factor in column-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub k: usize,
    pub d: usize,
    pub ranks: Vec<usize>,
}

impl Layout {
    pub fn new(k: usize, d: usize, ranks: Vec<usize>) -> Self {
        assert_eq!(ranks.len(), k);
        Self { k, d, ranks }
    }

    pub fn of(params: &MixtureParams) -> Self {
        Self::new(params.k(), params.d(), params.ranks())
    }

    pub fn dim(&self) -> usize {
        self.k + self.k * self.d + self.ranks.iter().map(|r| r * self.d).sum::<usize>()
    }

    pub fn mu_offset(&self, j: usize) -> usize {
        self.k + j * self.d
    }

    pub fn v_offset(&self, j: usize) -> usize {
        self.k + self.k * self.d + self.ranks[..j].iter().map(|r| r * self.d).sum::<usize>()
    }
}

/// Softmax-parametrized mixture: `π = softmax(logits)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedParams {
    pub layout: Layout,
    pub theta: DVector<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl UnconstrainedParams {
    /// Logits are `log π` shifted to zero mean.
    pub fn from_params(params: &MixtureParams) -> Self {
        let layout = Layout::of(params);
        let mut theta = DVector::zeros(layout.dim());
        let logs: Vec<f64> = params.pi.iter().map(|p| p.ln()).collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        for (j, l) in logs.iter().enumerate() {
            theta[j] = l - mean;
        }
        for j in 0..layout.k {
            theta.rows_mut(layout.mu_offset(j), layout.d).copy_from(&params.mu[j]);
            let v = &params.v[j];
            theta.rows_mut(layout.v_offset(j), v.len()).copy_from_slice(v.as_slice());
        }
        Self { layout, theta }
    }

    pub fn to_params(&self, sigma_xi: &DMatrix<f64>) -> Result<MixtureParams> {
        let l = &self.layout;
        let pi = softmax(&self.theta.as_slice()[..l.k]);
        let mu = (0..l.k).map(|j| self.theta.rows(l.mu_offset(j), l.d).into_owned()).collect();
        let v = (0..l.k)
            .map(|j| {
                let r = l.ranks[j];
                DMatrix::from_column_slice(l.d, r, &self.theta.as_slice()[l.v_offset(j)..l.v_offset(j) + l.d * r])
            })
            .collect();
        MixtureParams::new(pi, mu, v, sigma_xi.clone())
    }

    /// Removes the shift gauge of the logits.
    pub fn center_logits(theta: &mut DVector<f64>, k: usize) {
        let mean = theta.rows(0, k).sum() / k as f64;
        for j in 0..k {
            theta[j] -= mean;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MixtureParams {
        MixtureParams::new(
            vec![0.3, 0.7],
            vec![DVector::from_vec(vec![1.0, -2.0, 0.5]), DVector::from_vec(vec![0.0, 1.5, -1.0])],
            vec![
                DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.3, 0.8, 0.1, 0.1]),
                DMatrix::from_row_slice(3, 1, &[0.5, 0.5, -1.0]),
            ],
            DMatrix::identity(3, 3) * 0.1,
        )
        .unwrap()
    }

    #[test]
    fn validation() {
        let p = sample();
        assert!(MixtureParams::new(vec![0.5, 0.6], p.mu.clone(), p.v.clone(), p.sigma_xi.clone()).is_err());
        assert!(MixtureParams::new(vec![1.0, 0.0], p.mu.clone(), p.v.clone(), p.sigma_xi.clone()).is_err());
        let bad_noise = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0, 1.0]));
        assert!(MixtureParams::new(p.pi.clone(), p.mu.clone(), p.v.clone(), bad_noise).is_err());
    }

    #[test]
    fn text_round_trip() {
        let p = sample();
        let back = MixtureParams::from_text(&p.to_text()).unwrap();
        assert_eq!(back, p);
        assert!(MixtureParams::from_text("mixture 2").is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let p = sample();
        let u = UnconstrainedParams::from_params(&p);
        assert_eq!(u.theta.len(), 2 + 6 + 6 + 3);
        assert!(u.theta.rows(0, 2).sum().abs() < 1e-15);
        let back = u.to_params(&p.sigma_xi).unwrap();
        for (a, b) in back.pi.iter().zip(&p.pi) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(back.mu, p.mu);
        assert_eq!(back.v, p.v);

        let mut shifted = u.clone();
        for j in 0..2 {
            shifted.theta[j] += 3.0;
        }
        let again = shifted.to_params(&p.sigma_xi).unwrap();
        for (a, b) in again.pi.iter().zip(&p.pi) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
