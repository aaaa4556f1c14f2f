//! Weights on the ε-capped probability simplex.

use nalgebra::DVector;

use crate::{Error, Result};

/// Largest contamination level the reweighting game accepts.
pub const EPSILON_LIMIT: f64 = 1.0 / 3.0;

const SUM_TOL: f64 = 1e-9;
const CAP_TOL: f64 = 1e-12;

/// A probability vector whose entries are bounded by `1 / ((1 - ε) N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    values: Vec<f64>,
    epsilon: f64,
    cap: f64,
}

pub fn cap_for(n: usize, epsilon: f64) -> f64 {
    1.0 / ((1.0 - epsilon) * n as f64)
}

fn check_epsilon(epsilon: f64, limit: f64) -> Result<()> {
    if !(0.0..limit).contains(&epsilon) {
        return Err(Error::BadEpsilon(epsilon));
    }
    Ok(())
}

impl WeightVector {
    /// All entries `1/N`.
    pub fn uniform(n: usize, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon, EPSILON_LIMIT)?;
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(Self { values: vec![1.0 / n as f64; n], epsilon, cap: cap_for(n, epsilon) })
    }

    /// Wraps values that already lie on the capped simplex.
    pub fn from_values(values: Vec<f64>, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon, 1.0)?;
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        let cap = cap_for(values.len(), epsilon);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("weights"));
        }
        let sum: f64 = values.iter().sum();
        let ok = (sum - 1.0).abs() <= SUM_TOL && values.iter().all(|&v| v >= 0.0 && v <= cap + CAP_TOL);
        if !ok {
            return Err(Error::InvalidParams("weights are off the capped simplex".into()));
        }
        Ok(Self { values, epsilon, cap })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn as_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn l1_distance(&self, other: &WeightVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum()
    }
}

/// Relative-entropy projection of `raw` onto the capped simplex.
///
/// Entries above the cap are clamped and the remaining mass is spread over the
/// free entries in proportion to `raw`; the clamped set only grows, so this
/// finishes in at most `N` passes. If the positive entries cannot carry all the
/// mass even when capped, the leftover goes uniformly to the zero entries (the
/// only points of finite divergence are then those).
pub fn kl_project(raw: &[f64], epsilon: f64) -> Result<WeightVector> {
    check_epsilon(epsilon, 1.0)?;
    let n = raw.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFiniteInput("kl_project raw"));
    }
    let cap = cap_for(n, epsilon);
    if (n as f64) * cap < 1.0 - SUM_TOL {
        return Err(Error::Infeasible(cap));
    }
    let positive = raw.iter().filter(|&&v| v > 0.0).count();
    if positive == 0 {
        return Err(Error::AllZero);
    }

    if epsilon == 0.0 {
        // the capped simplex is a single point
        return Ok(WeightVector { values: vec![1.0 / n as f64; n], epsilon, cap });
    }
    let mut values = vec![0.0; n];
    if (positive as f64) * cap <= 1.0 {
        let zeros = n - positive;
        let rest = if zeros > 0 { (1.0 - positive as f64 * cap) / zeros as f64 } else { 0.0 };
        for (v, &r) in values.iter_mut().zip(raw) {
            *v = if r > 0.0 { cap } else { rest };
        }
        return Ok(WeightVector { values, epsilon, cap });
    }

    let mut capped = vec![false; n];
    let mut n_capped = 0usize;
    loop {
        let free_mass = 1.0 - n_capped as f64 * cap;
        let free_raw: f64 = raw.iter().zip(&capped).filter(|(_, &c)| !c).map(|(r, _)| r).sum();
        let scale = free_mass / free_raw;
        let mut grew = false;
        for i in 0..n {
            if !capped[i] && raw[i] * scale > cap {
                capped[i] = true;
                n_capped += 1;
                grew = true;
            }
        }
        if !grew {
            for i in 0..n {
                values[i] = if capped[i] { cap } else { raw[i] * scale };
            }
            break;
        }
    }
    Ok(WeightVector { values, epsilon, cap })
}

/// Weiszfeld iteration from the centroid. A point closer than `1e-12` to the
/// iterate gets its reciprocal-distance weight capped at `1e12`.
pub fn geometric_median(points: &[DVector<f64>], tol: f64, max_iter: usize) -> Result<DVector<f64>> {
    let first = points.first().ok_or(Error::EmptyInput)?;
    let p = first.len();
    let mut x = DVector::zeros(p);
    for g in points {
        if g.len() != p {
            return Err(Error::DimMismatch { expected: p, got: g.len() });
        }
        x += g;
    }
    x /= points.len() as f64;

    for _ in 0..max_iter {
        let mut num = DVector::zeros(p);
        let mut den = 0.0;
        for g in points {
            let w = 1.0 / (g - &x).norm().max(1e-12);
            num.axpy(w, g, 1.0);
            den += w;
        }
        let next = num / den;
        let moved = (&next - &x).norm();
        x = next;
        if moved <= tol {
            break;
        }
    }
    Ok(x)
}

/// Total weight on the given indices.
pub fn outlier_mass(w: &WeightVector, outlier_indices: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in outlier_indices {
        total += *w.values.get(i).ok_or(Error::IndexOutOfRange { index: i, len: w.len() })?;
    }
    Ok(total)
}
