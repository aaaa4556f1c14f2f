//! Seeded synthetic data: contaminated gradient clouds and contaminated
//! low-rank mixtures.
//!
//! All randomness comes from ChaCha20 streams keyed by `(seed, trial, stream)`,
//! so a dataset is a pure function of its spec.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::dgmm::MixtureParams;
use crate::sgr::GradientCloud;
use crate::{Error, Result};

/// Independent purposes drawing from the same `(seed, trial)`.
pub mod stream {
    pub const CLOUD: u64 = 1;
    pub const MIXTURE_PARAMS: u64 = 2;
    pub const MIXTURE_SAMPLES: u64 = 3;
    pub const CONTAMINATION: u64 = 4;
    pub const INIT: u64 = 5;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 256-bit ChaCha key from `(seed, trial, stream)`.
pub fn rng_for(seed: u64, trial: u64, stream_id: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix(seed) ^ splitmix(trial.wrapping_add(0x5851_f42d_4c95_7f2d));
    state = splitmix(state ^ stream_id.wrapping_mul(0x2545_f491_4f6c_dd1d));
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha20Rng::from_seed(key)
}

fn normal_vec<R: Rng>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

/// `⌊εN⌋`, robust to products like `0.3 * 600` landing just below an integer.
pub fn outlier_count(epsilon: f64, n: usize) -> usize {
    ((epsilon * n as f64) + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub enum CloudOutlier {
    /// `N(μ + strength · v_min, spread · I)`.
    Directional { strength: f64, spread: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudSpec {
    pub n: usize,
    pub p: usize,
    pub inlier_mean: DVector<f64>,
    pub inlier_cov_diag: Vec<f64>,
    pub epsilon: f64,
    pub outlier: CloudOutlier,
    pub seed: u64,
    pub trial: u64,
}

impl CloudSpec {
    /// The ten-dimensional benchmark: exponentially decaying spectrum with
    /// unit top eigenvalue, directional outliers at strength 8.
    pub fn benchmark(epsilon: f64, seed: u64, trial: u64) -> Self {
        let p = 10;
        let mut mean = DVector::zeros(p);
        mean.as_mut_slice()[..5].copy_from_slice(&[0.5, -0.5, 0.25, 0.0, 0.75]);
        let diag = (0..p).map(|j| (-2.0 * j as f64 / 9.0).exp()).collect();
        Self {
            n: 600,
            p,
            inlier_mean: mean,
            inlier_cov_diag: diag,
            epsilon,
            outlier: CloudOutlier::Directional { strength: 8.0, spread: 0.1 },
            seed,
            trial,
        }
    }

    /// Unit eigenvector of the smallest inlier variance, first nonzero entry positive.
    pub fn v_min(&self) -> DVector<f64> {
        let mut j = 0;
        for (i, &v) in self.inlier_cov_diag.iter().enumerate() {
            if v < self.inlier_cov_diag[j] {
                j = i;
            }
        }
        let mut e = DVector::zeros(self.p);
        e[j] = 1.0;
        e
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 {
            return Err(Error::EmptyInput);
        }
        if self.inlier_mean.len() != self.p || self.inlier_cov_diag.len() != self.p {
            return Err(Error::DimMismatch { expected: self.p, got: self.inlier_cov_diag.len() });
        }
        if !(0.0..=0.45).contains(&self.epsilon) {
            return Err(Error::BadEpsilon(self.epsilon));
        }
        if self.inlier_cov_diag.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidParams("inlier variances must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Labeled cloud with the true inlier mean attached.
pub fn make_cloud(spec: &CloudSpec) -> Result<GradientCloud> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, spec.trial, stream::CLOUD);
    let sd: Vec<f64> = spec.inlier_cov_diag.iter().map(|v| v.sqrt()).collect();
    let mut points = DMatrix::zeros(spec.n, spec.p);
    for i in 0..spec.n {
        for j in 0..spec.p {
            let z: f64 = StandardNormal.sample(&mut rng);
            points[(i, j)] = spec.inlier_mean[j] + sd[j] * z;
        }
    }
    let n_out = outlier_count(spec.epsilon, spec.n);
    let mut labels = vec![false; spec.n];
    let idx = sample(&mut rng, spec.n, n_out).into_vec();
    let CloudOutlier::Directional { strength, spread } = spec.outlier;
    let center = &spec.inlier_mean + spec.v_min() * strength;
    for &i in &idx {
        labels[i] = true;
        let row = &center + normal_vec(&mut rng, spec.p) * spread.sqrt();
        points.set_row(i, &row.transpose());
    }
    GradientCloud::new(points)?.with_labels(labels)?.with_truth_mean(spec.inlier_mean.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Contamination {
    None,
    /// Replacement points from `N(0, std² I)`.
    GaussianReplacement { std: f64 },
    /// `U([low, high]^d) + N(0, jitter · I)`.
    UniformBox { low: f64, high: f64, jitter: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub d: usize,
    pub k: usize,
    pub n: usize,
    pub rank: usize,
    pub orders: usize,
    pub center_radius: f64,
    pub singular_range: (f64, f64),
    /// Isotropic noise variance; `None` draws noise-free observations.
    pub noise: Option<f64>,
    pub contamination: Contamination,
    pub epsilon: f64,
    pub seed: u64,
    pub trial: u64,
}

impl MixtureSpec {
    pub fn benchmark(seed: u64, trial: u64) -> Self {
        Self {
            d: 5,
            k: 2,
            n: 1000,
            rank: 2,
            orders: 4,
            center_radius: 5.0,
            singular_range: (1.0, 2.0),
            noise: Some(0.1),
            contamination: Contamination::GaussianReplacement { std: 4.0 },
            epsilon: 0.1,
            seed,
            trial,
        }
    }

    pub fn noise_cov(&self) -> DMatrix<f64> {
        DMatrix::identity(self.d, self.d) * self.noise.unwrap_or(0.0)
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.n == 0 || self.rank == 0 || self.rank > self.d {
            return Err(Error::Config("mixture dimensions must be positive with rank ≤ d".into()));
        }
        if !(0.0..=0.45).contains(&self.epsilon) {
            return Err(Error::BadEpsilon(self.epsilon));
        }
        let (lo, hi) = self.singular_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config("singular range must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MixtureData {
    /// One observation per row.
    pub observations: DMatrix<f64>,
    pub truth: MixtureParams,
    pub components: Vec<usize>,
    pub outliers: Vec<bool>,
}

impl MixtureData {
    pub fn outlier_indices(&self) -> Vec<usize> {
        self.outliers.iter().enumerate().filter(|(_, &o)| o).map(|(i, _)| i).collect()
    }

    /// Columns `y1..yd,component,outlier`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let d = self.observations.ncols();
        let head: Vec<String> = (1..=d).map(|j| format!("y{j}")).collect();
        writeln!(out, "{},component,outlier", head.join(","))?;
        for (i, row) in self.observations.row_iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{},{},{}", vals.join(","), self.components[i], self.outliers[i] as u8)?;
        }
        Ok(())
    }
}

/// `Q R` of a Gaussian matrix with the sign of `R`'s diagonal folded into `Q`.
pub fn random_orthonormal<R: Rng>(rng: &mut R, d: usize, r: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, r, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let rr = qr.r();
    for c in 0..r {
        if rr[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

pub fn random_sphere<R: Rng>(rng: &mut R, d: usize, radius: f64) -> DVector<f64> {
    loop {
        let g = normal_vec(rng, d);
        let norm = g.norm();
        if norm > 1e-12 {
            return g * (radius / norm);
        }
    }
}

/// Draws truth parameters, samples, noise and contamination from separate streams.
pub fn make_mixture_data(spec: &MixtureSpec) -> Result<MixtureData> {
    spec.validate()?;
    let mut prng = rng_for(spec.seed, spec.trial, stream::MIXTURE_PARAMS);
    let (lo, hi) = spec.singular_range;
    let mut mu = Vec::with_capacity(spec.k);
    let mut v = Vec::with_capacity(spec.k);
    for _ in 0..spec.k {
        mu.push(random_sphere(&mut prng, spec.d, spec.center_radius));
        let u = random_orthonormal(&mut prng, spec.d, spec.rank);
        let s: Vec<f64> = (0..spec.rank)
            .map(|_| if hi > lo { prng.random_range(lo..hi) } else { lo })
            .collect();
        let scale = DMatrix::from_diagonal(&DVector::from_iterator(spec.rank, s.iter().map(|x| x.sqrt())));
        v.push(u * scale);
    }
    let pi = vec![1.0 / spec.k as f64; spec.k];
    let truth = MixtureParams::new(pi, mu, v, spec.noise_cov())?;

    let mut srng = rng_for(spec.seed, spec.trial, stream::MIXTURE_SAMPLES);
    let pick = Uniform::new(0, spec.k).map_err(|e| Error::Config(e.to_string()))?;
    let noise_sd = spec.noise.map(f64::sqrt);
    let mut obs = DMatrix::zeros(spec.n, spec.d);
    let mut components = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let h = pick.sample(&mut srng);
        components.push(h);
        let mut y = &truth.mu[h] + &truth.v[h] * normal_vec(&mut srng, spec.rank);
        if let Some(sd) = noise_sd {
            y += normal_vec(&mut srng, spec.d) * sd;
        }
        obs.set_row(i, &y.transpose());
    }

    let mut crng = rng_for(spec.seed, spec.trial, stream::CONTAMINATION);
    let n_out = match spec.contamination {
        Contamination::None => 0,
        _ => outlier_count(spec.epsilon, spec.n),
    };
    let mut outliers = vec![false; spec.n];
    let idx = sample(&mut crng, spec.n, n_out).into_vec();
    for &i in &idx {
        outliers[i] = true;
        let a = match spec.contamination {
            Contamination::None => unreachable!(),
            Contamination::GaussianReplacement { std } => normal_vec(&mut crng, spec.d) * std,
            Contamination::UniformBox { low, high, jitter } => {
                let base = DVector::from_fn(spec.d, |_, _| crng.random_range(low..high));
                base + normal_vec(&mut crng, spec.d) * jitter.sqrt()
            }
        };
        obs.set_row(i, &a.transpose());
    }
    Ok(MixtureData { observations: obs, truth, components, outliers })
}
