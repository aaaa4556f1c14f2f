//! Dense symmetric-matrix primitives.
//!
//! Everything spectral in the crate goes through [`sym_eigen`], so operator
//! norms, Gibbs states and entropies share one deterministic decomposition.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Smallest eigenvalue tolerated when a spectrum is turned into a density matrix.
const PSD_CLIP: f64 = -1e-12;

/// A real symmetric matrix. Symmetry is enforced on construction by averaging
/// with the transpose, so `m[(i, j)] == m[(j, i)]` holds bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimMismatch { expected: m.nrows(), got: m.ncols() });
        }
        if m.nrows() == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(Self::symmetrized(m))
    }

    /// Symmetrizes a square matrix without validation; callers guarantee the shape.
    pub(crate) fn symmetrized(mut m: DMatrix<f64>) -> Self {
        let p = m.nrows();
        for i in 0..p {
            for j in (i + 1)..p {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self(m)
    }

    pub fn zeros(p: usize) -> Self {
        Self(DMatrix::zeros(p, p))
    }

    pub fn identity(p: usize) -> Self {
        Self(DMatrix::identity(p, p))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    /// `v vᵀ`
    pub fn outer(v: &DVector<f64>) -> Self {
        Self::symmetrized(v * v.transpose())
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn scale(&self, c: f64) -> Self {
        Self(&self.0 * c)
    }

    pub fn add(&self, other: &SymMatrix) -> Result<Self> {
        check_dims(self.dim(), other.dim())?;
        Ok(Self(&self.0 + &other.0))
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// A symmetric positive semidefinite matrix with unit trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(DMatrix<f64>);

impl DensityMatrix {
    /// The maximally mixed state `I / p`.
    pub fn maximally_mixed(p: usize) -> Self {
        Self(DMatrix::identity(p, p) / p as f64)
    }

    /// Builds `Q diag(λ) Qᵀ` after clipping the spectrum at `-1e-12` and
    /// renormalizing it to sum to one.
    pub fn from_spectrum(values: &DVector<f64>, vectors: &DMatrix<f64>) -> Result<Self> {
        let clipped = values.map(|v| v.max(PSD_CLIP).max(0.0));
        let total: f64 = clipped.sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::NonFiniteInput("density spectrum"));
        }
        let scaled = clipped / total;
        let m = vectors * DMatrix::from_diagonal(&scaled) * vectors.transpose();
        Ok(Self(SymMatrix::symmetrized(m).0))
    }

    /// Pure state `v vᵀ / ‖v‖²`.
    pub fn pure(v: &DVector<f64>) -> Result<Self> {
        let n2 = v.norm_squared();
        if !(n2 > 0.0) {
            return Err(Error::EmptyInput);
        }
        Ok(Self(SymMatrix::outer(v).0 / n2))
    }

    /// Accepts a matrix that already satisfies the density-matrix invariants
    /// (symmetric, eigenvalues ≥ -1e-10, trace within 1e-10 of one).
    pub fn try_from_matrix(m: DMatrix<f64>) -> Result<Self> {
        let s = SymMatrix::new(m)?;
        let eig = sym_eigen(&s)?;
        let trace = s.0.trace();
        if (trace - 1.0).abs() > 1e-10 || eig.values.iter().any(|&v| v < -1e-10) {
            return Err(Error::Config("matrix is not a density matrix".into()));
        }
        Ok(Self(s.0))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn as_sym(&self) -> SymMatrix {
        SymMatrix(self.0.clone())
    }
}

/// Eigenvalues sorted in descending order with matching orthonormal columns.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenPair {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.vectors * DMatrix::from_diagonal(&self.values) * self.vectors.transpose()
    }
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimMismatch { expected, got });
    }
    Ok(())
}

/// Full spectral decomposition of a symmetric matrix.
pub fn sym_eigen(a: &SymMatrix) -> Result<EigenPair> {
    if !a.is_finite() {
        return Err(Error::NonFiniteInput("sym_eigen"));
    }
    let eig = SymmetricEigen::new(a.0.clone());
    let p = a.dim();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = DVector::from_iterator(p, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(p, p);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(EigenPair { values, vectors })
}

/// Largest absolute eigenvalue.
pub fn op_norm(a: &SymMatrix) -> Result<f64> {
    let eig = sym_eigen(a)?;
    Ok(spectral_radius(&eig))
}

pub(crate) fn spectral_radius(eig: &EigenPair) -> f64 {
    let n = eig.values.len();
    eig.values[0].abs().max(eig.values[n - 1].abs())
}

/// `Σ_ij a_ij b_ij`
pub fn trace_inner(a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    Ok(a.0.dot(&b.0))
}

/// `exp(η h) / Tr exp(η h)`, evaluated on the spectrum with the largest
/// eigenvalue subtracted first so cumulative gains never overflow.
pub fn gibbs_state(h: &SymMatrix, eta: f64) -> Result<DensityMatrix> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::NonFiniteInput("gibbs_state eta"));
    }
    let eig = sym_eigen(h)?;
    let top = eig.values[0];
    let weights = eig.values.map(|v| (eta * (v - top)).exp());
    DensityMatrix::from_spectrum(&weights, &eig.vectors)
}

/// `-Tr[ρ log ρ]` from the eigenvalues; zero eigenvalues contribute nothing.
pub fn von_neumann_entropy(rho: &DensityMatrix) -> Result<f64> {
    let eig = sym_eigen(&rho.as_sym())?;
    Ok(eig
        .values
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(rng: &mut ChaCha8Rng, p: usize) -> SymMatrix {
        let m = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::new(m).unwrap()
    }

    fn random_density(rng: &mut ChaCha8Rng, p: usize) -> DensityMatrix {
        let rank = rng.random_range(1..=p);
        let g = DMatrix::from_fn(p, rank, |_, _| rng.random_range(-1.0..1.0));
        let m = &g * g.transpose();
        let t = m.trace();
        DensityMatrix(SymMatrix::symmetrized(m / t).0)
    }

    #[test]
    fn construction_enforces_exact_symmetry() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.1 + 0.2, 0.3, 2.0]);
        let s = SymMatrix::new(m).unwrap();
        assert_eq!(s[(0, 1)].to_bits(), s[(1, 0)].to_bits());
        assert!(SymMatrix::new(DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn eigen_of_diagonal() {
        let e = sym_eigen(&SymMatrix::from_diagonal(&[3.0, -5.0])).unwrap();
        assert_eq!(e.values.as_slice(), &[3.0, -5.0]);
        assert!((e.vectors[(0, 0)].abs() - 1.0).abs() < 1e-15);
        assert!((e.vectors[(1, 1)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eigen_of_all_ones() {
        let e = sym_eigen(&SymMatrix::new(DMatrix::from_element(2, 2, 1.0)).unwrap()).unwrap();
        assert!((e.values[0] - 2.0).abs() < 1e-14);
        assert!(e.values[1].abs() < 1e-14);
    }

    #[test]
    fn eigen_reconstruction_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_sym(&mut rng, 8);
            let e = sym_eigen(&a).unwrap();
            let resid = (e.reconstruct() - a.as_matrix()).norm();
            assert!(resid <= 1e-8 * (1.0 + a.as_matrix().norm()));
            let gram = e.vectors.transpose() * &e.vectors;
            assert!((gram - DMatrix::<f64>::identity(8, 8)).amax() < 1e-10);
            assert!(e.values.as_slice().windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn eigen_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_sym(&mut rng, 6);
        let e1 = sym_eigen(&a).unwrap();
        let e2 = sym_eigen(&a.clone()).unwrap();
        assert_eq!(e1.values, e2.values);
        assert_eq!(e1.vectors, e2.vectors);
    }

    #[test]
    fn eigen_rejects_non_finite() {
        let a = SymMatrix::from_diagonal(&[1.0, f64::NAN]);
        assert_eq!(sym_eigen(&a).unwrap_err(), Error::NonFiniteInput("sym_eigen"));
        assert!(op_norm(&SymMatrix::from_diagonal(&[f64::INFINITY])).is_err());
    }

    #[test]
    fn op_norm_examples() {
        assert_eq!(op_norm(&SymMatrix::from_diagonal(&[3.0, -5.0])).unwrap(), 5.0);
        assert_eq!(op_norm(&SymMatrix::zeros(3)).unwrap(), 0.0);
        let v = DVector::from_vec(vec![1.0, 2.0]);
        assert!((op_norm(&SymMatrix::outer(&v)).unwrap() - 5.0).abs() < 1e-14);
    }

    #[test]
    fn op_norm_matches_extreme_eigenvalues_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let a = random_sym(&mut rng, 5);
            let e = sym_eigen(&a).unwrap();
            let expected = e.values[0].abs().max(e.values[4].abs());
            assert_eq!(op_norm(&a).unwrap().to_bits(), expected.to_bits());
        }
    }

    #[test]
    fn trace_inner_examples() {
        assert_eq!(trace_inner(&SymMatrix::identity(3), &SymMatrix::identity(3)).unwrap(), 3.0);
        let a = SymMatrix::from_diagonal(&[1.0, 2.0]);
        let b = SymMatrix::from_diagonal(&[3.0, 4.0]);
        assert_eq!(trace_inner(&a, &b).unwrap(), 11.0);
        assert!(matches!(
            trace_inner(&a, &SymMatrix::identity(3)),
            Err(Error::DimMismatch { .. })
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_sym(&mut rng, 4);
        let v = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)).normalize();
        let rho = DensityMatrix::pure(&v).unwrap();
        let quad = (v.transpose() * a.as_matrix() * &v)[(0, 0)];
        assert!((trace_inner(&a, &rho.as_sym()).unwrap() - quad).abs() < 1e-12);
    }

    #[test]
    fn gibbs_examples() {
        let rho = gibbs_state(&SymMatrix::zeros(3), 2.5).unwrap();
        assert!((rho.as_matrix() - DMatrix::<f64>::identity(3, 3) / 3.0).amax() < 1e-15);

        let rho = gibbs_state(&SymMatrix::from_diagonal(&[4f64.ln(), 0.0]), 1.0).unwrap();
        assert!((rho.as_matrix()[(0, 0)] - 0.8).abs() < 1e-14);
        assert!((rho.as_matrix()[(1, 1)] - 0.2).abs() < 1e-14);

        let rho = gibbs_state(&SymMatrix::from_diagonal(&[1.0, 0.0]), 100.0).unwrap();
        assert!((rho.as_matrix()[(0, 0)] - 1.0).abs() < 1e-12);
        let tail = rho.as_matrix()[(1, 1)];
        assert!((tail / (-100f64).exp() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gibbs_survives_huge_gains() {
        let rho = gibbs_state(&SymMatrix::from_diagonal(&[1e6, 1e6 - 1.0, 0.0]), 1.0).unwrap();
        assert!(rho.as_matrix().iter().all(|x| x.is_finite()));
        assert!((rho.as_matrix().trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gibbs_outputs_are_density_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let p = rng.random_range(1..=7);
            let h = random_sym(&mut rng, p).scale(rng.random_range(0.1..50.0));
            let rho = gibbs_state(&h, rng.random_range(0.01..5.0)).unwrap();
            assert!((rho.as_matrix().trace() - 1.0).abs() <= 1e-10);
            let e = sym_eigen(&rho.as_sym()).unwrap();
            assert!(e.values[p - 1] >= -1e-12);
        }
    }

    #[test]
    fn gibbs_maximizes_entropy_regularized_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let p = rng.random_range(1..=6);
            let h = random_sym(&mut rng, p);
            let eta = rng.random_range(0.1..3.0);
            let star = gibbs_state(&h, eta).unwrap();
            let value = |rho: &DensityMatrix| {
                eta * trace_inner(&h, &rho.as_sym()).unwrap() + von_neumann_entropy(rho).unwrap()
            };
            let best = value(&star);
            for _ in 0..100 {
                let rho = random_density(&mut rng, p);
                assert!(best >= value(&rho) - 1e-8);
            }
        }
    }

    #[test]
    fn entropy_of_maximally_mixed_is_log_p() {
        let rho = DensityMatrix::maximally_mixed(4);
        assert!((von_neumann_entropy(&rho).unwrap() - 4f64.ln()).abs() < 1e-12);
    }
}
