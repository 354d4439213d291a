//! Finite-dimensional truncation of the state space K and control space O.
//!
//! Vectors are plain `nalgebra` column vectors; bounded operators (including
//! Hilbert–Schmidt ones, which coincide with all matrices after truncation)
//! are dense matrices. Covariance operators carry their own validated
//! newtype because the square root is only defined for symmetric PSD input.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Coordinates of a point of K (states, costates, directions).
pub type StateVec = DVector<f64>;
/// Coordinates of a point of O (controls).
pub type ControlVec = DVector<f64>;
/// Bounded linear map between truncated spaces.
pub type Operator = DMatrix<f64>;

/// Relative asymmetry accepted for a covariance operator.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Negative eigenvalues down to `-NEG_EIGEN_TOL * max_eigenvalue` are clamped to zero.
pub const NEG_EIGEN_TOL: f64 = 1e-10;

/// Truncation dimensions of K and O.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpaceConfig {
    pub state_dim: usize,
    pub control_dim: usize,
}

impl SpaceConfig {
    pub fn new(state_dim: usize, control_dim: usize) -> Result<Self> {
        if state_dim == 0 || control_dim == 0 {
            return Err(Error::InvalidSpace(format!(
                "dimensions must be positive (state_dim = {state_dim}, control_dim = {control_dim})"
            )));
        }
        Ok(Self {
            state_dim,
            control_dim,
        })
    }
}

/// Tolerances used when validating a covariance operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceTolerance {
    pub symmetry: f64,
    pub negative_eigen: f64,
}

impl Default for CovarianceTolerance {
    fn default() -> Self {
        Self {
            symmetry: SYMMETRY_TOL,
            negative_eigen: NEG_EIGEN_TOL,
        }
    }
}

/// Symmetric positive semidefinite operator, e.g. the covariance rate Q(t).
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceOperator {
    entries: Operator,
}

impl CovarianceOperator {
    pub fn new(entries: Operator) -> Result<Self> {
        Self::with_tolerance(entries, CovarianceTolerance::default())
    }

    pub fn with_tolerance(entries: Operator, tol: CovarianceTolerance) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::DimensionMismatch {
                context: "covariance operator (columns)",
                expected: entries.nrows(),
                actual: entries.ncols(),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance operator"));
        }
        let scale = entries.norm();
        let asymmetry = (&entries - entries.transpose()).norm();
        if asymmetry > tol.symmetry * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::NotSymmetric {
                asymmetry: asymmetry / scale,
            });
        }
        let eig = entries.clone().symmetric_eigen();
        let max = eig.eigenvalues.max().max(0.0);
        let min = eig.eigenvalues.min();
        if min < -tol.negative_eigen * max || (max == 0.0 && min < 0.0) {
            return Err(Error::NegativeEigenvalue {
                eigenvalue: min,
                max_eigenvalue: max,
            });
        }
        Ok(Self { entries })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            entries: Operator::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn as_operator(&self) -> &Operator {
        &self.entries
    }

    pub fn into_operator(self) -> Operator {
        self.entries
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        self.entries.clone().symmetric_eigen().eigenvalues.max()
    }
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues at or below
/// roundoff level are clamped to zero.
///
/// Cholesky is not an option: the covariance rates of interest are rank deficient.
pub fn psd_sqrt(c: &CovarianceOperator) -> Operator {
    let eig = c.entries.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    // eigenvalues below the solver's backward error are numerically zero
    let floor = 16.0 * c.dim() as f64 * f64::EPSILON * top;
    let roots = eig
        .eigenvalues
        .map(|l| if l > floor { l.sqrt() } else { 0.0 });
    let v = &eig.eigenvectors;
    let root = v * Operator::from_diagonal(&roots) * v.transpose();
    // symmetrize away roundoff
    (&root + root.transpose()) * 0.5
}

/// Validates `c` under the given tolerances and returns its PSD root.
pub fn psd_sqrt_checked(c: &Operator, tol: CovarianceTolerance) -> Result<Operator> {
    let cov = CovarianceOperator::with_tolerance(c.clone(), tol)?;
    Ok(psd_sqrt(&cov))
}

/// Hilbert–Schmidt (Frobenius) inner product `trace(aᵀ b)`.
pub fn hs_inner(a: &Operator, b: &Operator) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            context: "hs_inner",
            expected: a.nrows() * a.ncols(),
            actual: b.nrows() * b.ncols(),
        });
    }
    Ok(a.dot(b))
}

/// Outer product `u ⊗ w`, the operator `k ↦ ⟨w, k⟩ u`.
pub fn tensor(u: &StateVec, w: &StateVec) -> Result<Operator> {
    if u.len() != w.len() {
        return Err(Error::DimensionMismatch {
            context: "tensor",
            expected: u.len(),
            actual: w.len(),
        });
    }
    Ok(u * w.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_psd(seed: u64, n: usize, rank: usize) -> Operator {
        // small LCG keeps the oracle independent of the crate's RNG plumbing
        let mut state = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let b = Operator::from_fn(n, rank, |_, _| next());
        &b * b.transpose()
    }

    #[test]
    fn space_config_rejects_zero() {
        assert!(SpaceConfig::new(0, 1).is_err());
        assert!(SpaceConfig::new(1, 0).is_err());
        assert!(SpaceConfig::new(4, 2).is_ok());
    }

    #[test]
    fn sqrt_of_identity_is_identity() {
        let c = CovarianceOperator::new(Operator::identity(4, 4)).unwrap();
        let s = psd_sqrt(&c);
        assert!((s - Operator::identity(4, 4)).norm() < 1e-14);
    }

    #[test]
    fn sqrt_of_rank_one_matches_closed_form() {
        let beta = StateVec::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let alpha = 1.7;
        let c = CovarianceOperator::new(tensor(&beta, &beta).unwrap() * alpha).unwrap();
        let s = psd_sqrt(&c);
        let k = StateVec::from_vec(vec![0.3, 0.1, -1.0, 2.0]);
        let expected = &beta * (beta.dot(&k) / beta.norm() * alpha.sqrt());
        let err = (&s * &k - &expected).norm();
        assert!(err < 1e-12 * expected.norm().max(1.0), "{err}");
    }

    #[test]
    fn sqrt_of_random_psd_squares_back() {
        for seed in 0..10 {
            let c = random_psd(seed, 5, 5);
            let cov = CovarianceOperator::new(c.clone()).unwrap();
            let s = psd_sqrt(&cov);
            let err = (&s * &s - &c).norm() / c.norm();
            assert!(err < 1e-10, "seed {seed}: {err}");
            assert!((&s - s.transpose()).norm() < 1e-14);
        }
    }

    #[test]
    fn rejects_non_symmetric_and_indefinite() {
        let mut m = Operator::identity(3, 3);
        m[(0, 1)] = 0.5;
        assert!(matches!(
            CovarianceOperator::new(m),
            Err(Error::NotSymmetric { .. })
        ));
        let d = Operator::from_diagonal(&StateVec::from_vec(vec![1.0, -0.1, 0.0]));
        assert!(matches!(
            CovarianceOperator::new(d),
            Err(Error::NegativeEigenvalue { .. })
        ));
    }

    #[test]
    fn tiny_negative_eigenvalues_are_clamped() {
        let d = Operator::from_diagonal(&StateVec::from_vec(vec![1.0, -1e-13, 0.0]));
        let c = CovarianceOperator::new(d).unwrap();
        let s = psd_sqrt(&c);
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(s[(1, 1)], 0.0);
    }

    #[test]
    fn per_call_tolerance_override() {
        let d = Operator::from_diagonal(&StateVec::from_vec(vec![1.0, -1e-6]));
        assert!(psd_sqrt_checked(&d, CovarianceTolerance::default()).is_err());
        let loose = CovarianceTolerance {
            negative_eigen: 1e-5,
            ..Default::default()
        };
        assert!(psd_sqrt_checked(&d, loose).is_ok());
    }

    #[test]
    fn hs_inner_basics() {
        let i = Operator::identity(5, 5);
        assert_eq!(hs_inner(&i, &i).unwrap(), 5.0);
        assert_eq!(
            hs_inner(&random_psd(3, 5, 2), &Operator::zeros(5, 5)).unwrap(),
            0.0
        );
        assert!(hs_inner(&i, &Operator::zeros(4, 5)).is_err());
        let a = random_psd(1, 4, 3) + Operator::from_fn(4, 4, |i, j| (i * 3 + j) as f64);
        let b = random_psd(2, 4, 4);
        let trace = (a.transpose() * &b).trace();
        assert!((hs_inner(&a, &b).unwrap() - trace).abs() < 1e-12 * trace.abs().max(1.0));
    }

    #[test]
    fn tensor_applies_as_outer_product() {
        let e1 = StateVec::from_vec(vec![1.0, 0.0, 0.0]);
        let t = tensor(&e1, &e1).unwrap();
        let mut expected = Operator::zeros(3, 3);
        expected[(0, 0)] = 1.0;
        assert_eq!(t, expected);

        let beta = StateVec::from_vec(vec![0.5, 1.0, -1.0]);
        let k = StateVec::from_vec(vec![2.0, -1.0, 4.0]);
        let tb = tensor(&beta, &beta).unwrap();
        assert!((&tb * &k - &beta * beta.dot(&k)).norm() < 1e-14);
        assert!(tensor(&beta, &StateVec::zeros(2)).is_err());
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, n)
    }

    proptest! {
        #[test]
        fn tensor_matches_componentwise(u in vec_strategy(4), w in vec_strategy(4), k in vec_strategy(4)) {
            let (u, w, k) = (StateVec::from_vec(u), StateVec::from_vec(w), StateVec::from_vec(k));
            let t = tensor(&u, &w).unwrap();
            let applied = &t * &k;
            let inner: f64 = (0..4).map(|i| w[i] * k[i]).sum();
            for i in 0..4 {
                prop_assert!((applied[i] - inner * u[i]).abs() < 1e-14 * (1.0 + inner.abs() * u[i].abs()) * 10.0);
            }
            let sv = t.singular_values();
            let mut sorted: Vec<f64> = sv.iter().copied().collect();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assert!(sorted[1] < 1e-12 * u.norm() * w.norm() + 1e-300);
        }

        #[test]
        fn sqrt_spectrum_is_sqrt_of_spectrum(seed in 0u64..1000, rank in 1usize..6) {
            let c = random_psd(seed, 5, rank);
            let s = psd_sqrt(&CovarianceOperator::new(c.clone()).unwrap());
            // compare in squared form: sqrt amplifies roundoff around zero eigenvalues
            let mut in_eigs: Vec<f64> = c.symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut out_eigs: Vec<f64> = s.symmetric_eigen().eigenvalues.iter().copied().collect();
            in_eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out_eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let top = *in_eigs.last().unwrap();
            for (a, b) in in_eigs.iter().zip(&out_eigs) {
                prop_assert!(*b > -1e-12 * (1.0 + top.sqrt()));
                prop_assert!((a - b * b.abs()).abs() < 1e-9 * (1.0 + top));
            }
        }

        #[test]
        fn hs_norm_is_positive_definite(entries in vec_strategy(9)) {
            let a = Operator::from_vec(3, 3, entries);
            let n = hs_inner(&a, &a).unwrap();
            prop_assert!(n >= 0.0);
            if a.iter().all(|v| *v == 0.0) {
                prop_assert!(n.abs() < 1e-14);
            } else {
                prop_assert!(n > 0.0);
            }
            let z = Operator::zeros(3, 3);
            prop_assert_eq!(hs_inner(&z, &z).unwrap(), 0.0);
        }
    }
}
