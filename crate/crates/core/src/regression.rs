//! Least-squares projection onto polynomial features of the state, the
//! conditional-expectation estimator behind the backward adjoint solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hilbert::StateVec;

/// Largest admissible condition number of the regression Gram matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// Polynomial features of the state up to a total degree, constant included.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegressionBasis {
    pub degree: usize,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self { degree: 2 }
    }
}

impl RegressionBasis {
    pub fn new(degree: usize) -> Self {
        Self { degree }
    }

    /// Number of monomials of total degree ≤ `degree` in `vars` variables.
    pub fn feature_count(&self, vars: usize) -> usize {
        exponents(vars, self.degree).len()
    }
}

fn exponents(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; vars]];
    let mut frontier = out.clone();
    for _ in 0..degree {
        let mut next = Vec::new();
        for e in &frontier {
            // only raise variables at or after the last raised one, so each
            // monomial is generated once
            let last = e.iter().rposition(|&v| v > 0).unwrap_or(0);
            for i in last..vars {
                let mut f = e.clone();
                f[i] += 1;
                next.push(f);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Fitted conditional expectation `x ↦ coefᵀ φ(x)` on one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFit {
    mean: DVector<f64>,
    /// Whitening map onto the non-degenerate directions of the cross-section.
    whiten: DMatrix<f64>,
    exponents: Vec<Vec<u32>>,
    /// `features × outputs`.
    coef: DMatrix<f64>,
}

impl StepFit {
    pub fn eval(&self, x: &StateVec) -> DVector<f64> {
        let phi = features(&self.mean, &self.whiten, &self.exponents, x.as_slice());
        self.coef.transpose() * phi
    }

    pub fn outputs(&self) -> usize {
        self.coef.ncols()
    }
}

fn features(
    mean: &DVector<f64>,
    whiten: &DMatrix<f64>,
    exps: &[Vec<u32>],
    x: &[f64],
) -> DVector<f64> {
    let centered = DVector::from_column_slice(x) - mean;
    let z = whiten * centered;
    DVector::from_iterator(
        exps.len(),
        exps.iter().map(|e| {
            e.iter()
                .zip(z.iter())
                .map(|(&p, v)| v.powi(p as i32))
                .product::<f64>()
        }),
    )
}

/// Design matrix of one cross-section of states, ready to project targets.
#[derive(Debug, Clone)]
pub struct Projector {
    mean: DVector<f64>,
    whiten: DMatrix<f64>,
    exponents: Vec<Vec<u32>>,
    design: DMatrix<f64>,
    /// Eigendecomposition of the Gram matrix `ΦᵀΦ / n`.
    gram_vectors: DMatrix<f64>,
    gram_values: DVector<f64>,
}

impl Projector {
    /// `states` is `paths × dim`. Directions along which the cross-section has
    /// no spread (for instance at `t = 0`) carry no information and are dropped.
    pub fn new(states: &DMatrix<f64>, basis: RegressionBasis, step: usize) -> Result<Self> {
        let (paths, dim) = states.shape();
        let mean = DVector::from_iterator(dim, states.column_iter().map(|c| c.mean()));
        let centered = states - DMatrix::from_fn(paths, dim, |_, j| mean[j]);
        let cov = centered.transpose() * &centered / paths as f64;
        let eig = cov.symmetric_eigen();
        let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let scale = 1.0 + mean.norm_squared();
        let kept: Vec<usize> = (0..dim)
            .filter(|&i| {
                let l = eig.eigenvalues[i];
                l > 1e-10 * top && l > 1e-24 * scale
            })
            .collect();
        let whiten = DMatrix::from_fn(kept.len(), dim, |r, j| {
            let i = kept[r];
            eig.eigenvectors[(j, i)] / eig.eigenvalues[i].sqrt()
        });
        let exponents = exponents(kept.len(), basis.degree);
        if exponents.len() * 10 >= paths {
            return Err(Error::Precondition(format!(
                "{} regression features need more than {} paths",
                exponents.len(),
                exponents.len() * 10
            )));
        }
        let mut design = DMatrix::zeros(paths, exponents.len());
        for p in 0..paths {
            let row: Vec<f64> = states.row(p).iter().copied().collect();
            let phi = features(&mean, &whiten, &exponents, &row);
            design.set_row(p, &phi.transpose());
        }
        let gram = design.transpose() * &design / paths as f64;
        let geig = gram.symmetric_eigen();
        let gmax = geig.eigenvalues.max();
        let gmin = geig.eigenvalues.min();
        let condition = if gmin > 0.0 {
            gmax / gmin
        } else {
            f64::INFINITY
        };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::RankDeficient { step, condition });
        }
        Ok(Self {
            mean,
            whiten,
            exponents,
            design,
            gram_vectors: geig.eigenvectors,
            gram_values: geig.eigenvalues,
        })
    }

    pub fn feature_count(&self) -> usize {
        self.exponents.len()
    }

    /// Least-squares coefficients for `targets` (`paths × outputs`).
    pub fn coefficients(&self, targets: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.design.nrows() as f64;
        let rhs = self.design.transpose() * targets / n;
        let inv = DMatrix::from_diagonal(&self.gram_values.map(|l| 1.0 / l));
        &self.gram_vectors * inv * self.gram_vectors.transpose() * rhs
    }

    /// Projection of `targets` onto the span of the features, per path.
    pub fn project(&self, targets: &DMatrix<f64>) -> DMatrix<f64> {
        &self.design * self.coefficients(targets)
    }

    pub fn fit(&self, targets: &DMatrix<f64>) -> StepFit {
        StepFit {
            mean: self.mean.clone(),
            whiten: self.whiten.clone(),
            exponents: self.exponents.clone(),
            coef: self.coefficients(targets),
        }
    }
}
