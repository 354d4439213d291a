//! Packaged control problems: the bilinear-noise problem with linear terminal
//! cost (explicitly solvable adjoint), the linear-quadratic problem, and a
//! wrapper that corrupts supplied derivatives for fault-injection tests.

use std::sync::Arc;

use crate::dynamics::{ControlProblem, ControlSet};
use crate::error::{Error, Result};
use crate::hilbert::{ControlVec, Operator, StateVec};

/// `F(x,u) = F̃u + κ tanh(x)`, `G(x) = ⟨x,β⟩G̃`, `ℓ = w|u|²`, `h = ⟨c,x⟩`.
///
/// With `κ = 0` and `w = 1` the optimal control is `u* = −½F̃*c`
/// and the adjoint is `Y ≡ c`, `Z ≡ 0`.
#[derive(Debug, Clone)]
pub struct BilinearProblem {
    pub beta: StateVec,
    pub c: StateVec,
    /// `state_dim × control_dim`.
    pub f_tilde: Operator,
    pub g_tilde: Operator,
    /// Weight `w` of `|u|²`; negative values make the running cost concave.
    pub control_weight: f64,
    /// Amplitude `κ` of the bounded nonlinearity in the drift.
    pub nonlinearity: f64,
    pub set: ControlSet,
}

impl BilinearProblem {
    pub fn new(
        beta: StateVec,
        c: StateVec,
        f_tilde: Operator,
        g_tilde: Operator,
        set: ControlSet,
    ) -> Result<Self> {
        let n = beta.len();
        if c.len() != n {
            return Err(Error::DimensionMismatch {
                context: "terminal weight c",
                expected: n,
                actual: c.len(),
            });
        }
        if f_tilde.nrows() != n || g_tilde.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                context: "F~ / G~ rows",
                expected: n,
                actual: f_tilde.nrows(),
            });
        }
        if set.dim() != f_tilde.ncols() {
            return Err(Error::DimensionMismatch {
                context: "control set",
                expected: f_tilde.ncols(),
                actual: set.dim(),
            });
        }
        Ok(Self {
            beta,
            c,
            f_tilde,
            g_tilde,
            control_weight: 1.0,
            nonlinearity: 0.0,
            set,
        })
    }

    pub fn with_nonlinearity(mut self, kappa: f64) -> Self {
        self.nonlinearity = kappa;
        self
    }

    pub fn with_control_weight(mut self, w: f64) -> Self {
        self.control_weight = w;
        self
    }

    /// Pointwise minimizer `−½F̃*c` of `u ↦ |u|² + ⟨F̃u, c⟩`.
    pub fn candidate_control(&self) -> ControlVec {
        self.f_tilde.transpose() * &self.c * -0.5
    }

    /// `E[J(u*)] = ⟨c,x₀⟩ − (T/4)|F̃*c|²` for the linear case.
    pub fn optimal_value(&self, x0: &StateVec, horizon: f64) -> f64 {
        self.c.dot(x0) - 0.25 * horizon * (self.f_tilde.transpose() * &self.c).norm_squared()
    }
}

impl ControlProblem for BilinearProblem {
    fn state_dim(&self) -> usize {
        self.beta.len()
    }

    fn control_dim(&self) -> usize {
        self.f_tilde.ncols()
    }

    fn control_set(&self) -> &ControlSet {
        &self.set
    }

    fn drift(&self, _t: f64, x: &StateVec, u: &ControlVec) -> StateVec {
        let mut out = &self.f_tilde * u;
        if self.nonlinearity != 0.0 {
            out += x.map(f64::tanh) * self.nonlinearity;
        }
        out
    }

    fn drift_x(&self, _t: f64, x: &StateVec, _u: &ControlVec) -> Operator {
        if self.nonlinearity == 0.0 {
            return Operator::zeros(x.len(), x.len());
        }
        Operator::from_diagonal(&x.map(|v| self.nonlinearity / v.cosh().powi(2)))
    }

    fn drift_u(&self, _t: f64, _x: &StateVec, _u: &ControlVec) -> Operator {
        self.f_tilde.clone()
    }

    fn diffusion(&self, _t: f64, x: &StateVec) -> Operator {
        &self.g_tilde * x.dot(&self.beta)
    }

    fn diffusion_x(&self, _t: f64, _x: &StateVec, direction: &StateVec) -> Operator {
        &self.g_tilde * direction.dot(&self.beta)
    }

    fn running_cost(&self, _t: f64, _x: &StateVec, u: &ControlVec) -> f64 {
        self.control_weight * u.norm_squared()
    }

    fn running_cost_x(&self, _t: f64, x: &StateVec, _u: &ControlVec) -> StateVec {
        StateVec::zeros(x.len())
    }

    fn running_cost_u(&self, _t: f64, _x: &StateVec, u: &ControlVec) -> ControlVec {
        u * (2.0 * self.control_weight)
    }

    fn terminal_cost(&self, x: &StateVec) -> f64 {
        self.c.dot(x)
    }

    fn terminal_cost_x(&self, _x: &StateVec) -> StateVec {
        self.c.clone()
    }

    fn name(&self) -> &str {
        if self.nonlinearity != 0.0 {
            "bilinear-nonlinear-drift"
        } else {
            "bilinear"
        }
    }
}

/// Linear-quadratic problem with constant coefficients:
/// `F = Ax + Cu + f`, `G = ⟨γ,x⟩G̃ + D`,
/// `ℓ = ½⟨Px,x⟩ + ½⟨R u,u⟩`, `h = ½⟨P₁x,x⟩`.
#[derive(Debug, Clone)]
pub struct LqProblem {
    pub a: Operator,
    pub c: Operator,
    pub f: StateVec,
    pub gamma: StateVec,
    pub g_tilde: Operator,
    pub d: Operator,
    pub p: Operator,
    /// Control weight (positive definite).
    pub r: Operator,
    pub p1: Operator,
    set: ControlSet,
}

impl LqProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: Operator,
        c: Operator,
        f: StateVec,
        gamma: StateVec,
        g_tilde: Operator,
        d: Operator,
        p: Operator,
        r: Operator,
        p1: Operator,
    ) -> Result<Self> {
        let n = a.nrows();
        let m = c.ncols();
        let square = [
            (&a, "A"),
            (&g_tilde, "G~"),
            (&d, "D"),
            (&p, "P"),
            (&p1, "P1"),
        ];
        for (op, name) in square {
            if op.shape() != (n, n) {
                return Err(Error::Precondition(format!("{name} must be {n}x{n}")));
            }
        }
        if c.nrows() != n || f.len() != n || gamma.len() != n || r.shape() != (m, m) {
            return Err(Error::Precondition(
                "inconsistent C, f, gamma or R shapes".into(),
            ));
        }
        for (op, name) in [(&p, "P"), (&p1, "P1"), (&r, "R")] {
            if (op - op.transpose()).amax() > 1e-12 * op.amax().max(1.0) {
                return Err(Error::Precondition(format!("{name} must be symmetric")));
            }
        }
        let r_eigs = r.clone().symmetric_eigen().eigenvalues;
        if r_eigs.min() <= 0.0 {
            return Err(Error::Precondition("R must be positive definite".into()));
        }
        for (op, name) in [(&p, "P"), (&p1, "P1")] {
            if n > 0 && op.clone().symmetric_eigen().eigenvalues.min() < -1e-12 {
                return Err(Error::Precondition(format!("{name} must be non-negative")));
            }
        }
        Ok(Self {
            a,
            c,
            f,
            gamma,
            g_tilde,
            d,
            p,
            r,
            p1,
            set: ControlSet::Unconstrained { dim: m },
        })
    }

    /// `u = −R⁻¹C*y`, the stationarity relation solved for `u`.
    pub fn stationary_control(&self, y: &StateVec) -> ControlVec {
        let rhs = self.c.transpose() * y * -1.0;
        self.r
            .clone()
            .cholesky()
            .expect("R is positive definite")
            .solve(&rhs)
    }

    /// `C*y + R u`.
    pub fn stationarity_residual(&self, y: &StateVec, u: &ControlVec) -> ControlVec {
        self.c.transpose() * y + &self.r * u
    }
}

impl ControlProblem for LqProblem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.c.ncols()
    }

    fn control_set(&self) -> &ControlSet {
        &self.set
    }

    fn drift(&self, _t: f64, x: &StateVec, u: &ControlVec) -> StateVec {
        &self.a * x + &self.c * u + &self.f
    }

    fn drift_x(&self, _t: f64, _x: &StateVec, _u: &ControlVec) -> Operator {
        self.a.clone()
    }

    fn drift_u(&self, _t: f64, _x: &StateVec, _u: &ControlVec) -> Operator {
        self.c.clone()
    }

    fn diffusion(&self, _t: f64, x: &StateVec) -> Operator {
        &self.g_tilde * self.gamma.dot(x) + &self.d
    }

    fn diffusion_x(&self, _t: f64, _x: &StateVec, direction: &StateVec) -> Operator {
        &self.g_tilde * self.gamma.dot(direction)
    }

    fn running_cost(&self, _t: f64, x: &StateVec, u: &ControlVec) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + 0.5 * u.dot(&(&self.r * u))
    }

    fn running_cost_x(&self, _t: f64, x: &StateVec, _u: &ControlVec) -> StateVec {
        &self.p * x
    }

    fn running_cost_u(&self, _t: f64, _x: &StateVec, u: &ControlVec) -> ControlVec {
        &self.r * u
    }

    fn terminal_cost(&self, x: &StateVec) -> f64 {
        0.5 * x.dot(&(&self.p1 * x))
    }

    fn terminal_cost_x(&self, x: &StateVec) -> StateVec {
        &self.p1 * x
    }

    fn name(&self) -> &str {
        "linear-quadratic"
    }
}

/// Derivative to corrupt in a [`FaultyDerivative`] wrapper.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultTarget {
    DriftX,
    DriftU,
    DiffusionX,
    RunningCostX,
    RunningCostU,
    TerminalCostX,
}

/// Delegates to `inner` but adds `offset` to every entry of one derivative.
#[derive(Clone)]
pub struct FaultyDerivative {
    pub inner: Arc<dyn ControlProblem>,
    pub target: FaultTarget,
    pub offset: f64,
}

impl FaultyDerivative {
    fn bump(&self, target: FaultTarget, mut m: Operator) -> Operator {
        if self.target == target {
            m.add_scalar_mut(self.offset);
        }
        m
    }

    fn bump_vec(&self, target: FaultTarget, mut v: StateVec) -> StateVec {
        if self.target == target {
            v.add_scalar_mut(self.offset);
        }
        v
    }
}

impl ControlProblem for FaultyDerivative {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn control_dim(&self) -> usize {
        self.inner.control_dim()
    }
    fn control_set(&self) -> &ControlSet {
        self.inner.control_set()
    }
    fn drift(&self, t: f64, x: &StateVec, u: &ControlVec) -> StateVec {
        self.inner.drift(t, x, u)
    }
    fn drift_x(&self, t: f64, x: &StateVec, u: &ControlVec) -> Operator {
        self.bump(FaultTarget::DriftX, self.inner.drift_x(t, x, u))
    }
    fn drift_u(&self, t: f64, x: &StateVec, u: &ControlVec) -> Operator {
        self.bump(FaultTarget::DriftU, self.inner.drift_u(t, x, u))
    }
    fn diffusion(&self, t: f64, x: &StateVec) -> Operator {
        self.inner.diffusion(t, x)
    }
    fn diffusion_x(&self, t: f64, x: &StateVec, direction: &StateVec) -> Operator {
        self.bump(
            FaultTarget::DiffusionX,
            self.inner.diffusion_x(t, x, direction),
        )
    }
    fn running_cost(&self, t: f64, x: &StateVec, u: &ControlVec) -> f64 {
        self.inner.running_cost(t, x, u)
    }
    fn running_cost_x(&self, t: f64, x: &StateVec, u: &ControlVec) -> StateVec {
        self.bump_vec(
            FaultTarget::RunningCostX,
            self.inner.running_cost_x(t, x, u),
        )
    }
    fn running_cost_u(&self, t: f64, x: &StateVec, u: &ControlVec) -> ControlVec {
        self.bump_vec(
            FaultTarget::RunningCostU,
            self.inner.running_cost_u(t, x, u),
        )
    }
    fn terminal_cost(&self, x: &StateVec) -> f64 {
        self.inner.terminal_cost(x)
    }
    fn terminal_cost_x(&self, x: &StateVec) -> StateVec {
        self.bump_vec(FaultTarget::TerminalCostX, self.inner.terminal_cost_x(x))
    }
    fn name(&self) -> &str {
        "faulty-derivative"
    }
}
