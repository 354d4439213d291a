//! Controlled forward SDE `dX = F(X,u) dt + G(X) dM`, spike variations,
//! the first-order variational process `p`, the running-cost sensitivity `ζ`,
//! and cost evaluation.
//!
//! Integration is explicit Euler–Maruyama with left-point evaluation, which is
//! the discrete counterpart of the Itô integral against a predictable integrand.
//! Every path is integrated independently and reductions run in path order.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::DVectorView;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hilbert::{ControlVec, Operator, StateVec};
use crate::martingale::{NoiseBundle, PathGrid};
use crate::stats::Estimate;

/// Coefficients `(F, G, ℓ, h)` of a control problem and their derivatives.
///
/// `G(t, x)` maps `K → K` and acts on `dM`. Its derivative is supplied
/// directionally: `diffusion_x(t, x, d)` is `G_x(x)[d]`.
pub trait ControlProblem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn control_set(&self) -> &ControlSet;

    fn drift(&self, t: f64, x: &StateVec, u: &ControlVec) -> StateVec;
    fn drift_x(&self, t: f64, x: &StateVec, u: &ControlVec) -> Operator;
    /// `state_dim × control_dim`.
    fn drift_u(&self, t: f64, x: &StateVec, u: &ControlVec) -> Operator;
    fn diffusion(&self, t: f64, x: &StateVec) -> Operator;
    fn diffusion_x(&self, t: f64, x: &StateVec, direction: &StateVec) -> Operator;

    fn running_cost(&self, t: f64, x: &StateVec, u: &ControlVec) -> f64;
    fn running_cost_x(&self, t: f64, x: &StateVec, u: &ControlVec) -> StateVec;
    fn running_cost_u(&self, t: f64, x: &StateVec, u: &ControlVec) -> ControlVec;
    fn terminal_cost(&self, x: &StateVec) -> f64;
    fn terminal_cost_x(&self, x: &StateVec) -> StateVec;

    fn name(&self) -> &str {
        "problem"
    }
}

/// Admissible control set `U`.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlSet {
    /// The whole control space.
    Unconstrained {
        dim: usize,
    },
    Box {
        lower: ControlVec,
        upper: ControlVec,
    },
    Ball {
        center: ControlVec,
        radius: f64,
    },
    Finite(Vec<ControlVec>),
}

/// Default lattice density per control dimension.
pub const PROBES_PER_DIM: usize = 11;
/// Cap on the total number of lattice probes.
pub const MAX_PROBES: usize = 10_000;

impl ControlSet {
    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Unconstrained { dim } => *dim,
            ControlSet::Box { lower, .. } => lower.len(),
            ControlSet::Ball { center, .. } => center.len(),
            ControlSet::Finite(points) => points.first().map_or(0, |p| p.len()),
        }
    }

    pub fn is_convex(&self) -> bool {
        !matches!(self, ControlSet::Finite(_))
    }

    pub fn contains(&self, u: &ControlVec) -> bool {
        const TOL: f64 = 1e-12;
        if u.len() != self.dim() || u.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self {
            ControlSet::Unconstrained { .. } => true,
            ControlSet::Box { lower, upper } => u
                .iter()
                .zip(lower.iter().zip(upper.iter()))
                .all(|(v, (lo, hi))| *v >= lo - TOL && *v <= hi + TOL),
            ControlSet::Ball { center, radius } => (u - center).norm() <= radius + TOL,
            ControlSet::Finite(points) => points.iter().any(|p| (p - u).amax() <= TOL),
        }
    }

    /// Uniform lattice covering the set. Density is reduced when
    /// `points_per_dim^dim` would exceed `cap`.
    pub fn probe_grid(&self, points_per_dim: usize, cap: usize) -> Result<Vec<ControlVec>> {
        let (lower, upper) = match self {
            ControlSet::Unconstrained { .. } => {
                return Err(Error::Precondition(
                    "cannot build a probe lattice over an unbounded control set".into(),
                ))
            }
            ControlSet::Finite(points) => return Ok(points.clone()),
            ControlSet::Box { lower, upper } => (lower.clone(), upper.clone()),
            ControlSet::Ball { center, radius } => {
                (center.map(|c| c - radius), center.map(|c| c + radius))
            }
        };
        let d = lower.len();
        let mut n = points_per_dim.max(1);
        while n > 1 && (n as f64).powi(d as i32) > cap as f64 {
            n -= 1;
        }
        let axis = |i: usize, j: usize| {
            if n == 1 {
                0.5 * (lower[i] + upper[i])
            } else {
                lower[i] + (upper[i] - lower[i]) * j as f64 / (n - 1) as f64
            }
        };
        let total = n.pow(d as u32);
        let points = (0..total)
            .map(|idx| {
                let mut rem = idx;
                ControlVec::from_iterator(
                    d,
                    (0..d).map(|i| {
                        let j = rem % n;
                        rem /= n;
                        axis(i, j)
                    }),
                )
            })
            .filter(|p| self.contains(p))
            .collect();
        Ok(points)
    }
}

type FeedbackFn = dyn Fn(usize, f64, &StateVec) -> ControlVec + Send + Sync;

/// Open-loop schedule or state feedback, evaluated at grid steps.
#[derive(Clone)]
pub enum ControlPolicy {
    /// One control per step `k = 0..steps`, applied on `[t_k, t_{k+1})`.
    OpenLoop(Vec<ControlVec>),
    /// `(step, t, x) ↦ u`.
    Feedback(Arc<FeedbackFn>),
    /// `value` on the steps of `window`, `base` elsewhere.
    Spiked {
        base: Arc<ControlPolicy>,
        window: Range<usize>,
        value: ControlVec,
    },
}

impl fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlPolicy::OpenLoop(s) => f.debug_tuple("OpenLoop").field(&s.len()).finish(),
            ControlPolicy::Feedback(_) => f.write_str("Feedback(..)"),
            ControlPolicy::Spiked {
                base,
                window,
                value,
            } => f
                .debug_struct("Spiked")
                .field("base", base)
                .field("window", window)
                .field("value", value)
                .finish(),
        }
    }
}

impl ControlPolicy {
    pub fn constant(u: ControlVec, steps: usize) -> Self {
        ControlPolicy::OpenLoop(vec![u; steps])
    }

    pub fn feedback(
        f: impl Fn(usize, f64, &StateVec) -> ControlVec + Send + Sync + 'static,
    ) -> Self {
        ControlPolicy::Feedback(Arc::new(f))
    }

    pub fn control(&self, step: usize, t: f64, x: &StateVec) -> ControlVec {
        match self {
            ControlPolicy::OpenLoop(schedule) => schedule[step].clone(),
            ControlPolicy::Feedback(f) => f(step, t, x),
            ControlPolicy::Spiked {
                base,
                window,
                value,
            } => {
                if window.contains(&step) {
                    value.clone()
                } else {
                    base.control(step, t, x)
                }
            }
        }
    }

    /// Structural checks that do not need a state: schedule length and
    /// membership of open-loop values in `set`.
    pub fn validate(&self, grid: &PathGrid, set: &ControlSet) -> Result<()> {
        match self {
            ControlPolicy::OpenLoop(schedule) => {
                if schedule.len() != grid.steps() {
                    return Err(Error::InvalidPolicy(format!(
                        "schedule has {} entries for {} steps",
                        schedule.len(),
                        grid.steps()
                    )));
                }
                if let Some(k) = schedule.iter().position(|u| !set.contains(u)) {
                    return Err(Error::InvalidPolicy(format!(
                        "control at step {k} lies outside the control set"
                    )));
                }
                Ok(())
            }
            ControlPolicy::Feedback(_) => Ok(()),
            ControlPolicy::Spiked {
                base,
                window,
                value,
            } => {
                if !set.contains(value) {
                    return Err(Error::InvalidPolicy(
                        "spike value outside the control set".into(),
                    ));
                }
                if window.end > grid.steps() {
                    return Err(Error::InvalidPolicy(
                        "spike window beyond the horizon".into(),
                    ));
                }
                base.validate(grid, set)
            }
        }
    }
}

/// Spike perturbation: use `v` on `[t0, t0 + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeSpec {
    pub t0: f64,
    pub eps: f64,
    pub v: ControlVec,
}

impl SpikeSpec {
    pub fn new(t0: f64, eps: f64, v: ControlVec) -> Self {
        Self { t0, eps, v }
    }

    /// Grid steps covered by the spike.
    pub fn window(&self, grid: &PathGrid) -> Result<Range<usize>> {
        if !(self.eps > 0.0) {
            return Err(Error::InvalidSpike(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        let start = grid
            .index_of(self.t0)
            .ok_or_else(|| Error::InvalidSpike(format!("t0 = {} is not a grid time", self.t0)))?;
        let width = self.eps / grid.dt();
        let n = width.round();
        if (width - n).abs() > 1e-9 {
            return Err(Error::InvalidSpike(format!(
                "eps = {} is not a multiple of dt = {}",
                self.eps,
                grid.dt()
            )));
        }
        if n < 1.0 {
            return Err(Error::InvalidSpike("spike spans zero steps".into()));
        }
        let end = start + n as usize;
        if end > grid.steps() {
            return Err(Error::InvalidSpike(format!(
                "window [{}, {}] exceeds the horizon {}",
                self.t0,
                self.t0 + self.eps,
                grid.horizon()
            )));
        }
        Ok(start..end)
    }
}

/// Replaces the policy by `spec.v` on the spike window.
pub fn apply_spike(
    policy: &ControlPolicy,
    spec: &SpikeSpec,
    grid: &PathGrid,
) -> Result<ControlPolicy> {
    let window = spec.window(grid)?;
    Ok(match policy {
        ControlPolicy::OpenLoop(schedule) => {
            let mut s = schedule.clone();
            for u in &mut s[window] {
                *u = spec.v.clone();
            }
            ControlPolicy::OpenLoop(s)
        }
        other => ControlPolicy::Spiked {
            base: Arc::new(other.clone()),
            window,
            value: spec.v.clone(),
        },
    })
}

/// States and applied controls on every path.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    grid: PathGrid,
    dim: usize,
    control_dim: usize,
    paths: usize,
    states: Vec<f64>,
    controls: Vec<f64>,
    noise_fingerprint: u64,
}

impl TrajectoryBundle {
    pub fn grid(&self) -> &PathGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn noise_fingerprint(&self) -> u64 {
        self.noise_fingerprint
    }

    pub fn state(&self, path: usize, k: usize) -> DVectorView<'_, f64> {
        let off = (path * (self.grid.steps() + 1) + k) * self.dim;
        DVectorView::from_slice(&self.states[off..off + self.dim], self.dim)
    }

    /// Control applied on `[t_k, t_{k+1})`.
    pub fn control(&self, path: usize, k: usize) -> DVectorView<'_, f64> {
        let off = (path * self.grid.steps() + k) * self.control_dim;
        DVectorView::from_slice(
            &self.controls[off..off + self.control_dim],
            self.control_dim,
        )
    }

    /// `(steps + 1) × dim` row-major states of one path.
    pub fn path_states(&self, path: usize) -> &[f64] {
        let len = (self.grid.steps() + 1) * self.dim;
        &self.states[path * len..(path + 1) * len]
    }

    pub fn path_controls(&self, path: usize) -> &[f64] {
        let len = self.grid.steps() * self.control_dim;
        &self.controls[path * len..(path + 1) * len]
    }

    /// CSV with columns `path,step,time,x0,..`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,step,time");
        for i in 0..self.dim {
            out.push_str(&format!(",x{i}"));
        }
        out.push('\n');
        for p in 0..self.paths {
            for k in 0..=self.grid.steps() {
                out.push_str(&format!("{p},{k},{}", self.grid.time(k)));
                for v in self.state(p, k).iter() {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// One integrated path: states `(steps+1) × dim` and controls `steps × cdim`.
pub(crate) struct PathRun {
    pub states: Vec<f64>,
    pub controls: Vec<f64>,
}

pub(crate) fn check_bundle(problem: &dyn ControlProblem, bundle: &NoiseBundle) -> Result<()> {
    if bundle.dim() != problem.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "noise bundle vs state",
            expected: problem.state_dim(),
            actual: bundle.dim(),
        });
    }
    Ok(())
}

/// Euler–Maruyama on a single path.
pub(crate) fn integrate_path(
    problem: &dyn ControlProblem,
    policy: &ControlPolicy,
    bundle: &NoiseBundle,
    path: usize,
    x0: &StateVec,
) -> Result<PathRun> {
    let grid = bundle.grid();
    let (n, m, steps) = (problem.state_dim(), problem.control_dim(), grid.steps());
    let dt = grid.dt();
    let set = problem.control_set();
    let mut states = Vec::with_capacity((steps + 1) * n);
    let mut controls = Vec::with_capacity(steps * m);
    let mut x = x0.clone();
    states.extend_from_slice(x.as_slice());
    for k in 0..steps {
        let t = grid.time(k);
        let u = policy.control(k, t, &x);
        if u.len() != m {
            return Err(Error::DimensionMismatch {
                context: "policy output",
                expected: m,
                actual: u.len(),
            });
        }
        if !set.contains(&u) {
            return Err(Error::InvalidPolicy(format!(
                "control outside the control set on path {path} at step {k}"
            )));
        }
        let dm = DVectorView::from_slice(bundle.increment(path, k), n);
        let next = &x + problem.drift(t, &x, &u) * dt + problem.diffusion(t, &x) * dm;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { path, step: k + 1 });
        }
        controls.extend_from_slice(u.as_slice());
        x = next;
        states.extend_from_slice(x.as_slice());
    }
    Ok(PathRun { states, controls })
}

/// Integrates `dX = F(X,u)dt + G(X)dM` on every path of `bundle`.
pub fn integrate_forward(
    problem: &dyn ControlProblem,
    policy: &ControlPolicy,
    bundle: &NoiseBundle,
    x0: &StateVec,
) -> Result<TrajectoryBundle> {
    check_bundle(problem, bundle)?;
    if x0.len() != problem.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: problem.state_dim(),
            actual: x0.len(),
        });
    }
    policy.validate(bundle.grid(), problem.control_set())?;
    let runs: Vec<Result<PathRun>> = (0..bundle.paths())
        .into_par_iter()
        .map(|p| integrate_path(problem, policy, bundle, p, x0))
        .collect();
    let mut states = Vec::with_capacity(bundle.paths() * (bundle.grid().steps() + 1) * x0.len());
    let mut controls =
        Vec::with_capacity(bundle.paths() * bundle.grid().steps() * problem.control_dim());
    for run in runs {
        let run = run?;
        states.extend_from_slice(&run.states);
        controls.extend_from_slice(&run.controls);
    }
    Ok(TrajectoryBundle {
        grid: *bundle.grid(),
        dim: problem.state_dim(),
        control_dim: problem.control_dim(),
        paths: bundle.paths(),
        states,
        controls,
        noise_fingerprint: bundle.fingerprint(),
    })
}

/// Variational process `p` on every path; zero before the spike start.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPaths {
    grid: PathGrid,
    dim: usize,
    paths: usize,
    start: usize,
    values: Vec<f64>,
}

impl VariationalPaths {
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &PathGrid {
        &self.grid
    }

    pub fn at(&self, path: usize, k: usize) -> DVectorView<'_, f64> {
        let off = (path * (self.grid.steps() + 1) + k) * self.dim;
        DVectorView::from_slice(&self.values[off..off + self.dim], self.dim)
    }

    /// `p(T)` per path.
    pub fn terminal(&self, path: usize) -> DVectorView<'_, f64> {
        self.at(path, self.grid.steps())
    }

    /// Scales every value, for fault-injection experiments.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        out
    }
}

/// Single-path `p` from `start`, written into a `(steps+1) × n` buffer.
pub(crate) fn variational_path(
    problem: &dyn ControlProblem,
    states: &[f64],
    controls: &[f64],
    bundle: &NoiseBundle,
    path: usize,
    start: usize,
    v: &ControlVec,
) -> Vec<f64> {
    let grid = bundle.grid();
    let (n, m, steps) = (problem.state_dim(), problem.control_dim(), grid.steps());
    let dt = grid.dt();
    let mut out = vec![0.0; (steps + 1) * n];
    let x_at = |k: usize| StateVec::from_column_slice(&states[k * n..(k + 1) * n]);
    let u_at = |k: usize| ControlVec::from_column_slice(&controls[k * m..(k + 1) * m]);
    let t0 = grid.time(start);
    let xs = x_at(start);
    let mut p = problem.drift(t0, &xs, v) - problem.drift(t0, &xs, &u_at(start));
    out[start * n..(start + 1) * n].copy_from_slice(p.as_slice());
    for k in start..steps {
        let t = grid.time(k);
        let (x, u) = (x_at(k), u_at(k));
        let dm = DVectorView::from_slice(bundle.increment(path, k), n);
        let next = &p + problem.drift_x(t, &x, &u) * &p * dt + problem.diffusion_x(t, &x, &p) * dm;
        p = next;
        out[(k + 1) * n..(k + 2) * n].copy_from_slice(p.as_slice());
    }
    out
}

fn check_coupling(optimal: &TrajectoryBundle, bundle: &NoiseBundle) -> Result<()> {
    if optimal.noise_fingerprint() != bundle.fingerprint() {
        return Err(Error::BundleMismatch(
            "trajectories were integrated with a different noise bundle".into(),
        ));
    }
    Ok(())
}

/// First-order variational process of a spike:
/// `p(t₀) = F(X*(t₀), v) − F(X*(t₀), u*(t₀))`, then
/// `dp = F_x p dt + G_x[p] dM` along the reference trajectory.
pub fn integrate_variational(
    problem: &dyn ControlProblem,
    optimal: &TrajectoryBundle,
    bundle: &NoiseBundle,
    spec: &SpikeSpec,
) -> Result<VariationalPaths> {
    check_coupling(optimal, bundle)?;
    let window = spec.window(bundle.grid())?;
    if spec.v.len() != problem.control_dim() {
        return Err(Error::DimensionMismatch {
            context: "spike value",
            expected: problem.control_dim(),
            actual: spec.v.len(),
        });
    }
    let runs: Vec<Vec<f64>> = (0..optimal.paths())
        .into_par_iter()
        .map(|p| {
            variational_path(
                problem,
                optimal.path_states(p),
                optimal.path_controls(p),
                bundle,
                p,
                window.start,
                &spec.v,
            )
        })
        .collect();
    Ok(VariationalPaths {
        grid: *bundle.grid(),
        dim: problem.state_dim(),
        paths: optimal.paths(),
        start: window.start,
        values: runs.concat(),
    })
}

/// Per-path `ζ` values at every grid time (zero before the spike start).
#[derive(Debug, Clone, PartialEq)]
pub struct ZetaPaths {
    steps: usize,
    start: usize,
    values: Vec<f64>,
}

impl ZetaPaths {
    pub fn at(&self, path: usize, k: usize) -> f64 {
        self.values[path * (self.steps + 1) + k]
    }

    pub fn terminal(&self, path: usize) -> f64 {
        self.at(path, self.steps)
    }

    pub fn start(&self) -> usize {
        self.start
    }
}

pub(crate) fn zeta_path(
    problem: &dyn ControlProblem,
    grid: &PathGrid,
    states: &[f64],
    controls: &[f64],
    p: &[f64],
    start: usize,
    v: &ControlVec,
) -> Vec<f64> {
    let (n, m, steps) = (problem.state_dim(), problem.control_dim(), grid.steps());
    let dt = grid.dt();
    let x_at = |k: usize| StateVec::from_column_slice(&states[k * n..(k + 1) * n]);
    let u_at = |k: usize| ControlVec::from_column_slice(&controls[k * m..(k + 1) * m]);
    let mut out = vec![0.0; steps + 1];
    let t0 = grid.time(start);
    let xs = x_at(start);
    let mut z = problem.running_cost(t0, &xs, v) - problem.running_cost(t0, &xs, &u_at(start));
    out[start] = z;
    for k in start..steps {
        let (x, u) = (x_at(k), u_at(k));
        let pk = DVectorView::from_slice(&p[k * n..(k + 1) * n], n);
        z += problem.running_cost_x(grid.time(k), &x, &u).dot(&pk) * dt;
        out[k + 1] = z;
    }
    out
}

/// `ζ(t₀) = ℓ(X*(t₀), v) − ℓ(X*(t₀), u*(t₀))`, `dζ = ⟨ℓ_x(X*, u*), p⟩ dt`.
pub fn integrate_zeta(
    problem: &dyn ControlProblem,
    optimal: &TrajectoryBundle,
    p: &VariationalPaths,
    spec: &SpikeSpec,
) -> Result<ZetaPaths> {
    let window = spec.window(optimal.grid())?;
    if window.start != p.start() || p.paths() != optimal.paths() || p.dim() != optimal.dim() {
        return Err(Error::Precondition(
            "variational paths were computed for a different spike or bundle".into(),
        ));
    }
    let steps = optimal.grid().steps();
    let len = (steps + 1) * p.dim;
    let runs: Vec<Vec<f64>> = (0..optimal.paths())
        .into_par_iter()
        .map(|path| {
            zeta_path(
                problem,
                optimal.grid(),
                optimal.path_states(path),
                optimal.path_controls(path),
                &p.values[path * len..(path + 1) * len],
                window.start,
                &spec.v,
            )
        })
        .collect();
    Ok(ZetaPaths {
        steps,
        start: window.start,
        values: runs.concat(),
    })
}

/// Mean cost with its standard error, plus per-path values for coupled comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub estimate: Estimate,
    pub per_path: Vec<f64>,
}

pub(crate) fn path_cost(
    problem: &dyn ControlProblem,
    grid: &PathGrid,
    states: &[f64],
    controls: &[f64],
) -> f64 {
    let (n, m) = (problem.state_dim(), problem.control_dim());
    let dt = grid.dt();
    let mut total = 0.0;
    for k in 0..grid.steps() {
        let x = StateVec::from_column_slice(&states[k * n..(k + 1) * n]);
        let u = ControlVec::from_column_slice(&controls[k * m..(k + 1) * m]);
        total += problem.running_cost(grid.time(k), &x, &u) * dt;
    }
    let steps = grid.steps();
    total
        + problem.terminal_cost(&StateVec::from_column_slice(
            &states[steps * n..(steps + 1) * n],
        ))
}

/// Left-Riemann running cost plus terminal cost, per path.
pub fn evaluate_cost(problem: &dyn ControlProblem, trajectories: &TrajectoryBundle) -> CostReport {
    let per_path: Vec<f64> = (0..trajectories.paths())
        .into_par_iter()
        .map(|p| {
            path_cost(
                problem,
                trajectories.grid(),
                trajectories.path_states(p),
                trajectories.path_controls(p),
            )
        })
        .collect();
    CostReport {
        estimate: Estimate::from_samples(&per_path),
        per_path,
    }
}

/// Point at which derivatives are probed.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeProbe {
    pub t: f64,
    pub x: StateVec,
    pub u: ControlVec,
}

/// Relative error above which a supplied derivative is declared faulty.
pub const DERIVATIVE_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

/// Finite-difference audit of the supplied derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeReport {
    /// `(name, max relative error)` for F_x, F_u, G_x, ℓ_x, ℓ_u, h_x.
    pub errors: Vec<(&'static str, f64)>,
    /// Names whose error exceeds [`DERIVATIVE_TOL`].
    pub faults: Vec<&'static str>,
    /// Probe maxima of the Hilbert–Schmidt norms of `F_x`, `F_u` and `G_x[e]` (unit `e`).
    pub drift_x_bound: f64,
    pub drift_u_bound: f64,
    pub diffusion_x_bound: f64,
    /// Smallest `k` with `|h_x(x)| ≤ k(1 + |x|)` on the probes.
    pub terminal_growth: f64,
}

impl DerivativeReport {
    pub fn passed(&self) -> bool {
        self.faults.is_empty()
    }

    pub fn error_of(&self, name: &str) -> Option<f64> {
        self.errors
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, e)| *e)
    }
}

fn rel_err(fd: &Operator, analytic: &Operator) -> f64 {
    let scale = analytic.amax().max(1.0);
    (fd - analytic).amax() / scale
}

fn central<T>(
    x: &nalgebra::DVector<f64>,
    i: usize,
    f: impl Fn(&nalgebra::DVector<f64>) -> T,
) -> (T, T, f64)
where
    T: Sized,
{
    let h = FD_STEP * x[i].abs().max(1.0);
    let mut plus = x.clone();
    plus[i] += h;
    let mut minus = x.clone();
    minus[i] -= h;
    (f(&plus), f(&minus), h)
}

/// Compares analytic derivatives with central finite differences at each probe.
pub fn finite_diff_check(
    problem: &dyn ControlProblem,
    probes: &[DerivativeProbe],
) -> Result<DerivativeReport> {
    let (n, m) = (problem.state_dim(), problem.control_dim());
    let mut worst = [0.0f64; 6];
    let (mut fx_bound, mut fu_bound, mut gx_bound, mut growth) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for probe in probes {
        let (t, x, u) = (probe.t, &probe.x, &probe.u);
        if x.len() != n || u.len() != m {
            return Err(Error::DimensionMismatch {
                context: "derivative probe",
                expected: n + m,
                actual: x.len() + u.len(),
            });
        }
        if x.iter().chain(u.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("derivative probe"));
        }

        let mut fd_fx = Operator::zeros(n, n);
        let mut fd_lx = Operator::zeros(n, 1);
        let mut fd_hx = Operator::zeros(n, 1);
        for i in 0..n {
            let (a, b, h) = central(x, i, |y| problem.drift(t, y, u));
            fd_fx.set_column(i, &((a - b) / (2.0 * h)));
            let (a, b, h) = central(x, i, |y| problem.running_cost(t, y, u));
            fd_lx[i] = (a - b) / (2.0 * h);
            let (a, b, h) = central(x, i, |y| problem.terminal_cost(y));
            fd_hx[i] = (a - b) / (2.0 * h);

            let (a, b, h) = central(x, i, |y| problem.diffusion(t, y));
            let fd_gx = (a - b) / (2.0 * h);
            let mut e = StateVec::zeros(n);
            e[i] = 1.0;
            let an_gx = problem.diffusion_x(t, x, &e);
            worst[2] = worst[2].max(rel_err(&fd_gx, &an_gx));
            gx_bound = gx_bound.max(an_gx.norm());
        }
        let mut fd_fu = Operator::zeros(n, m);
        let mut fd_lu = Operator::zeros(m, 1);
        for j in 0..m {
            let (a, b, h) = central(u, j, |w| problem.drift(t, x, w));
            fd_fu.set_column(j, &((a - b) / (2.0 * h)));
            let (a, b, h) = central(u, j, |w| problem.running_cost(t, x, w));
            fd_lu[j] = (a - b) / (2.0 * h);
        }

        let fx = problem.drift_x(t, x, u);
        let fu = problem.drift_u(t, x, u);
        let lx = Operator::from_column_slice(n, 1, problem.running_cost_x(t, x, u).as_slice());
        let lu = Operator::from_column_slice(m, 1, problem.running_cost_u(t, x, u).as_slice());
        let hx_vec = problem.terminal_cost_x(x);
        let hx = Operator::from_column_slice(n, 1, hx_vec.as_slice());
        worst[0] = worst[0].max(rel_err(&fd_fx, &fx));
        worst[1] = worst[1].max(rel_err(&fd_fu, &fu));
        worst[3] = worst[3].max(rel_err(&fd_lx, &lx));
        worst[4] = worst[4].max(rel_err(&fd_lu, &lu));
        worst[5] = worst[5].max(rel_err(&fd_hx, &hx));
        fx_bound = fx_bound.max(fx.norm());
        fu_bound = fu_bound.max(fu.norm());
        growth = growth.max(hx_vec.norm() / (1.0 + x.norm()));
    }
    let names = ["F_x", "F_u", "G_x", "l_x", "l_u", "h_x"];
    let errors: Vec<(&'static str, f64)> = names.iter().copied().zip(worst).collect();
    let faults = errors
        .iter()
        .filter(|(_, e)| !(*e <= DERIVATIVE_TOL))
        .map(|(n, _)| *n)
        .collect();
    Ok(DerivativeReport {
        errors,
        faults,
        drift_x_bound: fx_bound,
        drift_u_bound: fu_bound,
        diffusion_x_bound: gx_bound,
        terminal_growth: growth,
    })
}
