//! Hamiltonian `H = ℓ + ⟨F, y⟩ + ⟨G Q^{1/2}, z⟩₂` and the adjoint BSDE
//!
//! ```text
//! −dY = ∇ₓH(t, X, u, Y, Z Q^{1/2}) dt − Z dM − dN,   Y(T) = hₓ(X(T)).
//! ```
//!
//! Two solvers are provided. [`solve_adjoint_explicit`] covers problems whose
//! terminal gradient is a constant vector annihilated by the drift part of
//! `∇ₓH`; the solution is then `Y ≡ hₓ`, `Z ≡ 0`, `N ≡ 0`.
//! [`solve_adjoint_lsmc`] runs a backward least-squares Monte Carlo scheme
//! along simulated trajectories. All drivers here generate a Brownian
//! filtration, so `N` is not solved for; its discrete increments are kept as
//! a residual diagnostic.

use nalgebra::{DMatrix, DVectorView};
use rayon::prelude::*;

use crate::dynamics::{
    ControlProblem, ControlSet, DerivativeProbe, TrajectoryBundle, VariationalPaths,
};
use crate::error::{Error, Result};
use crate::hilbert::{hs_inner, ControlVec, Operator, StateVec};
use crate::martingale::{MartingaleDriver, NoiseBundle, PathGrid};
use crate::regression::{Projector, RegressionBasis, StepFit};
use crate::stats::Estimate;

/// Relative N-residual energy above which the LSMC solver warns.
pub const N_ENERGY_WARN: f64 = 0.1;

/// Arguments `(t, x, u, y, Z Q^{1/2})` of the Hamiltonian.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianArgs {
    pub t: f64,
    pub x: StateVec,
    pub u: ControlVec,
    pub y: StateVec,
    /// The composite `Z(t) Q^{1/2}(t)`.
    pub zq: Operator,
}

fn check_args(problem: &dyn ControlProblem, args: &HamiltonianArgs) -> Result<()> {
    let n = problem.state_dim();
    let checks = [
        ("hamiltonian x", args.x.len(), n),
        ("hamiltonian y", args.y.len(), n),
        ("hamiltonian u", args.u.len(), problem.control_dim()),
        ("hamiltonian zq rows", args.zq.nrows(), n),
        ("hamiltonian zq cols", args.zq.ncols(), n),
    ];
    for (context, actual, expected) in checks {
        if actual != expected {
            return Err(Error::DimensionMismatch {
                context,
                expected,
                actual,
            });
        }
    }
    Ok(())
}

/// `H(t,x,u,y,z)` with `Q^{1/2}(t)` computed from the driver.
pub fn hamiltonian(
    problem: &dyn ControlProblem,
    driver: &MartingaleDriver,
    args: &HamiltonianArgs,
) -> Result<f64> {
    check_args(problem, args)?;
    let root = driver.cov_rate_sqrt(args.t)?;
    hamiltonian_with_root(problem, &root, args)
}

/// Same as [`hamiltonian`] with a precomputed `Q^{1/2}(t)`.
pub fn hamiltonian_with_root(
    problem: &dyn ControlProblem,
    root: &Operator,
    args: &HamiltonianArgs,
) -> Result<f64> {
    let gq = problem.diffusion(args.t, &args.x) * root;
    Ok(problem.running_cost(args.t, &args.x, &args.u)
        + problem.drift(args.t, &args.x, &args.u).dot(&args.y)
        + hs_inner(&gq, &args.zq)?)
}

/// `∇ₓH = ℓₓ + Fₓ*y + Γ` with `⟨Γ, d⟩ = ⟨(Gₓ[d]) Q^{1/2}, zq⟩₂`.
pub fn grad_x_hamiltonian(
    problem: &dyn ControlProblem,
    driver: &MartingaleDriver,
    args: &HamiltonianArgs,
) -> Result<StateVec> {
    check_args(problem, args)?;
    let root = driver.cov_rate_sqrt(args.t)?;
    Ok(grad_x_with_root(problem, &root, args))
}

pub(crate) fn grad_x_with_root(
    problem: &dyn ControlProblem,
    root: &Operator,
    args: &HamiltonianArgs,
) -> StateVec {
    let n = problem.state_dim();
    let (t, x, u) = (args.t, &args.x, &args.u);
    let mut g = problem.running_cost_x(t, x, u) + problem.drift_x(t, x, u).transpose() * &args.y;
    if args.zq.iter().any(|v| *v != 0.0) {
        let mut e = StateVec::zeros(n);
        for j in 0..n {
            e[j] = 1.0;
            g[j] += (problem.diffusion_x(t, x, &e) * root).dot(&args.zq);
            e[j] = 0.0;
        }
    }
    g
}

/// Values of a field on the `(path, step)` lattice.
#[derive(Debug, Clone, PartialEq)]
enum Field {
    Constant(Vec<f64>),
    Sampled { per_path: usize, data: Vec<f64> },
}

impl Field {
    fn get(&self, path: usize, k: usize, width: usize) -> &[f64] {
        match self {
            Field::Constant(v) => v,
            Field::Sampled { per_path, data } => {
                let off = path * per_path + k * width;
                &data[off..off + width]
            }
        }
    }
}

/// Residual diagnostics of the orthogonal martingale part `N`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NDiagnostics {
    /// `Σ_k E|ΔN_k|²`.
    pub energy: f64,
    /// `Σ_k E|Y_{k+1} − Ê[Y_{k+1}|X_k]|²`, the total martingale energy.
    pub martingale_energy: f64,
    pub warnings: Vec<String>,
}

impl NDiagnostics {
    /// `energy / martingale_energy`, zero when there is no martingale part.
    pub fn relative(&self) -> f64 {
        if self.martingale_energy <= 1e-300 {
            0.0
        } else {
            self.energy / self.martingale_energy
        }
    }
}

/// Gridded `(Y, Z, N)` solving the adjoint equation along a policy.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    grid: PathGrid,
    dim: usize,
    paths: usize,
    y: Field,
    z: Field,
    y_fits: Option<Vec<StepFit>>,
    /// `N ≡ 0` is assumed (Brownian filtration).
    pub n_zero: bool,
    pub diagnostics: NDiagnostics,
}

impl AdjointSolution {
    pub fn grid(&self) -> &PathGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.y, Field::Constant(_))
    }

    /// `Y(t_k)` on `path`, `k = 0..=steps`.
    pub fn y(&self, path: usize, k: usize) -> DVectorView<'_, f64> {
        DVectorView::from_slice(self.y.get(path, k, self.dim), self.dim)
    }

    /// `Z(t_k)` on `path`, `k = 0..steps`; the last step value is reused at `T`.
    pub fn z(&self, path: usize, k: usize) -> Operator {
        let k = k.min(self.grid.steps() - 1);
        Operator::from_column_slice(self.dim, self.dim, self.z.get(path, k, self.dim * self.dim))
    }

    /// Fitted `x ↦ Ê[Y(t_k) | X(t_k) = x]`, available for LSMC solutions.
    pub fn y_fit(&self, k: usize) -> Option<&StepFit> {
        self.y_fits.as_ref().map(|f| &f[k])
    }

    /// CSV with columns `path,step,time,y0..,z00..` (Z column-major).
    pub fn to_csv(&self) -> String {
        let n = self.dim;
        let mut out = String::from("path,step,time");
        for i in 0..n {
            out.push_str(&format!(",y{i}"));
        }
        for j in 0..n {
            for i in 0..n {
                out.push_str(&format!(",z{i}{j}"));
            }
        }
        out.push('\n');
        for p in 0..self.paths {
            for k in 0..=self.grid.steps() {
                out.push_str(&format!("{p},{k},{}", self.grid.time(k)));
                for v in self.y(p, k).iter() {
                    out.push_str(&format!(",{v}"));
                }
                for v in self.z(p, k).iter() {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

fn precondition_points(problem: &dyn ControlProblem) -> Vec<DerivativeProbe> {
    let n = problem.state_dim();
    let m = problem.control_dim();
    let mut xs = vec![StateVec::zeros(n)];
    for i in 0..n {
        let mut e = StateVec::zeros(n);
        e[i] = 1.0;
        xs.push(e.clone());
        xs.push(e * -2.5);
    }
    xs.push(StateVec::from_fn(n, |i, _| 0.7 - 0.3 * i as f64));
    let us = match problem.control_set() {
        ControlSet::Finite(points) => points.clone(),
        ControlSet::Box { lower, upper } => {
            vec![lower.clone(), upper.clone(), (lower + upper) * 0.5]
        }
        ControlSet::Ball { center, radius } => {
            let mut shifted = center.clone();
            shifted[0] += radius;
            vec![center.clone(), shifted]
        }
        ControlSet::Unconstrained { .. } => vec![
            ControlVec::zeros(m),
            ControlVec::from_element(m, 1.0),
            ControlVec::from_element(m, -0.5),
        ],
    };
    let mut probes = Vec::new();
    for x in &xs {
        for u in &us {
            for t in [0.0, 0.5] {
                probes.push(DerivativeProbe {
                    t,
                    x: x.clone(),
                    u: u.clone(),
                });
            }
        }
    }
    probes
}

/// `Y ≡ hₓ`, `Z ≡ 0`, `N ≡ 0` for problems whose terminal gradient is constant
/// and whose `∇ₓH(·, hₓ, 0)` vanishes; both conditions are probed first.
pub fn solve_adjoint_explicit(
    problem: &dyn ControlProblem,
    driver: &MartingaleDriver,
    grid: &PathGrid,
) -> Result<AdjointSolution> {
    driver.validate_on(grid)?;
    let n = problem.state_dim();
    if driver.dim() != n {
        return Err(Error::DimensionMismatch {
            context: "driver vs state",
            expected: n,
            actual: driver.dim(),
        });
    }
    let probes = precondition_points(problem);
    let y = problem.terminal_cost_x(&probes[0].x);
    for probe in &probes {
        let hx = problem.terminal_cost_x(&probe.x);
        if (&hx - &y).amax() > 1e-12 * (1.0 + y.amax()) {
            return Err(Error::Precondition(
                "terminal gradient is not constant; use the regression solver".into(),
            ));
        }
        let t = probe.t * grid.horizon();
        let args = HamiltonianArgs {
            t,
            x: probe.x.clone(),
            u: probe.u.clone(),
            y: y.clone(),
            zq: Operator::zeros(n, n),
        };
        let g = grad_x_hamiltonian(problem, driver, &args)?;
        if g.amax() > 1e-12 * (1.0 + y.amax()) {
            return Err(Error::Precondition(
                "grad_x H does not vanish at (Y, Z) = (h_x, 0); the adjoint is not constant".into(),
            ));
        }
    }
    Ok(AdjointSolution {
        grid: *grid,
        dim: n,
        paths: 0,
        y: Field::Constant(y.as_slice().to_vec()),
        z: Field::Constant(vec![0.0; n * n]),
        y_fits: None,
        n_zero: true,
        diagnostics: NDiagnostics::default(),
    })
}

/// Pseudo-inverse of a symmetric PSD matrix restricted to its range.
fn pinv_psd(s: &Operator) -> Operator {
    let eig = s.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let inv = eig.eigenvalues.map(|l| {
        if l > 1e-12 * top && l > 0.0 {
            1.0 / l
        } else {
            0.0
        }
    });
    &eig.eigenvectors * Operator::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Backward least-squares Monte Carlo for the adjoint BSDE along `trajectories`.
///
/// At each step, with `Ê` the projection on `basis` features of `X_k`:
/// `Z_k = Ê[(Y_{k+1} − Ê[Y_{k+1}]) ⊗ ΔM_k] · S_k⁺` where `S_k` is the step
/// covariance, then `Y_k = Ê[Y_{k+1}] + ∇ₓH(t_k, X_k, u_k, Y_k, Z_k Q^{1/2}) Δt`
/// by two Picard passes started at `Ê[Y_{k+1}]`. Subtracting the conditional
/// mean before the cross moment removes the `Ê[Y_{k+1}] ΔM_k` term, which has
/// zero conditional mean but dominates the variance.
pub fn solve_adjoint_lsmc(
    problem: &dyn ControlProblem,
    driver: &MartingaleDriver,
    trajectories: &TrajectoryBundle,
    bundle: &NoiseBundle,
    basis: RegressionBasis,
) -> Result<AdjointSolution> {
    if trajectories.noise_fingerprint() != bundle.fingerprint() {
        return Err(Error::BundleMismatch(
            "trajectories were integrated with a different noise bundle".into(),
        ));
    }
    let grid = *trajectories.grid();
    let cache = driver.on_grid(&grid)?;
    let (n, m) = (problem.state_dim(), problem.control_dim());
    let paths = trajectories.paths();
    let steps = grid.steps();
    let dt = grid.dt();
    let y_per_path = (steps + 1) * n;
    let z_per_path = steps * n * n;
    let mut y_data = vec![0.0; paths * y_per_path];
    let mut z_data = vec![0.0; paths * z_per_path];
    let mut fits = vec![None; steps + 1];

    let mut y_next = DMatrix::from_fn(paths, n, |p, i| {
        problem.terminal_cost_x(&trajectories.state(p, steps).into_owned())[i]
    });
    for p in 0..paths {
        for i in 0..n {
            y_data[p * y_per_path + steps * n + i] = y_next[(p, i)];
        }
    }
    let terminal_states = DMatrix::from_fn(paths, n, |p, i| trajectories.state(p, steps)[i]);
    fits[steps] = Some(Projector::new(&terminal_states, basis, steps)?.fit(&y_next));
    // energies below this are roundoff of a deterministic adjoint
    let floor = 1e-20 * steps as f64 * (1.0 + y_next.norm_squared() / paths as f64);

    let mut diagnostics = NDiagnostics::default();
    for k in (0..steps).rev() {
        let t = grid.time(k);
        let states = DMatrix::from_fn(paths, n, |p, i| trajectories.state(p, k)[i]);
        let proj = Projector::new(&states, basis, k)?;
        let cond_mean = proj.project(&y_next);
        let resid = &y_next - &cond_mean;
        let cross = DMatrix::from_fn(paths, n * n, |p, idx| {
            // column-major (i, j) of R ⊗ ΔM
            let (i, j) = (idx % n, idx / n);
            resid[(p, i)] * bundle.increment(p, k)[j]
        });
        let cross_fit = proj.project(&cross);
        let s_pinv = pinv_psd(&cache.step_covariances[k]);
        let root = &cache.roots[k];

        let rows: Vec<(StateVec, Operator, f64, f64)> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let x = trajectories.state(p, k).into_owned();
                let u = ControlVec::from_column_slice(trajectories.control(p, k).as_slice());
                debug_assert_eq!(u.len(), m);
                let c = Operator::from_fn(n, n, |i, j| cross_fit[(p, i + j * n)]);
                let z = c * &s_pinv;
                let zq = &z * root;
                let y0 = StateVec::from_fn(n, |i, _| cond_mean[(p, i)]);
                let mut args = HamiltonianArgs {
                    t,
                    x,
                    u,
                    y: y0.clone(),
                    zq,
                };
                let mut y = y0.clone();
                for _ in 0..2 {
                    y = &y0 + grad_x_with_root(problem, root, &args) * dt;
                    args.y = y.clone();
                }
                let dm = DVectorView::from_slice(bundle.increment(p, k), n);
                let y_next_p = StateVec::from_fn(n, |i, _| y_next[(p, i)]);
                let dn = &y_next_p - &y + grad_x_with_root(problem, root, &args) * dt - &z * dm;
                let r2 = (&y_next_p - &y0).norm_squared();
                (y, z, dn.norm_squared(), r2)
            })
            .collect();

        let mut energy = 0.0;
        let mut mart = 0.0;
        for (p, (y, z, dn2, r2)) in rows.into_iter().enumerate() {
            energy += dn2;
            mart += r2;
            for i in 0..n {
                y_next[(p, i)] = y[i];
                y_data[p * y_per_path + k * n + i] = y[i];
            }
            let off = p * z_per_path + k * n * n;
            z_data[off..off + n * n].copy_from_slice(z.as_slice());
        }
        diagnostics.energy += energy / paths as f64;
        diagnostics.martingale_energy += mart / paths as f64;
        fits[k] = Some(proj.fit(&y_next));
    }
    if diagnostics.energy > floor && diagnostics.relative() > N_ENERGY_WARN {
        diagnostics.warnings.push(format!(
            "N-residual energy is {:.3} of the martingale energy",
            diagnostics.relative()
        ));
    }
    Ok(AdjointSolution {
        grid,
        dim: n,
        paths,
        y: Field::Sampled {
            per_path: y_per_path,
            data: y_data,
        },
        z: Field::Sampled {
            per_path: z_per_path,
            data: z_data,
        },
        y_fits: Some(
            fits.into_iter()
                .map(|f| f.expect("every step fitted"))
                .collect(),
        ),
        n_zero: true,
        diagnostics,
    })
}

/// Both sides of `E⟨Y(T), p(T)⟩ = −E∫_{t₀}^T ⟨ℓₓ, p⟩ ds + E⟨Y(t₀), p(t₀)⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityReport {
    pub lhs: Estimate,
    pub rhs: Estimate,
    pub difference: f64,
    /// Paired estimate of `LHS − RHS`.
    pub paired: Estimate,
}

impl DualityReport {
    /// `|LHS − RHS| < n_se · (SE_LHS + SE_RHS)`, with roundoff slack when both SEs vanish.
    pub fn holds(&self, n_se: f64) -> bool {
        let slack = 1e-12 * (1.0 + self.lhs.mean.abs());
        self.difference.abs() < n_se * (self.lhs.std_err + self.rhs.std_err) + slack
    }
}

/// Checks the duality between the adjoint `Y` and the variational process `p`.
pub fn duality_check(
    problem: &dyn ControlProblem,
    trajectories: &TrajectoryBundle,
    adjoint: &AdjointSolution,
    p: &VariationalPaths,
) -> Result<DualityReport> {
    let grid = trajectories.grid();
    if p.paths() != trajectories.paths()
        || (!adjoint.is_constant() && adjoint.paths() != trajectories.paths())
    {
        return Err(Error::Precondition(
            "duality inputs have different path counts".into(),
        ));
    }
    let start = p.start();
    let steps = grid.steps();
    let dt = grid.dt();
    let pairs: Vec<(f64, f64)> = (0..trajectories.paths())
        .into_par_iter()
        .map(|path| {
            let lhs = adjoint.y(path, steps).dot(&p.terminal(path));
            let mut running = 0.0;
            for k in start..steps {
                let x = trajectories.state(path, k).into_owned();
                let u = trajectories.control(path, k).into_owned();
                running += problem
                    .running_cost_x(grid.time(k), &x, &u)
                    .dot(&p.at(path, k))
                    * dt;
            }
            let rhs = -running + adjoint.y(path, start).dot(&p.at(path, start));
            (lhs, rhs)
        })
        .collect();
    let (l, r): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let lhs = Estimate::from_samples(&l);
    let rhs = Estimate::from_samples(&r);
    Ok(DualityReport {
        lhs,
        rhs,
        difference: lhs.mean - rhs.mean,
        paired: Estimate::paired_difference(&l, &r),
    })
}
