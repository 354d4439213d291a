//! Numerical checks of the maximum principle along a candidate pair:
//! the Gâteaux derivative of the cost under spikes, the Hamiltonian minimum
//! condition, the convexity-based sufficient conditions, and the
//! convergence rates of spike perturbations.
//!
//! Costs are minimized throughout, so an optimal `u*` minimizes `v ↦ H(…, v, …)`.

use rand::RngExt;
use rayon::prelude::*;

use crate::adjoint::{hamiltonian_with_root, AdjointSolution, HamiltonianArgs};
use crate::dynamics::{
    apply_spike, integrate_path, path_cost, variational_path, zeta_path, ControlPolicy,
    ControlProblem, ControlSet, SpikeSpec, TrajectoryBundle,
};
use crate::error::{Error, Result};
use crate::hilbert::{ControlVec, Operator, StateVec};
use crate::martingale::{path_rng, MartingaleDriver, NoiseBundle};
use crate::stats::{log_log_slope, Estimate};

/// Candidate optimal pair with its adjoint, all on one noise bundle.
#[derive(Debug, Clone)]
pub struct CandidatePair {
    pub policy: ControlPolicy,
    pub x0: StateVec,
    pub trajectories: TrajectoryBundle,
    /// Not needed by the spike experiments, which only perturb the forward state.
    pub adjoint: Option<AdjointSolution>,
}

impl CandidatePair {
    fn adjoint(&self) -> Result<&AdjointSolution> {
        self.adjoint
            .as_ref()
            .ok_or_else(|| Error::Precondition("the candidate has no adjoint solution".into()))
    }

    fn check_bundle(&self, bundle: &NoiseBundle) -> Result<()> {
        if self.trajectories.noise_fingerprint() != bundle.fingerprint() {
            return Err(Error::BundleMismatch(
                "candidate trajectories were integrated with a different noise bundle".into(),
            ));
        }
        Ok(())
    }
}

/// Runs the spiked policy on one path with the candidate's noise and returns its cost.
fn spiked_path_cost(
    problem: &dyn ControlProblem,
    spiked: &ControlPolicy,
    bundle: &NoiseBundle,
    path: usize,
    x0: &StateVec,
) -> Result<f64> {
    let run = integrate_path(problem, spiked, bundle, path, x0)?;
    Ok(path_cost(
        problem,
        bundle.grid(),
        &run.states,
        &run.controls,
    ))
}

/// Costs `J(u_ε) − J(u*)` per path under common random numbers.
pub fn spike_cost_gaps(
    problem: &dyn ControlProblem,
    candidate: &CandidatePair,
    spec: &SpikeSpec,
    bundle: &NoiseBundle,
) -> Result<Vec<f64>> {
    candidate.check_bundle(bundle)?;
    let grid = bundle.grid();
    let spiked = apply_spike(&candidate.policy, spec, grid)?;
    spiked.validate(grid, problem.control_set())?;
    let traj = &candidate.trajectories;
    let gaps: Vec<Result<f64>> = (0..bundle.paths())
        .into_par_iter()
        .map(|p| {
            let base = path_cost(problem, grid, traj.path_states(p), traj.path_controls(p));
            Ok(spiked_path_cost(problem, &spiked, bundle, p, &candidate.x0)? - base)
        })
        .collect();
    gaps.into_iter().collect()
}

/// Finite-difference and adjoint-side values of the cost derivative along a spike.
#[derive(Debug, Clone, PartialEq)]
pub struct GateauxReport {
    /// `(ε, (J(u_ε) − J(u*))/ε)` for each requested ε.
    pub finite_differences: Vec<(f64, Estimate)>,
    /// `E[⟨hₓ(X*(T)), p(T)⟩ + ζ(T)]`.
    pub adjoint_side: Estimate,
    /// Paired estimate of finite difference minus adjoint side, per ε.
    pub paired_gaps: Vec<(f64, Estimate)>,
    /// `2·FD(ε) − FD(2ε)` when both ε and 2ε were requested.
    pub extrapolated: Option<f64>,
}

/// Allowed relative bias per unit ε in [`GateauxReport::agrees`].
pub const GATEAUX_BIAS_PER_EPS: f64 = 0.1;

impl GateauxReport {
    /// Agreement at the smallest ε: `|FD − adjoint| ≤ n_se·SE + 0.1·ε·|adjoint|`,
    /// with SE the paired standard error of the difference.
    pub fn agrees(&self, n_se: f64) -> bool {
        let Some((eps, gap)) = self
            .paired_gaps
            .iter()
            .min_by(|a, b| a.0.partial_cmp(&b.0).expect("finite eps"))
        else {
            return false;
        };
        let allowance = n_se * gap.std_err
            + GATEAUX_BIAS_PER_EPS * eps * self.adjoint_side.mean.abs()
            + 1e-12 * (1.0 + self.adjoint_side.mean.abs());
        gap.mean.abs() <= allowance
    }
}

/// Options for fault-injection experiments on the variational process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationalFault {
    /// Multiplies `p` on every path.
    pub scale: f64,
}

impl Default for VariationalFault {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

/// Compares `(J(u_ε) − J(u*))/ε` with `E[⟨hₓ(X*(T)), p(T)⟩ + ζ(T)]`.
///
/// `spec.eps` is ignored except for validation; the finite differences use
/// every value of `eps_values` with the spike start and value of `spec`.
pub fn gateaux_check(
    problem: &dyn ControlProblem,
    candidate: &CandidatePair,
    spec: &SpikeSpec,
    eps_values: &[f64],
    bundle: &NoiseBundle,
    fault: VariationalFault,
) -> Result<GateauxReport> {
    candidate.check_bundle(bundle)?;
    let grid = bundle.grid();
    let start = spec.window(grid)?.start;
    let traj = &candidate.trajectories;
    let steps = grid.steps();
    let n = problem.state_dim();

    let adjoint_side: Vec<f64> = (0..bundle.paths())
        .into_par_iter()
        .map(|p| {
            let states = traj.path_states(p);
            let controls = traj.path_controls(p);
            let mut pv = variational_path(problem, states, controls, bundle, p, start, &spec.v);
            pv.iter_mut().for_each(|v| *v *= fault.scale);
            let zeta = zeta_path(problem, grid, states, controls, &pv, start, &spec.v);
            let xt = StateVec::from_column_slice(&states[steps * n..(steps + 1) * n]);
            let pt = StateVec::from_column_slice(&pv[steps * n..(steps + 1) * n]);
            problem.terminal_cost_x(&xt).dot(&pt) + zeta[steps]
        })
        .collect();

    let mut finite_differences = Vec::new();
    let mut paired_gaps = Vec::new();
    for &eps in eps_values {
        let s = SpikeSpec::new(spec.t0, eps, spec.v.clone());
        let gaps = spike_cost_gaps(problem, candidate, &s, bundle)?;
        let quotients: Vec<f64> = gaps.iter().map(|g| g / eps).collect();
        finite_differences.push((eps, Estimate::from_samples(&quotients)));
        paired_gaps.push((eps, Estimate::paired_difference(&quotients, &adjoint_side)));
    }
    let find = |e: f64| {
        finite_differences
            .iter()
            .find(|(x, _)| (x - e).abs() < 1e-12)
            .map(|(_, est)| est.mean)
    };
    let extrapolated = eps_values
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, e| match (find(e), find(2.0 * e)) {
            (Some(a), Some(b)) if acc.is_none() => Some(2.0 * a - b),
            _ => acc,
        });
    Ok(GateauxReport {
        finite_differences,
        adjoint_side: Estimate::from_samples(&adjoint_side),
        paired_gaps,
        extrapolated,
    })
}

/// One Hamiltonian gap `ΔH = H(v) − H(u*)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginRow {
    pub step: usize,
    pub time: f64,
    pub path: usize,
    pub probe: usize,
    pub gap: f64,
}

/// Hamiltonian minimum-condition margins.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginReport {
    pub rows: Vec<MarginRow>,
    pub min_gap: f64,
    pub negative_fraction: f64,
    /// Declared statistical and discretization allowance.
    pub allowance: f64,
    /// `max(1e-8, 3·allowance)`.
    pub tolerance: f64,
}

impl MarginReport {
    pub fn passed(&self) -> bool {
        self.min_gap >= -self.tolerance
    }

    /// CSV with columns `t,path,v_index,delta_h`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,path,v_index,delta_h\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.time, r.path, r.probe, r.gap));
        }
        out
    }
}

/// Evenly spread indices `0..total`, at most `count` of them.
pub fn spread_indices(total: usize, count: usize) -> Vec<usize> {
    if count >= total {
        return (0..total).collect();
    }
    (0..count).map(|i| i * total / count).collect()
}

/// Where the Hamiltonian is evaluated: grid steps and paths.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub steps: Vec<usize>,
    pub paths: Vec<usize>,
}

impl SamplePlan {
    /// `times` steps spread over `[0, T)` and `paths` paths spread over the bundle.
    pub fn spread(candidate: &CandidatePair, times: usize, paths: usize) -> Self {
        let grid = candidate.trajectories.grid();
        Self {
            steps: spread_indices(grid.steps(), times),
            paths: spread_indices(candidate.trajectories.paths(), paths),
        }
    }
}

fn hamiltonian_args(
    candidate: &CandidatePair,
    root: &Operator,
    path: usize,
    k: usize,
) -> Result<HamiltonianArgs> {
    let traj = &candidate.trajectories;
    let adj = candidate.adjoint()?;
    Ok(HamiltonianArgs {
        t: traj.grid().time(k),
        x: traj.state(path, k).into_owned(),
        u: traj.control(path, k).into_owned(),
        y: adj.y(path, k).into_owned(),
        zq: adj.z(path, k) * root,
    })
}

/// Evaluates `ΔH` at every (sampled step, sampled path, probe).
pub fn necessary_check(
    problem: &dyn ControlProblem,
    driver: &MartingaleDriver,
    candidate: &CandidatePair,
    probes: &[ControlVec],
    plan: &SamplePlan,
    allowance: f64,
) -> Result<MarginReport> {
    candidate.adjoint()?;
    let grid = candidate.trajectories.grid();
    let mut tuples = Vec::new();
    for &k in &plan.steps {
        for &p in &plan.paths {
            tuples.push((k, p));
        }
    }
    let roots: Vec<Operator> = plan
        .steps
        .iter()
        .map(|&k| driver.cov_rate_sqrt(grid.time(k)))
        .collect::<Result<_>>()?;
    let rows: Vec<Result<Vec<MarginRow>>> = tuples
        .par_iter()
        .map(|&(k, p)| {
            let slot = plan
                .steps
                .iter()
                .position(|&s| s == k)
                .expect("planned step");
            let root = &roots[slot];
            let mut args = hamiltonian_args(candidate, root, p, k)?;
            let base = hamiltonian_with_root(problem, root, &args)?;
            let mut out = Vec::with_capacity(probes.len());
            for (i, v) in probes.iter().enumerate() {
                args.u = v.clone();
                out.push(MarginRow {
                    step: k,
                    time: grid.time(k),
                    path: p,
                    probe: i,
                    gap: hamiltonian_with_root(problem, root, &args)? - base,
                });
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in rows {
        all.extend(r?);
    }
    let min_gap = all.iter().map(|r| r.gap).fold(f64::INFINITY, f64::min);
    let negative = all.iter().filter(|r| r.gap < 0.0).count();
    let tolerance = (3.0 * allowance).max(1e-8);
    Ok(MarginReport {
        negative_fraction: if all.is_empty() {
            0.0
        } else {
            negative as f64 / all.len() as f64
        },
        min_gap: if all.is_empty() { 0.0 } else { min_gap },
        rows: all,
        allowance,
        tolerance,
    })
}

/// Probe index minimizing `v ↦ H(t_k, X*, v, Y*, Z*Q^{1/2})` at each sampled `(k, path)`.
pub fn hamiltonian_argmins(
    problem: &dyn ControlProblem,
    driver: &MartingaleDriver,
    candidate: &CandidatePair,
    probes: &[ControlVec],
    plan: &SamplePlan,
) -> Result<Vec<(usize, usize, usize)>> {
    let report = necessary_check(problem, driver, candidate, probes, plan, 0.0)?;
    let mut out = Vec::new();
    for chunk in report.rows.chunks(probes.len().max(1)) {
        if let Some(best) = chunk
            .iter()
            .min_by(|a, b| a.gap.partial_cmp(&b.gap).expect("finite gaps"))
        {
            out.push((best.step, best.path, best.probe));
        }
    }
    Ok(out)
}

/// One midpoint-convexity sub-check.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityCheck {
    pub pairs: usize,
    /// Largest `f(mid) − (f(a) + f(b))/2` found.
    pub worst_excess: f64,
    /// Pair `(a, b)` (stacked coordinates) attaining a violation, if any.
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
    pub passed: bool,
}

/// Outcome of the sufficient-condition checks.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficiencyReport {
    /// False when the control set is not convex; the other fields are then empty.
    pub applicable: bool,
    pub terminal_convexity: Option<ConvexityCheck>,
    pub hamiltonian_convexity: Option<ConvexityCheck>,
    pub minimum_condition: Option<MarginReport>,
}

impl SufficiencyReport {
    pub fn passed(&self) -> bool {
        self.applicable
            && self.terminal_convexity.as_ref().is_some_and(|c| c.passed)
            && self
                .hamiltonian_convexity
                .as_ref()
                .is_some_and(|c| c.passed)
            && self.minimum_condition.as_ref().is_some_and(|m| m.passed())
    }
}

/// Midpoint-convexity slack.
pub const CONVEXITY_TOL: f64 = 1e-10;

fn gaussian_vec(rng: &mut impl rand::Rng, n: usize, scale: f64) -> StateVec {
    StateVec::from_fn(n, |_, _| {
        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        z * scale
    })
}

fn random_control(rng: &mut impl rand::Rng, set: &ControlSet, around: &ControlVec) -> ControlVec {
    match set {
        ControlSet::Box { lower, upper } => ControlVec::from_fn(lower.len(), |i, _| {
            lower[i] + (upper[i] - lower[i]) * rng.random::<f64>()
        }),
        ControlSet::Ball { center, radius } => loop {
            let cand = ControlVec::from_fn(center.len(), |i, _| {
                center[i] + radius * (2.0 * rng.random::<f64>() - 1.0)
            });
            if set.contains(&cand) {
                break cand;
            }
        },
        ControlSet::Finite(points) => points[rng.random_range(0..points.len())].clone(),
        ControlSet::Unconstrained { dim } => around + gaussian_vec(rng, *dim, 2.0),
    }
}

/// Checks convexity of `h`, joint convexity of `(x, v) ↦ H` along the candidate's
/// adjoint, and the minimum condition over `probes`.
#[allow(clippy::too_many_arguments)]
pub fn sufficient_check(
    problem: &dyn ControlProblem,
    driver: &MartingaleDriver,
    candidate: &CandidatePair,
    probes: &[ControlVec],
    plan: &SamplePlan,
    pairs: usize,
    seed: u64,
    allowance: f64,
) -> Result<SufficiencyReport> {
    let set = problem.control_set();
    if !set.is_convex() {
        return Ok(SufficiencyReport {
            applicable: false,
            terminal_convexity: None,
            hamiltonian_convexity: None,
            minimum_condition: None,
        });
    }
    let traj = &candidate.trajectories;
    let grid = traj.grid();
    let n = problem.state_dim();
    // dedicated stream, disjoint from the path streams in practice
    let mut rng = path_rng(seed, usize::MAX);
    let random_state = |rng: &mut rand_chacha::ChaCha8Rng| {
        let p = rng.random_range(0..traj.paths());
        let k = rng.random_range(0..=grid.steps());
        let base = traj.state(p, k).into_owned();
        let spread = 1.0 + base.amax();
        base + gaussian_vec(rng, n, spread)
    };

    let mut terminal = ConvexityCheck {
        pairs,
        worst_excess: f64::NEG_INFINITY,
        witness: None,
        passed: true,
    };
    for _ in 0..pairs {
        let a = random_state(&mut rng);
        let b = random_state(&mut rng);
        let (ha, hb) = (problem.terminal_cost(&a), problem.terminal_cost(&b));
        let mid = problem.terminal_cost(&((&a + &b) * 0.5));
        let excess = mid - 0.5 * (ha + hb);
        if excess > terminal.worst_excess {
            terminal.worst_excess = excess;
        }
        if excess > CONVEXITY_TOL * (1.0 + ha.abs() + hb.abs()) && terminal.witness.is_none() {
            terminal.passed = false;
            terminal.witness = Some((a.as_slice().to_vec(), b.as_slice().to_vec()));
        }
    }

    let mut joint = ConvexityCheck {
        pairs,
        worst_excess: f64::NEG_INFINITY,
        witness: None,
        passed: true,
    };
    for _ in 0..pairs {
        let p = rng.random_range(0..traj.paths());
        let k = rng.random_range(0..grid.steps());
        let root = driver.cov_rate_sqrt(grid.time(k))?;
        let mut args = hamiltonian_args(candidate, &root, p, k)?;
        let u_star = args.u.clone();
        let xa = random_state(&mut rng);
        let xb = random_state(&mut rng);
        let va = random_control(&mut rng, set, &u_star);
        let vb = random_control(&mut rng, set, &u_star);
        let mut eval = |x: &StateVec, v: &ControlVec| -> Result<f64> {
            args.x = x.clone();
            args.u = v.clone();
            hamiltonian_with_root(problem, &root, &args)
        };
        let ha = eval(&xa, &va)?;
        let hb = eval(&xb, &vb)?;
        let hm = eval(&((&xa + &xb) * 0.5), &((&va + &vb) * 0.5))?;
        let excess = hm - 0.5 * (ha + hb);
        if excess > joint.worst_excess {
            joint.worst_excess = excess;
        }
        if excess > CONVEXITY_TOL * (1.0 + ha.abs() + hb.abs()) && joint.witness.is_none() {
            joint.passed = false;
            let stack = |x: &StateVec, v: &ControlVec| {
                x.iter().chain(v.iter()).copied().collect::<Vec<_>>()
            };
            joint.witness = Some((stack(&xa, &va), stack(&xb, &vb)));
        }
    }

    let minimum = necessary_check(problem, driver, candidate, probes, plan, allowance)?;
    Ok(SufficiencyReport {
        applicable: true,
        terminal_convexity: Some(terminal),
        hamiltonian_convexity: Some(joint),
        minimum_condition: Some(minimum),
    })
}

/// Spike-perturbation convergence measurements over an ε ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub ladder: Vec<f64>,
    /// `E sup_t |X_ε(t) − X*(t)|²` per ε.
    pub sup_deviation: Vec<Estimate>,
    /// `E|ξ_ε(T)|²` with `ξ_ε = (X_ε − X*)/ε − p`, per ε.
    pub xi_terminal: Vec<Estimate>,
    /// Log-log slope of the sup-deviation against ε.
    pub sup_slope: f64,
    /// Paths on which `X_ε(t) ≠ X*(t)` for some `t ≤ t₀`.
    pub locality_violations: usize,
}

impl RateReport {
    pub fn xi_strictly_decreasing(&self) -> bool {
        self.xi_terminal.windows(2).all(|w| w[1].mean < w[0].mean)
    }

    /// Last over first `E|ξ_ε(T)|²`.
    pub fn xi_ratio(&self) -> f64 {
        match (self.xi_terminal.first(), self.xi_terminal.last()) {
            (Some(a), Some(b)) if a.mean > 0.0 => b.mean / a.mean,
            _ => 0.0,
        }
    }

    /// CSV with columns `eps,sup_dev,sup_dev_se,xi_T,xi_T_se`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps,sup_dev,sup_dev_se,xi_T,xi_T_se\n");
        for (i, e) in self.ladder.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e,
                self.sup_deviation[i].mean,
                self.sup_deviation[i].std_err,
                self.xi_terminal[i].mean,
                self.xi_terminal[i].std_err
            ));
        }
        out
    }
}

/// Per path: sup deviations and `|ξ(T)|²` per ε, and whether the prefix was untouched.
type PathRates = (Vec<f64>, Vec<f64>, bool);

/// Measures `E sup|X_ε − X*|²` and `E|ξ_ε(T)|²` for spikes `(t0, ε, v)` over `ladder`.
pub fn rate_experiments(
    problem: &dyn ControlProblem,
    candidate: &CandidatePair,
    t0: f64,
    v: &ControlVec,
    ladder: &[f64],
    bundle: &NoiseBundle,
    fault: VariationalFault,
) -> Result<RateReport> {
    candidate.check_bundle(bundle)?;
    if ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Precondition(
            "the eps ladder must be strictly decreasing".into(),
        ));
    }
    let grid = bundle.grid();
    let n = problem.state_dim();
    let steps = grid.steps();
    let specs: Vec<SpikeSpec> = ladder
        .iter()
        .map(|&e| SpikeSpec::new(t0, e, v.clone()))
        .collect();
    let policies = specs
        .iter()
        .map(|s| apply_spike(&candidate.policy, s, grid))
        .collect::<Result<Vec<_>>>()?;
    let start = specs
        .first()
        .map(|s| s.window(grid))
        .transpose()?
        .map_or(0, |w| w.start);
    let traj = &candidate.trajectories;

    let per_path: Vec<Result<PathRates>> = (0..bundle.paths())
        .into_par_iter()
        .map(|p| {
            let states = traj.path_states(p);
            let mut pv =
                variational_path(problem, states, traj.path_controls(p), bundle, p, start, v);
            pv.iter_mut().for_each(|x| *x *= fault.scale);
            let mut sups = Vec::with_capacity(ladder.len());
            let mut xis = Vec::with_capacity(ladder.len());
            let mut local = true;
            for (policy, &eps) in policies.iter().zip(ladder) {
                let run = integrate_path(problem, policy, bundle, p, &candidate.x0)?;
                let mut sup = 0.0f64;
                for k in 0..=steps {
                    let d: f64 = (0..n)
                        .map(|i| (run.states[k * n + i] - states[k * n + i]).powi(2))
                        .sum();
                    if k <= start && d != 0.0 {
                        local = false;
                    }
                    sup = sup.max(d);
                }
                let xi: f64 = (0..n)
                    .map(|i| {
                        let off = steps * n + i;
                        ((run.states[off] - states[off]) / eps - pv[off]).powi(2)
                    })
                    .sum();
                sups.push(sup);
                xis.push(xi);
            }
            Ok((sups, xis, local))
        })
        .collect();
    let mut sup_cols = vec![Vec::with_capacity(bundle.paths()); ladder.len()];
    let mut xi_cols = vec![Vec::with_capacity(bundle.paths()); ladder.len()];
    let mut violations = 0;
    for r in per_path {
        let (sups, xis, local) = r?;
        for (i, (s, x)) in sups.into_iter().zip(xis).enumerate() {
            sup_cols[i].push(s);
            xi_cols[i].push(x);
        }
        if !local {
            violations += 1;
        }
    }
    let sup_deviation: Vec<Estimate> = sup_cols.iter().map(|c| Estimate::from_samples(c)).collect();
    let xi_terminal: Vec<Estimate> = xi_cols.iter().map(|c| Estimate::from_samples(c)).collect();
    let means: Vec<f64> = sup_deviation.iter().map(|e| e.mean).collect();
    let sup_slope = if ladder.len() >= 2 && means.iter().all(|m| *m > 0.0) {
        log_log_slope(ladder, &means)
    } else {
        f64::NAN
    };
    Ok(RateReport {
        ladder: ladder.to_vec(),
        sup_deviation,
        xi_terminal,
        sup_slope,
        locality_violations: violations,
    })
}
