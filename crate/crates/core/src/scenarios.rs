//! Packaged experiments: the bilinear-noise example with an explicit optimal
//! control, and the linear-quadratic example solved by regression.

use std::sync::Arc;

use crate::adjoint::{solve_adjoint_explicit, solve_adjoint_lsmc, AdjointSolution};
use crate::dynamics::{
    evaluate_cost, integrate_forward, ControlPolicy, ControlProblem, ControlSet, SpikeSpec,
    TrajectoryBundle, MAX_PROBES,
};
use crate::error::{Error, Result};
use crate::hilbert::{ControlVec, Operator, StateVec};
use crate::martingale::{
    sample_increments, MartingaleDriver, NoiseBundle, PathGrid, ScalarIntensity,
};
use crate::pmp::{
    gateaux_check, hamiltonian_argmins, necessary_check, rate_experiments, spike_cost_gaps,
    sufficient_check, CandidatePair, GateauxReport, MarginReport, RateReport, SamplePlan,
    SufficiencyReport, VariationalFault,
};
use crate::problems::{BilinearProblem, LqProblem};
use crate::regression::RegressionBasis;
use crate::report::ScenarioReport;
use crate::stats::Estimate;

/// Spikes with `|v − u*|` below this are not expected to raise the cost.
pub const SPIKE_SEPARATION: f64 = 0.1;

/// Rank-one driver `M = β m` with `⟨m⟩(t) = ∫ (alpha0 + alpha1·s) ds`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverSpec {
    pub direction: StateVec,
    pub alpha0: f64,
    pub alpha1: f64,
}

impl DriverSpec {
    pub fn build(&self, horizon: f64) -> Result<MartingaleDriver> {
        MartingaleDriver::rank_one(
            self.direction.clone(),
            ScalarIntensity::affine(self.alpha0, self.alpha1, horizon),
            horizon,
        )
    }
}

/// Configuration of the bilinear-noise example and the experiments built on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Example1Config {
    pub beta: StateVec,
    pub c: StateVec,
    pub f_tilde: Operator,
    pub g_tilde: Operator,
    pub alpha0: f64,
    pub alpha1: f64,
    pub x0: StateVec,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    /// Controls live in `[-bound, bound]^m`.
    pub control_bound: f64,
    /// `κ` in `F = F̃u + κ tanh(x)`; nonzero values disable the explicit adjoint.
    pub nonlinearity: f64,
    /// Weight of `|u|²`; `-1` is the concave fault injection.
    pub control_weight: f64,
    /// Empty means the default family from [`default_spikes`].
    pub spikes: Vec<SpikeSpec>,
    pub probes_per_dim: usize,
    pub sample_times: usize,
    pub sample_paths: usize,
    pub convexity_pairs: usize,
    /// Spike start and value for the rate and derivative experiments; `None`
    /// value means `u* + (1, -1, 1, …)`.
    pub probe_t0: f64,
    pub probe_v: Option<ControlVec>,
    pub eps_ladder: Vec<f64>,
    /// Scale applied to the variational process (fault injection when ≠ 1).
    pub p_scale: f64,
}

impl Default for Example1Config {
    fn default() -> Self {
        #[rustfmt::skip]
        let f_tilde = Operator::from_row_slice(4, 2, &[
            1.0, 0.0,
            0.5, 1.0,
            0.0, -0.7,
            0.3, 0.4,
        ]);
        #[rustfmt::skip]
        let g_tilde = Operator::from_row_slice(4, 4, &[
            0.5, 0.1, 0.0, 0.0,
            0.0, 0.5, 0.05, 0.0,
            0.1, 0.0, 0.5, 0.0,
            0.0, 0.0, 0.15, 0.5,
        ]);
        Self {
            beta: StateVec::from_vec(vec![0.6, -0.4, 0.3, 0.2]),
            c: StateVec::from_vec(vec![1.0, -0.5, 0.8, 0.3]),
            f_tilde,
            g_tilde,
            alpha0: 1.0,
            alpha1: 0.5,
            x0: StateVec::from_vec(vec![1.0, 0.0, -0.5, 0.5]),
            horizon: 1.0,
            steps: 400,
            paths: 20_000,
            seed: 20_240_601,
            control_bound: 2.0,
            nonlinearity: 0.0,
            control_weight: 1.0,
            spikes: Vec::new(),
            probes_per_dim: 11,
            sample_times: 20,
            sample_paths: 100,
            convexity_pairs: 1000,
            probe_t0: 0.2,
            probe_v: None,
            eps_ladder: vec![0.2, 0.1, 0.05, 0.025],
            p_scale: 1.0,
        }
    }
}

/// 24 spikes: starts `{0.1, 0.3, 0.5, 0.7}·T`, widths `{0.05, 0.1}·T`, three
/// values offset from `u_star`, each clipped into the box.
pub fn default_spikes(u_star: &ControlVec, bound: f64, grid: &PathGrid) -> Vec<SpikeSpec> {
    let m = u_star.len();
    let offsets: Vec<ControlVec> = vec![
        ControlVec::from_fn(m, |i, _| if i == 0 { 1.0 } else { 0.0 }),
        ControlVec::from_fn(m, |i, _| if i == m - 1 { -1.0 } else { 0.0 }),
        ControlVec::from_element(m, 0.6),
    ];
    let snap = |t: f64| grid.time((t / grid.dt()).round() as usize);
    let mut out = Vec::new();
    for frac in [0.1, 0.3, 0.5, 0.7] {
        for width in [0.05, 0.1] {
            for off in &offsets {
                let v = (u_star + off).map(|x| x.clamp(-bound, bound));
                let eps = snap(width * grid.horizon()).max(grid.dt());
                out.push(SpikeSpec::new(snap(frac * grid.horizon()), eps, v));
            }
        }
    }
    out
}

/// Problem, driver, noise and candidate of the bilinear-noise example.
pub struct Example1Setup {
    pub config: Example1Config,
    pub problem: BilinearProblem,
    pub driver: MartingaleDriver,
    pub grid: PathGrid,
    pub bundle: NoiseBundle,
    pub candidate: CandidatePair,
    pub u_star: ControlVec,
}

impl Example1Setup {
    pub fn build(config: &Example1Config) -> Result<Self> {
        let m = config.f_tilde.ncols();
        if !(config.control_bound > 0.0) {
            return Err(Error::Precondition("control_bound must be positive".into()));
        }
        let set = ControlSet::Box {
            lower: ControlVec::from_element(m, -config.control_bound),
            upper: ControlVec::from_element(m, config.control_bound),
        };
        let problem = BilinearProblem::new(
            config.beta.clone(),
            config.c.clone(),
            config.f_tilde.clone(),
            config.g_tilde.clone(),
            set,
        )?
        .with_nonlinearity(config.nonlinearity)
        .with_control_weight(config.control_weight);
        let u_star = problem.candidate_control();
        if !problem.set.contains(&u_star) {
            return Err(Error::Precondition(format!(
                "the candidate control {:?} lies outside the box of half-width {}",
                u_star.as_slice(),
                config.control_bound
            )));
        }
        let grid = PathGrid::new(config.horizon, config.steps)?;
        let driver = DriverSpec {
            direction: config.beta.clone(),
            alpha0: config.alpha0,
            alpha1: config.alpha1,
        }
        .build(config.horizon)?;
        let bundle = sample_increments(&driver, &grid, config.paths, config.seed)?;
        let policy = ControlPolicy::constant(u_star.clone(), config.steps);
        let trajectories = integrate_forward(&problem, &policy, &bundle, &config.x0)?;
        let adjoint = if config.nonlinearity == 0.0 {
            Some(solve_adjoint_explicit(&problem, &driver, &grid)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            candidate: CandidatePair {
                policy,
                x0: config.x0.clone(),
                trajectories,
                adjoint,
            },
            problem,
            driver,
            grid,
            bundle,
            u_star,
        })
    }

    /// Closed-form `E[J(u*)]`, meaningful for the unperturbed linear problem.
    pub fn analytic_cost(&self) -> Option<f64> {
        (self.config.nonlinearity == 0.0 && self.config.control_weight == 1.0).then(|| {
            self.problem
                .optimal_value(&self.config.x0, self.config.horizon)
        })
    }

    pub fn probes(&self) -> Result<Vec<ControlVec>> {
        self.problem
            .set
            .probe_grid(self.config.probes_per_dim, MAX_PROBES)
    }

    pub fn sample_plan(&self) -> SamplePlan {
        SamplePlan::spread(
            &self.candidate,
            self.config.sample_times,
            self.config.sample_paths,
        )
    }

    /// Spike value used by the rate and derivative experiments.
    pub fn probe_value(&self) -> ControlVec {
        self.config.probe_v.clone().unwrap_or_else(|| {
            let b = self.config.control_bound;
            ControlVec::from_fn(self.u_star.len(), |i, _| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                (self.u_star[i] + sign).clamp(-b, b)
            })
        })
    }

    pub fn fault(&self) -> VariationalFault {
        VariationalFault {
            scale: self.config.p_scale,
        }
    }
}

/// Cost gap of one spike.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeRow {
    pub spec: SpikeSpec,
    /// `J(u_ε) − J(u*)`, paired over common noise.
    pub gap: Estimate,
    /// `|v − u*|`, the distance from the candidate value.
    pub separation: f64,
}

pub struct Example1Outcome {
    pub report: ScenarioReport,
    pub spikes: Vec<SpikeRow>,
    pub margins: MarginReport,
    pub sufficiency: SufficiencyReport,
    pub setup: Example1Setup,
}

fn cost_section(setup: &Example1Setup, report: &mut ScenarioReport) -> Estimate {
    let cost = evaluate_cost(&setup.problem, &setup.candidate.trajectories).estimate;
    let s = report.section("cost");
    s.estimate("mc", cost);
    s.put("u_star", format!("{:?}", setup.u_star.as_slice()));
    if let Some(analytic) = setup.analytic_cost() {
        s.put("analytic", analytic);
        s.put("difference", cost.mean - analytic);
        let ok =
            (cost.mean - analytic).abs() <= 3.0 * cost.std_err + 1e-12 * (1.0 + analytic.abs());
        report.check(
            "cost_matches_analytic",
            ok,
            format!(
                "|{} - {}| vs 3 SE = {}",
                cost.mean,
                analytic,
                3.0 * cost.std_err
            ),
        );
    }
    cost
}

fn describe_setup(setup: &Example1Setup, report: &mut ScenarioReport) {
    let cfg = &setup.config;
    report
        .section("setup")
        .put("state_dim", setup.problem.state_dim())
        .put("control_dim", setup.problem.control_dim())
        .put("horizon", cfg.horizon)
        .put("steps", cfg.steps)
        .put("paths", cfg.paths)
        .put("seed", cfg.seed)
        .put("alpha", format!("{} + {}*t", cfg.alpha0, cfg.alpha1))
        .put("nonlinearity", cfg.nonlinearity)
        .put("control_weight", cfg.control_weight);
}

/// Spike costs under common noise: every gap must be `≥ −3 SE`, and at least
/// 90% of the spikes separated from `u*` must raise the cost beyond 1 SE.
pub fn spike_study(setup: &Example1Setup, report: &mut ScenarioReport) -> Result<Vec<SpikeRow>> {
    let specs = if setup.config.spikes.is_empty() {
        default_spikes(&setup.u_star, setup.config.control_bound, &setup.grid)
    } else {
        setup.config.spikes.clone()
    };
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let gaps = spike_cost_gaps(&setup.problem, &setup.candidate, &spec, &setup.bundle)?;
        rows.push(SpikeRow {
            separation: (&spec.v - &setup.u_star).norm(),
            gap: Estimate::from_samples(&gaps),
            spec,
        });
    }
    let worst = rows
        .iter()
        .map(|r| r.gap.mean + 3.0 * r.gap.std_err)
        .fold(f64::INFINITY, f64::min);
    let nonneg = rows.iter().all(|r| r.gap.mean >= -3.0 * r.gap.std_err);
    let separated: Vec<&SpikeRow> = rows
        .iter()
        .filter(|r| r.separation >= SPIKE_SEPARATION)
        .collect();
    let strict = separated
        .iter()
        .filter(|r| r.gap.mean > r.gap.std_err)
        .count();
    let fraction = if separated.is_empty() {
        1.0
    } else {
        strict as f64 / separated.len() as f64
    };
    let s = report.section("spikes");
    s.put("count", rows.len())
        .put("separated", separated.len())
        .put("strictly_positive", strict)
        .put("strict_fraction", fraction)
        .put("min_gap_plus_3se", worst);
    for (i, r) in rows.iter().enumerate() {
        s.put(
            &format!("spike{i}"),
            format!(
                "t0={} eps={} v={:?} gap={} se={}",
                r.spec.t0,
                r.spec.eps,
                r.spec.v.as_slice(),
                r.gap.mean,
                r.gap.std_err
            ),
        );
    }
    report.check(
        "spikes_do_not_lower_cost",
        nonneg,
        format!("{} spikes, min(gap + 3 SE) = {worst}", rows.len()),
    );
    report.check(
        "spikes_strictly_raise_cost",
        fraction >= 0.9,
        format!("{strict}/{} separated spikes above 1 SE", separated.len()),
    );
    Ok(rows)
}

/// Minimum condition plus argmin consistency with the probe nearest `u*`.
pub fn margin_study(setup: &Example1Setup, report: &mut ScenarioReport) -> Result<MarginReport> {
    let probes = setup.probes()?;
    let plan = setup.sample_plan();
    let margins = necessary_check(
        &setup.problem,
        &setup.driver,
        &setup.candidate,
        &probes,
        &plan,
        0.0,
    )?;
    report
        .section("margins")
        .put("probes", probes.len())
        .put("sampled_times", plan.steps.len())
        .put("sampled_paths", plan.paths.len())
        .put("min_gap", margins.min_gap)
        .put("negative_fraction", margins.negative_fraction)
        .put("tolerance", margins.tolerance);
    report.check(
        "minimum_condition",
        margins.passed(),
        format!("min dH = {} vs -{}", margins.min_gap, margins.tolerance),
    );
    let target = setup.u_star.clone();
    let nearest = probes
        .iter()
        .enumerate()
        .min_by(|a, b| {
            (a.1 - &target)
                .norm()
                .partial_cmp(&(b.1 - &target).norm())
                .expect("finite probes")
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let argmins = hamiltonian_argmins(
        &setup.problem,
        &setup.driver,
        &setup.candidate,
        &probes,
        &plan,
    )?;
    let consistent = argmins.iter().filter(|(_, _, i)| *i == nearest).count();
    report.section("margins").put(
        "argmin_consistent",
        format!("{consistent}/{}", argmins.len()),
    );
    if setup.config.control_weight > 0.0 {
        report.check(
            "argmin_nearest_candidate",
            consistent == argmins.len(),
            format!("{consistent} of {} sampled points", argmins.len()),
        );
    }
    Ok(margins)
}

pub fn sufficiency_study(
    setup: &Example1Setup,
    report: &mut ScenarioReport,
) -> Result<SufficiencyReport> {
    let probes = setup.probes()?;
    let plan = setup.sample_plan();
    let suff = sufficient_check(
        &setup.problem,
        &setup.driver,
        &setup.candidate,
        &probes,
        &plan,
        setup.config.convexity_pairs,
        setup.config.seed,
        0.0,
    )?;
    let s = report.section("sufficiency");
    s.put("applicable", suff.applicable);
    if let Some(c) = &suff.terminal_convexity {
        s.put("terminal_convex", c.passed)
            .put("terminal_worst_excess", c.worst_excess);
    }
    if let Some(c) = &suff.hamiltonian_convexity {
        s.put("hamiltonian_convex", c.passed)
            .put("hamiltonian_worst_excess", c.worst_excess);
        if let Some((a, b)) = &c.witness {
            s.put("witness_a", format!("{a:?}"))
                .put("witness_b", format!("{b:?}"));
        }
    }
    if let Some(m) = &suff.minimum_condition {
        s.put("minimum_condition", m.passed())
            .put("min_gap", m.min_gap);
    }
    report.check(
        "sufficient_conditions",
        suff.passed(),
        format!("applicable = {}", suff.applicable),
    );
    Ok(suff)
}

/// Full bilinear-noise example: cost vs closed form, spikes, minimum condition, sufficiency.
pub fn run_example1(config: &Example1Config) -> Result<Example1Outcome> {
    let setup = Example1Setup::build(config)?;
    let mut report = ScenarioReport::new("example1");
    describe_setup(&setup, &mut report);
    cost_section(&setup, &mut report);
    let spikes = spike_study(&setup, &mut report)?;
    let margins = margin_study(&setup, &mut report)?;
    let sufficiency = sufficiency_study(&setup, &mut report)?;
    Ok(Example1Outcome {
        report,
        spikes,
        margins,
        sufficiency,
        setup,
    })
}

/// Cost derivative along the probe spike: finite differences at the two
/// smallest ladder widths against the variational side.
pub fn run_gateaux(config: &Example1Config) -> Result<(ScenarioReport, GateauxReport)> {
    let setup = Example1Setup::build(config)?;
    let mut report = ScenarioReport::new("gateaux");
    describe_setup(&setup, &mut report);
    let mut ladder = config.eps_ladder.clone();
    ladder.sort_by(|a, b| a.partial_cmp(b).expect("finite eps"));
    let eps: Vec<f64> = ladder.iter().take(2).copied().collect();
    let smallest = *eps
        .first()
        .ok_or_else(|| Error::Precondition("empty eps ladder".into()))?;
    let spec = SpikeSpec::new(config.probe_t0, smallest, setup.probe_value());
    let g = gateaux_check(
        &setup.problem,
        &setup.candidate,
        &spec,
        &eps,
        &setup.bundle,
        setup.fault(),
    )?;
    let s = report.section("gateaux");
    s.put("t0", spec.t0)
        .put("v", format!("{:?}", spec.v.as_slice()));
    s.estimate("adjoint_side", g.adjoint_side);
    for ((e, fd), (_, gap)) in g.finite_differences.iter().zip(&g.paired_gaps) {
        s.estimate(&format!("fd_eps_{e}"), *fd);
        s.estimate(&format!("gap_eps_{e}"), *gap);
    }
    if let Some(x) = g.extrapolated {
        s.put("extrapolated", x);
    }
    report.check(
        "gateaux_identity",
        g.agrees(3.0),
        format!(
            "3 SE + {}·eps·|value| at eps = {smallest}",
            crate::pmp::GATEAUX_BIAS_PER_EPS
        ),
    );
    if setup.candidate.adjoint.is_some() {
        report.check(
            "derivative_nonnegative_at_optimum",
            g.adjoint_side.mean >= -3.0 * g.adjoint_side.std_err,
            format!("adjoint side = {}", g.adjoint_side.mean),
        );
    }
    Ok((report, g))
}

/// Spike convergence rates over the ladder.
pub fn run_rates(config: &Example1Config) -> Result<(ScenarioReport, RateReport)> {
    let setup = Example1Setup::build(config)?;
    let mut report = ScenarioReport::new("rates");
    describe_setup(&setup, &mut report);
    let v = setup.probe_value();
    let r = rate_experiments(
        &setup.problem,
        &setup.candidate,
        config.probe_t0,
        &v,
        &config.eps_ladder,
        &setup.bundle,
        setup.fault(),
    )?;
    report
        .section("rates")
        .put("t0", config.probe_t0)
        .put("v", format!("{:?}", v.as_slice()))
        .put("sup_slope", r.sup_slope)
        .put("xi_ratio", r.xi_ratio())
        .put("locality_violations", r.locality_violations);
    report.check(
        "sup_deviation_slope",
        r.sup_slope >= 1.5,
        format!("slope = {}", r.sup_slope),
    );
    report.check(
        "xi_decreasing",
        r.xi_strictly_decreasing() && r.xi_ratio() < 0.25,
        format!("last/first = {}", r.xi_ratio()),
    );
    report.check(
        "spike_locality",
        r.locality_violations == 0,
        format!("{} paths differ before t0", r.locality_violations),
    );
    Ok((report, r))
}

/// Initial policy of the linear-quadratic sweeps.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    Constant(ControlVec),
    Schedule(Vec<ControlVec>),
    /// `u = gain·x + offset`.
    LinearFeedback {
        gain: Operator,
        offset: ControlVec,
    },
}

impl PolicySpec {
    pub fn build(&self, steps: usize) -> ControlPolicy {
        match self {
            PolicySpec::Constant(u) => ControlPolicy::constant(u.clone(), steps),
            PolicySpec::Schedule(s) => ControlPolicy::OpenLoop(s.clone()),
            PolicySpec::LinearFeedback { gain, offset } => {
                let (gain, offset) = (gain.clone(), offset.clone());
                ControlPolicy::feedback(move |_, _, x| &gain * x + &offset)
            }
        }
    }
}

/// Configuration of the linear-quadratic example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example2Config {
    pub a: Operator,
    pub c: Operator,
    pub f: StateVec,
    pub gamma: StateVec,
    pub g_tilde: Operator,
    pub d: Operator,
    pub p: Operator,
    pub r: Operator,
    pub p1: Operator,
    pub driver: DriverSpec,
    pub x0: StateVec,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub basis_degree: usize,
    pub sweeps: usize,
    pub initial_policy: PolicySpec,
}

impl Default for Example2Config {
    /// Scalar reduction: `dX = (−X/2 + u)dt + ½dM`, `ℓ = u²`, `h = X²/4`.
    fn default() -> Self {
        let s = |v: f64| Operator::from_element(1, 1, v);
        Self {
            a: s(-0.5),
            c: s(1.0),
            f: StateVec::zeros(1),
            gamma: StateVec::zeros(1),
            g_tilde: s(0.0),
            d: s(0.5),
            p: s(0.0),
            r: s(2.0),
            p1: s(0.5),
            driver: DriverSpec {
                direction: StateVec::from_element(1, 1.0),
                alpha0: 1.0,
                alpha1: 0.5,
            },
            x0: StateVec::from_element(1, 1.0),
            horizon: 1.0,
            steps: 400,
            paths: 20_000,
            seed: 7,
            basis_degree: 1,
            sweeps: 3,
            initial_policy: PolicySpec::Constant(ControlVec::from_element(1, 1.0)),
        }
    }
}

/// One policy sweep of the linear-quadratic example.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    /// `sqrt(E mean_k |C*Y_k + R u_k|²)`.
    pub residual_rms: f64,
    pub cost: Estimate,
    /// Paired `J(this) − J(previous)`.
    pub cost_change: Option<Estimate>,
    pub n_relative: f64,
}

pub struct Example2Outcome {
    pub report: ScenarioReport,
    pub sweeps: Vec<SweepRecord>,
    pub problem: Arc<LqProblem>,
    pub driver: MartingaleDriver,
    pub bundle: NoiseBundle,
    /// Candidate of the initial policy.
    pub initial: CandidatePair,
    /// Candidate after the last sweep.
    pub last: CandidatePair,
}

impl Example2Config {
    pub fn problem(&self) -> Result<LqProblem> {
        LqProblem::new(
            self.a.clone(),
            self.c.clone(),
            self.f.clone(),
            self.gamma.clone(),
            self.g_tilde.clone(),
            self.d.clone(),
            self.p.clone(),
            self.r.clone(),
            self.p1.clone(),
        )
    }
}

fn stationarity_rms(
    problem: &LqProblem,
    traj: &TrajectoryBundle,
    adjoint: &AdjointSolution,
) -> f64 {
    let steps = traj.grid().steps();
    let mut total = 0.0;
    for p in 0..traj.paths() {
        for k in 0..steps {
            let y = adjoint.y(p, k).into_owned();
            let u = traj.control(p, k).into_owned();
            total += problem.stationarity_residual(&y, &u).norm_squared();
        }
    }
    (total / (traj.paths() * steps) as f64).sqrt()
}

/// Linear-quadratic example: regression adjoint along a policy, stationarity
/// residual, and policy sweeps `u ← −R⁻¹C*Ê[Y|X]`.
///
/// The sweeps are an added procedure exercising the stationarity relation;
/// they are not part of the optimality theory being checked.
pub fn run_example2(config: &Example2Config) -> Result<Example2Outcome> {
    let problem = Arc::new(config.problem()?);
    let grid = PathGrid::new(config.horizon, config.steps)?;
    let driver = config.driver.build(config.horizon)?;
    let bundle = sample_increments(&driver, &grid, config.paths, config.seed)?;
    let basis = RegressionBasis::new(config.basis_degree);
    let mut report = ScenarioReport::new("example2");
    report
        .section("setup")
        .put("state_dim", problem.state_dim())
        .put("control_dim", problem.control_dim())
        .put("horizon", config.horizon)
        .put("steps", config.steps)
        .put("paths", config.paths)
        .put("seed", config.seed)
        .put("basis_degree", config.basis_degree)
        .put("sweeps", config.sweeps)
        .put("policy_sweeps", "added procedure: u <- -R^-1 C* E[Y|X]");

    let mut policy = config.initial_policy.build(config.steps);
    let mut records: Vec<SweepRecord> = Vec::new();
    let mut previous_costs: Option<Vec<f64>> = None;
    let mut initial = None;
    let mut last = None;
    for sweep in 0..=config.sweeps {
        let traj = integrate_forward(problem.as_ref(), &policy, &bundle, &config.x0)?;
        let adjoint = solve_adjoint_lsmc(problem.as_ref(), &driver, &traj, &bundle, basis)?;
        let residual_rms = stationarity_rms(&problem, &traj, &adjoint);
        let cost = evaluate_cost(problem.as_ref(), &traj);
        let cost_change = previous_costs
            .as_ref()
            .map(|prev| Estimate::paired_difference(&cost.per_path, prev));
        let rec = SweepRecord {
            residual_rms,
            cost: cost.estimate,
            cost_change,
            n_relative: adjoint.diagnostics.relative(),
        };
        let s = report.section(&format!("sweep{sweep}"));
        s.put("residual_rms", rec.residual_rms)
            .estimate("cost", rec.cost);
        if let Some(ch) = rec.cost_change {
            s.estimate("cost_change", ch);
        }
        s.put("n_relative_energy", rec.n_relative);
        for w in &adjoint.diagnostics.warnings {
            s.put("warning", w);
        }
        records.push(rec);
        previous_costs = Some(cost.per_path);

        let fits: Vec<_> = (0..config.steps)
            .map(|k| {
                adjoint
                    .y_fit(k)
                    .cloned()
                    .expect("regression adjoint has fits")
            })
            .collect();
        let candidate = CandidatePair {
            policy: policy.clone(),
            x0: config.x0.clone(),
            trajectories: traj,
            adjoint: Some(adjoint),
        };
        if sweep == 0 {
            initial = Some(candidate.clone());
        }
        if sweep == config.sweeps {
            last = Some(candidate);
        } else {
            let prob = Arc::clone(&problem);
            policy =
                ControlPolicy::feedback(move |k, _, x| prob.stationary_control(&fits[k].eval(x)));
        }
    }

    let first = records[0].residual_rms;
    let final_res = records.last().map_or(first, |r| r.residual_rms);
    let ratio = if first > 0.0 { final_res / first } else { 0.0 };
    report
        .section("stationarity")
        .put("initial_rms", first)
        .put("final_rms", final_res)
        .put("ratio", ratio);
    if config.sweeps > 0 {
        report.check(
            "residual_decay",
            ratio < 0.05 || final_res < 1e-12,
            format!("final/initial = {ratio}"),
        );
        let monotone = records
            .iter()
            .filter_map(|r| r.cost_change)
            .all(|ch| ch.mean <= 2.0 * ch.std_err + 1e-12);
        report.check(
            "cost_non_increasing",
            monotone,
            "each sweep within 2 paired SE".to_string(),
        );
    }
    Ok(Example2Outcome {
        report,
        sweeps: records,
        problem,
        driver,
        bundle,
        initial: initial.expect("at least one sweep"),
        last: last.expect("at least one sweep"),
    })
}
