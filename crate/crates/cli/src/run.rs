//! Scenario dispatch and artifact emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use martingale_pmp::adjoint::AdjointSolution;
use martingale_pmp::dynamics::{
    finite_diff_check, ControlProblem, DerivativeProbe, TrajectoryBundle,
};
use martingale_pmp::hilbert::{ControlVec, Operator, StateVec};
use martingale_pmp::martingale::{path_rng, sample_increments, verify_isometry, PathGrid};
use martingale_pmp::pmp::MarginReport;
use martingale_pmp::problems::{BilinearProblem, FaultyDerivative};
use martingale_pmp::report::ScenarioReport;
use martingale_pmp::scenarios::{
    margin_study, run_example1, run_example2, run_gateaux, run_rates, sufficiency_study,
    DriverSpec, Example1Setup,
};
use rand::RngExt;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Scenario};

/// Why a run did not produce a verdict.
#[derive(Debug)]
pub enum RunError {
    /// A module rejected its inputs or the numerics broke down.
    Numerical(String),
    Io(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Numerical(m) => write!(f, "numerical failure: {m}"),
            RunError::Io(m) => write!(f, "i/o failure: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<martingale_pmp::Error> for RunError {
    fn from(e: martingale_pmp::Error) -> Self {
        RunError::Numerical(e.to_string())
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e.to_string())
    }
}

pub const EXIT_PASS: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug)]
pub struct RunOutcome {
    pub report: ScenarioReport,
    /// Files written, relative to the output directory; the manifest comes last.
    pub files: Vec<String>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.report.passed() {
            EXIT_PASS
        } else {
            EXIT_ASSERTION
        }
    }
}

/// Hex SHA-256 of the configuration text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn write(&mut self, name: &str, contents: &str) -> Result<(), RunError> {
        fs::write(self.dir.join(name), contents)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

/// Runs the configured scenario, writing the report, CSVs and a manifest to `out_dir`.
///
/// `config_text` is hashed into the manifest.
pub fn run(
    config: &ExperimentConfig,
    config_text: &str,
    out_dir: &Path,
) -> Result<RunOutcome, RunError> {
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    let mut art = Artifacts {
        dir: out_dir.to_path_buf(),
        files: Vec::new(),
    };
    log::info!(
        "running {} with seed {}",
        config.scenario.name(),
        config.seed
    );
    let mut report = match config.scenario {
        Scenario::Example1 => example1(config, &mut art)?,
        Scenario::Example2 => example2(config, &mut art)?,
        Scenario::Rates => {
            let (report, rates) = run_rates(&config.example1)?;
            art.write("rates.csv", &rates.to_csv())?;
            report
        }
        Scenario::Gateaux => {
            let (report, g) = run_gateaux(&config.example1)?;
            let mut csv = String::from("eps,fd,fd_se,gap,gap_se,adjoint_side,adjoint_side_se\n");
            for ((eps, fd), (_, gap)) in g.finite_differences.iter().zip(&g.paired_gaps) {
                let _ = writeln!(
                    csv,
                    "{eps},{},{},{},{},{},{}",
                    fd.mean,
                    fd.std_err,
                    gap.mean,
                    gap.std_err,
                    g.adjoint_side.mean,
                    g.adjoint_side.std_err
                );
            }
            art.write("gateaux.csv", &csv)?;
            report
        }
        Scenario::PmpCheck => {
            let setup = Example1Setup::build(&config.example1)?;
            let mut report = ScenarioReport::new("pmp-check");
            let margins = margin_study(&setup, &mut report)?;
            art.write("margins.csv", &margins.to_csv())?;
            report
        }
        Scenario::Sufficiency => {
            let setup = Example1Setup::build(&config.example1)?;
            let mut report = ScenarioReport::new("sufficiency");
            let suff = sufficiency_study(&setup, &mut report)?;
            if let Some(m) = &suff.minimum_condition {
                art.write("margins.csv", &m.to_csv())?;
            }
            report
        }
        Scenario::Isometry => isometry(config, &mut art)?,
        Scenario::DerivativeCheck => derivative_check(config, &mut art)?,
    };
    if config.faults.any() {
        report
            .section("faults")
            .put("injected", format!("{:?}", config.faults));
    }
    art.write("report.txt", &report.to_string())?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "tool = \"mpmp\"");
    let _ = writeln!(manifest, "version = \"{}\"", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(manifest, "scenario = \"{}\"", config.scenario.name());
    let _ = writeln!(manifest, "config_hash = \"{}\"", config_hash(config_text));
    let _ = writeln!(manifest, "seed = {}", config.seed);
    let _ = writeln!(manifest, "paths = {}", config.paths);
    let _ = writeln!(manifest, "steps = {}", config.steps);
    let _ = writeln!(manifest, "horizon = {:?}", config.horizon);
    let _ = writeln!(manifest, "threads = {}", rayon::current_num_threads());
    let _ = writeln!(manifest, "passed = {}", report.passed());
    let _ = writeln!(
        manifest,
        "wall_time_s = {:?}",
        start.elapsed().as_secs_f64()
    );
    let files: Vec<String> = art.files.iter().map(|f| format!("\"{f}\"")).collect();
    let _ = writeln!(
        manifest,
        "files = [{}, \"manifest.toml\"]",
        files.join(", ")
    );
    art.write("manifest.toml", &manifest)?;
    Ok(RunOutcome {
        report,
        files: art.files,
    })
}

/// First `n` paths of a trajectory bundle: `path,step,time,x0..,u0..`
/// (controls empty at the final time).
pub fn trajectory_csv(traj: &TrajectoryBundle, n: usize) -> String {
    let mut out = String::from("path,step,time");
    for i in 0..traj.dim() {
        let _ = write!(out, ",x{i}");
    }
    for i in 0..traj.control_dim() {
        let _ = write!(out, ",u{i}");
    }
    out.push('\n');
    let grid = traj.grid();
    for p in 0..n.min(traj.paths()) {
        for k in 0..=grid.steps() {
            let _ = write!(out, "{p},{k},{}", grid.time(k));
            for v in traj.state(p, k).iter() {
                let _ = write!(out, ",{v}");
            }
            for i in 0..traj.control_dim() {
                if k < grid.steps() {
                    let _ = write!(out, ",{}", traj.control(p, k)[i]);
                } else {
                    out.push(',');
                }
            }
            out.push('\n');
        }
    }
    out
}

/// First `n` paths of an adjoint solution: `path,step,time,y..,z..` (Z column-major).
pub fn adjoint_csv(adj: &AdjointSolution, n: usize) -> String {
    let d = adj.dim();
    let mut out = String::from("path,step,time");
    for i in 0..d {
        let _ = write!(out, ",y{i}");
    }
    for j in 0..d {
        for i in 0..d {
            let _ = write!(out, ",z{i}{j}");
        }
    }
    out.push('\n');
    let grid = adj.grid();
    let paths = if adj.is_constant() {
        1
    } else {
        n.min(adj.paths())
    };
    for p in 0..paths {
        for k in 0..=grid.steps() {
            let _ = write!(out, "{p},{k},{}", grid.time(k));
            for v in adj.y(p, k).iter() {
                let _ = write!(out, ",{v}");
            }
            for v in adj.z(p, k).iter() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

fn margins_csv(m: &MarginReport) -> String {
    m.to_csv()
}

fn example1(config: &ExperimentConfig, art: &mut Artifacts) -> Result<ScenarioReport, RunError> {
    let out = run_example1(&config.example1)?;
    art.write("margins.csv", &margins_csv(&out.margins))?;
    let mut spikes = String::from("t0,eps");
    for i in 0..out.setup.u_star.len() {
        let _ = write!(spikes, ",v{i}");
    }
    spikes.push_str(",separation,gap,gap_se\n");
    for r in &out.spikes {
        let _ = write!(spikes, "{},{}", r.spec.t0, r.spec.eps);
        for v in r.spec.v.iter() {
            let _ = write!(spikes, ",{v}");
        }
        let _ = writeln!(spikes, ",{},{},{}", r.separation, r.gap.mean, r.gap.std_err);
    }
    art.write("spikes.csv", &spikes)?;
    art.write(
        "trajectories.csv",
        &trajectory_csv(&out.setup.candidate.trajectories, config.dump_paths),
    )?;
    if let Some(adj) = &out.setup.candidate.adjoint {
        art.write("adjoint.csv", &adjoint_csv(adj, config.dump_paths))?;
    }
    Ok(out.report)
}

fn example2(config: &ExperimentConfig, art: &mut Artifacts) -> Result<ScenarioReport, RunError> {
    let out = run_example2(&config.example2)?;
    let mut csv =
        String::from("sweep,residual_rms,cost,cost_se,cost_change,cost_change_se,n_relative\n");
    for (i, s) in out.sweeps.iter().enumerate() {
        let (ch, ch_se) = s.cost_change.map_or((String::new(), String::new()), |c| {
            (c.mean.to_string(), c.std_err.to_string())
        });
        let _ = writeln!(
            csv,
            "{i},{},{},{},{ch},{ch_se},{}",
            s.residual_rms, s.cost.mean, s.cost.std_err, s.n_relative
        );
    }
    art.write("sweeps.csv", &csv)?;
    art.write(
        "trajectories.csv",
        &trajectory_csv(&out.last.trajectories, config.dump_paths),
    )?;
    if let Some(adj) = &out.last.adjoint {
        art.write("adjoint.csv", &adjoint_csv(adj, config.dump_paths))?;
    }
    Ok(out.report)
}

fn isometry(config: &ExperimentConfig, art: &mut Artifacts) -> Result<ScenarioReport, RunError> {
    let ex = &config.example1;
    let driver = DriverSpec {
        direction: ex.beta.clone(),
        alpha0: ex.alpha0,
        alpha1: ex.alpha1,
    }
    .build(ex.horizon)?;
    let grid = PathGrid::new(ex.horizon, ex.steps)?;
    let bundle = sample_increments(&driver, &grid, ex.paths, ex.seed)?;
    let n = ex.beta.len();
    let iso = verify_isometry(|_| Operator::identity(n, n), &driver, &bundle)?;
    let t = ex.horizon;
    let exact = ex.beta.norm_squared() * (ex.alpha0 * t + 0.5 * ex.alpha1 * t * t);
    let mut report = ScenarioReport::new("isometry");
    report
        .section("isometry")
        .put("integrand", "identity")
        .estimate("mc", iso.mc)
        .put("quadrature", iso.quadrature)
        .put("exact", exact);
    report.check(
        "isometry_exact",
        (iso.mc.mean - exact).abs() <= 3.0 * iso.mc.std_err,
        format!(
            "|{} - {exact}| vs 3 SE = {}",
            iso.mc.mean,
            3.0 * iso.mc.std_err
        ),
    );
    report.check(
        "quadrature_matches_exact",
        (iso.quadrature - exact).abs() <= 1e-10 * exact.abs().max(1.0),
        format!("quadrature = {}", iso.quadrature),
    );
    art.write(
        "isometry.csv",
        &format!(
            "quantity,value,se\nmc,{},{}\nquadrature,{},0\nexact,{exact},0\n",
            iso.mc.mean, iso.mc.std_err, iso.quadrature
        ),
    )?;
    Ok(report)
}

/// Seeded probe points: states from `N(0, 4)`, controls inside the problem's set.
pub fn derivative_probes(
    problem: &dyn ControlProblem,
    horizon: f64,
    count: usize,
    seed: u64,
) -> Vec<DerivativeProbe> {
    let mut rng = path_rng(seed, usize::MAX - 1);
    let (n, m) = (problem.state_dim(), problem.control_dim());
    (0..count)
        .map(|_| {
            let t = horizon * rng.random::<f64>();
            let x = StateVec::from_fn(n, |_, _| 4.0 * rng.random::<f64>() - 2.0);
            let mut u = ControlVec::from_fn(m, |_, _| 2.0 * rng.random::<f64>() - 1.0);
            if !problem.control_set().contains(&u) {
                u = ControlVec::zeros(m);
            }
            DerivativeProbe { t, x, u }
        })
        .collect()
}

fn derivative_check(
    config: &ExperimentConfig,
    art: &mut Artifacts,
) -> Result<ScenarioReport, RunError> {
    let setup_problem = |kappa: f64| -> Result<BilinearProblem, RunError> {
        let ex = &config.example1;
        let m = ex.f_tilde.ncols();
        let set = martingale_pmp::dynamics::ControlSet::Box {
            lower: ControlVec::from_element(m, -ex.control_bound),
            upper: ControlVec::from_element(m, ex.control_bound),
        };
        Ok(BilinearProblem::new(
            ex.beta.clone(),
            ex.c.clone(),
            ex.f_tilde.clone(),
            ex.g_tilde.clone(),
            set,
        )?
        .with_nonlinearity(kappa)
        .with_control_weight(ex.control_weight))
    };
    let kappa = if config.example1.nonlinearity != 0.0 {
        config.example1.nonlinearity
    } else {
        0.5
    };
    let mut problems: Vec<(String, Arc<dyn ControlProblem>)> = vec![
        ("bilinear".into(), Arc::new(setup_problem(0.0)?)),
        ("bilinear-nonlinear".into(), Arc::new(setup_problem(kappa)?)),
        (
            "linear-quadratic".into(),
            Arc::new(config.example2.problem()?),
        ),
    ];
    if let Some(fault) = config.faults.derivative {
        problems = problems
            .into_iter()
            .map(|(name, p)| {
                let wrapped: Arc<dyn ControlProblem> = Arc::new(FaultyDerivative {
                    inner: p,
                    target: fault.target,
                    offset: fault.offset,
                });
                (name, wrapped)
            })
            .collect();
    }
    let mut report = ScenarioReport::new("derivative-check");
    let mut csv = String::from("problem,derivative,relative_error\n");
    for (name, problem) in &problems {
        let probes = derivative_probes(problem.as_ref(), config.horizon, 20, config.seed);
        let d = finite_diff_check(problem.as_ref(), &probes)?;
        let s = report.section(name);
        for (deriv, err) in &d.errors {
            s.put(deriv, err);
            let _ = writeln!(csv, "{name},{deriv},{err}");
        }
        s.put("drift_x_bound", d.drift_x_bound)
            .put("drift_u_bound", d.drift_u_bound)
            .put("diffusion_x_bound", d.diffusion_x_bound)
            .put("terminal_growth", d.terminal_growth);
        report.check(
            &format!("{name}_derivatives"),
            d.passed(),
            if d.faults.is_empty() {
                "all within tolerance".to_string()
            } else {
                format!("mismatch in {}", d.faults.join(", "))
            },
        );
    }
    art.write("derivatives.csv", &csv)?;
    Ok(report)
}
