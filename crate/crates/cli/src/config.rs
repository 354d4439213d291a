//! Experiment configuration: TOML text with a fixed set of sections.
//!
//! Every problem with the text is collected before giving up, so a single
//! parse reports all invalid fields. Unknown keys are errors.

use std::fmt;
use std::path::PathBuf;

use martingale_pmp::dynamics::SpikeSpec;
use martingale_pmp::hilbert::{ControlVec, Operator, SpaceConfig, StateVec};
use martingale_pmp::martingale::PathGrid;
use martingale_pmp::problems::FaultTarget;
use martingale_pmp::scenarios::{Example1Config, Example2Config, PolicySpec};
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Example1,
    Example2,
    Rates,
    Gateaux,
    PmpCheck,
    Sufficiency,
    Isometry,
    DerivativeCheck,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::Example1,
        Scenario::Example2,
        Scenario::Rates,
        Scenario::Gateaux,
        Scenario::PmpCheck,
        Scenario::Sufficiency,
        Scenario::Isometry,
        Scenario::DerivativeCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Example1 => "example1",
            Scenario::Example2 => "example2",
            Scenario::Rates => "rates",
            Scenario::Gateaux => "gateaux",
            Scenario::PmpCheck => "pmp-check",
            Scenario::Sufficiency => "sufficiency",
            Scenario::Isometry => "isometry",
            Scenario::DerivativeCheck => "derivative-check",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Derivative corruption requested by `[faults] derivative = "..."`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeFault {
    pub target: FaultTarget,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Faults {
    /// Replaces `|u|²` by `−|u|²` in the bilinear problem.
    pub concave_cost: bool,
    /// Multiplies the variational process.
    pub p_scale: Option<f64>,
    pub derivative: Option<DerivativeFault>,
}

impl Faults {
    pub fn any(&self) -> bool {
        self.concave_cost || self.p_scale.is_some_and(|s| s != 1.0) || self.derivative.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub space: SpaceConfig,
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    pub horizon: f64,
    pub output_dir: Option<PathBuf>,
    /// Paths written to trajectory and adjoint dumps.
    pub dump_paths: usize,
    /// Bilinear-noise problem and the experiments on it.
    pub example1: Example1Config,
    /// Linear-quadratic problem.
    pub example2: Example2Config,
    pub faults: Faults,
}

impl ExperimentConfig {
    /// Replaces the seed everywhere it is used.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.example1.seed = seed;
        self.example2.seed = seed;
    }
}

/// All validation errors found in one parse.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

const TOP_KEYS: &[&str] = &[
    "scenario",
    "seed",
    "paths",
    "output_dir",
    "dump_paths",
    "space",
    "grid",
    "bilinear",
    "experiment",
    "lq",
    "faults",
];
const SPACE_KEYS: &[&str] = &["state_dim", "control_dim"];
const GRID_KEYS: &[&str] = &["steps", "horizon"];
const BILINEAR_KEYS: &[&str] = &[
    "beta",
    "c",
    "f_tilde",
    "g_tilde",
    "alpha",
    "x0",
    "control_bound",
    "nonlinearity",
];
const EXPERIMENT_KEYS: &[&str] = &[
    "probes_per_dim",
    "sample_times",
    "sample_paths",
    "convexity_pairs",
    "probe_t0",
    "probe_v",
    "eps_ladder",
    "spikes",
];
const LQ_KEYS: &[&str] = &[
    "a",
    "c",
    "f",
    "gamma",
    "g_tilde",
    "d",
    "p",
    "r",
    "p1",
    "direction",
    "alpha",
    "x0",
    "basis_degree",
    "sweeps",
    "open_loop",
    "feedback_gain",
    "feedback_offset",
];
const FAULT_KEYS: &[&str] = &["concave_cost", "p_scale", "derivative", "derivative_offset"];

/// Typed access to one table, recording every problem under a dotted key name.
struct Section<'a> {
    name: &'a str,
    table: Option<&'a Table>,
}

impl<'a> Section<'a> {
    fn new(root: &'a Table, name: &'a str, allowed: &[&str], errors: &mut Vec<String>) -> Self {
        let table = match root.get(name) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                errors.push(format!("{name}: expected a section"));
                None
            }
        };
        if let Some(t) = table {
            for key in t.keys() {
                if !allowed.contains(&key.as_str()) {
                    errors.push(format!("{name}.{key}: unknown key"));
                }
            }
        }
        Self { name, table }
    }

    fn field(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn raw(&self, key: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(key))
    }

    fn has(&self, key: &str) -> bool {
        self.raw(key).is_some()
    }

    fn float(&self, key: &str, errors: &mut Vec<String>) -> Option<f64> {
        let v = self.raw(key)?;
        let out = as_float(v);
        if out.is_none() {
            errors.push(format!("{}: expected a number", self.field(key)));
        }
        out
    }

    fn uint(&self, key: &str, errors: &mut Vec<String>) -> Option<usize> {
        match self.raw(key)? {
            Value::Integer(i) if *i >= 0 => Some(*i as usize),
            Value::Integer(_) => {
                errors.push(format!("{}: must be non-negative", self.field(key)));
                None
            }
            _ => {
                errors.push(format!("{}: expected an integer", self.field(key)));
                None
            }
        }
    }

    fn boolean(&self, key: &str, errors: &mut Vec<String>) -> Option<bool> {
        match self.raw(key)? {
            Value::Boolean(b) => Some(*b),
            _ => {
                errors.push(format!("{}: expected true or false", self.field(key)));
                None
            }
        }
    }

    fn string(&self, key: &str, errors: &mut Vec<String>) -> Option<&'a str> {
        match self.raw(key)? {
            Value::String(s) => Some(s),
            _ => {
                errors.push(format!("{}: expected a string", self.field(key)));
                None
            }
        }
    }

    fn vector(&self, key: &str, errors: &mut Vec<String>) -> Option<Vec<f64>> {
        let v = self.raw(key)?;
        let out = as_vector(v);
        if out.is_none() {
            errors.push(format!("{}: expected an array of numbers", self.field(key)));
        }
        out
    }

    fn matrix(&self, key: &str, errors: &mut Vec<String>) -> Option<Operator> {
        let v = self.raw(key)?;
        let out = as_matrix(v);
        if out.is_none() {
            errors.push(format!(
                "{}: expected a non-empty rectangular array of number rows",
                self.field(key)
            ));
        }
        out
    }
}

fn as_float(v: &Value) -> Option<f64> {
    match v {
        Value::Float(x) if x.is_finite() => Some(*x),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn as_vector(v: &Value) -> Option<Vec<f64>> {
    match v {
        Value::Array(items) => items.iter().map(as_float).collect(),
        _ => None,
    }
}

fn as_matrix(v: &Value) -> Option<Operator> {
    let Value::Array(rows) = v else { return None };
    let rows: Vec<Vec<f64>> = rows.iter().map(as_vector).collect::<Option<_>>()?;
    let ncols = rows.first()?.len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(Operator::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn check_len(errors: &mut Vec<String>, field: &str, len: usize, expected: usize) {
    if len != expected {
        errors.push(format!("{field}: has {len} entries, expected {expected}"));
    }
}

fn check_shape(errors: &mut Vec<String>, field: &str, m: &Operator, rows: usize, cols: usize) {
    if m.shape() != (rows, cols) {
        errors.push(format!(
            "{field}: is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        ));
    }
}

fn derivative_target(name: &str) -> Option<FaultTarget> {
    Some(match name {
        "F_x" => FaultTarget::DriftX,
        "F_u" => FaultTarget::DriftU,
        "G_x" => FaultTarget::DiffusionX,
        "l_x" => FaultTarget::RunningCostX,
        "l_u" => FaultTarget::RunningCostU,
        "h_x" => FaultTarget::TerminalCostX,
        _ => return None,
    })
}

/// Parses and validates a configuration.
///
/// Defaults: `state_dim = 4`, `control_dim = 2`, `steps = 400`, `horizon = 1`,
/// `paths = 20000`, `dump_paths = 10`, and the built-in problem parameters of
/// [`Example1Config`] and [`Example2Config`].
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let root: Table =
        toml::from_str(text).map_err(|e| ConfigErrors(vec![format!("syntax: {e}")]))?;
    let mut errors = Vec::new();
    for key in root.keys() {
        if !TOP_KEYS.contains(&key.as_str()) {
            errors.push(format!("{key}: unknown key"));
        }
    }
    let top = Section {
        name: "config",
        table: Some(&root),
    };

    let scenario = match top.string("scenario", &mut errors) {
        Some(name) => Scenario::parse(name).or_else(|| {
            let known: Vec<_> = Scenario::ALL.iter().map(|s| s.name()).collect();
            errors.push(format!(
                "scenario: unknown scenario {name:?} (expected one of {})",
                known.join(", ")
            ));
            None
        }),
        None => {
            if !top.has("scenario") {
                errors.push("scenario: missing".to_string());
            }
            None
        }
    };
    let seed = match root.get("seed") {
        None => None,
        Some(Value::Integer(i)) => Some(*i as u64),
        Some(_) => {
            errors.push("seed: expected an integer".to_string());
            None
        }
    };
    let paths = top.uint("paths", &mut errors).unwrap_or(20_000);
    if paths == 0 {
        errors.push("paths: must be positive".to_string());
    }
    let dump_paths = top.uint("dump_paths", &mut errors).unwrap_or(10);
    let output_dir = top.string("output_dir", &mut errors).map(PathBuf::from);

    let space_sec = Section::new(&root, "space", SPACE_KEYS, &mut errors);
    let state_dim = space_sec.uint("state_dim", &mut errors);
    let control_dim = space_sec.uint("control_dim", &mut errors);
    for (v, name) in [
        (state_dim, "space.state_dim"),
        (control_dim, "space.control_dim"),
    ] {
        if v == Some(0) {
            errors.push(format!("{name}: must be positive"));
        }
    }

    let grid_sec = Section::new(&root, "grid", GRID_KEYS, &mut errors);
    let steps = grid_sec.uint("steps", &mut errors).unwrap_or(400);
    if steps == 0 {
        errors.push("grid.steps: must be positive".to_string());
    }
    let horizon = grid_sec.float("horizon", &mut errors).unwrap_or(1.0);
    if !(horizon > 0.0) {
        errors.push("grid.horizon: must be positive".to_string());
    }
    let grid = PathGrid::new(horizon, steps).ok();

    // bilinear problem
    let mut ex1 = Example1Config::default();
    let bil = Section::new(&root, "bilinear", BILINEAR_KEYS, &mut errors);
    if let Some(v) = bil.vector("beta", &mut errors) {
        ex1.beta = StateVec::from_vec(v);
    }
    if let Some(v) = bil.vector("c", &mut errors) {
        ex1.c = StateVec::from_vec(v);
    }
    if let Some(v) = bil.vector("x0", &mut errors) {
        ex1.x0 = StateVec::from_vec(v);
    }
    if let Some(m) = bil.matrix("f_tilde", &mut errors) {
        ex1.f_tilde = m;
    }
    if let Some(m) = bil.matrix("g_tilde", &mut errors) {
        ex1.g_tilde = m;
    }
    if let Some(a) = bil.vector("alpha", &mut errors) {
        if a.len() == 2 {
            ex1.alpha0 = a[0];
            ex1.alpha1 = a[1];
        } else {
            errors.push("bilinear.alpha: expected [a0, a1] for alpha(t) = a0 + a1*t".to_string());
        }
    }
    if !(ex1.alpha0 > 0.0 && ex1.alpha0 + ex1.alpha1 * horizon > 0.0) {
        errors.push("bilinear.alpha: the intensity must stay positive on [0, T]".to_string());
    }
    if let Some(b) = bil.float("control_bound", &mut errors) {
        ex1.control_bound = b;
        if !(b > 0.0) {
            errors.push("bilinear.control_bound: must be positive".to_string());
        }
    }
    if let Some(k) = bil.float("nonlinearity", &mut errors) {
        ex1.nonlinearity = k;
    }
    let n1 = state_dim.unwrap_or(4);
    let m1 = control_dim.unwrap_or(2);
    let uses_bilinear = !matches!(scenario, Some(Scenario::Example2));
    if uses_bilinear && n1 > 0 && m1 > 0 {
        check_len(&mut errors, "bilinear.beta", ex1.beta.len(), n1);
        check_len(&mut errors, "bilinear.c", ex1.c.len(), n1);
        check_len(&mut errors, "bilinear.x0", ex1.x0.len(), n1);
        check_shape(&mut errors, "bilinear.f_tilde", &ex1.f_tilde, n1, m1);
        check_shape(&mut errors, "bilinear.g_tilde", &ex1.g_tilde, n1, n1);
    }

    // experiment block
    let exp = Section::new(&root, "experiment", EXPERIMENT_KEYS, &mut errors);
    for (key, slot) in [
        ("probes_per_dim", &mut ex1.probes_per_dim),
        ("sample_times", &mut ex1.sample_times),
        ("sample_paths", &mut ex1.sample_paths),
        ("convexity_pairs", &mut ex1.convexity_pairs),
    ] {
        if let Some(v) = exp.uint(key, &mut errors) {
            *slot = v;
        }
    }
    if ex1.probes_per_dim < 2 {
        errors.push("experiment.probes_per_dim: must be at least 2".to_string());
    }
    if let Some(t) = exp.float("probe_t0", &mut errors) {
        ex1.probe_t0 = t;
    }
    if let Some(v) = exp.vector("probe_v", &mut errors) {
        if uses_bilinear {
            check_len(&mut errors, "experiment.probe_v", v.len(), m1);
        }
        ex1.probe_v = Some(ControlVec::from_vec(v));
    }
    if let Some(l) = exp.vector("eps_ladder", &mut errors) {
        ex1.eps_ladder = l;
    }
    if ex1.eps_ladder.is_empty() || ex1.eps_ladder.windows(2).any(|w| w[1] >= w[0]) {
        errors.push("experiment.eps_ladder: must be non-empty and strictly decreasing".to_string());
    }
    match exp.raw("spikes") {
        None => {}
        Some(Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                let field = format!("experiment.spikes[{i}]");
                let Value::Table(t) = item else {
                    errors.push(format!("{field}: expected a table with t0, eps and v"));
                    continue;
                };
                for key in t.keys() {
                    if !["t0", "eps", "v"].contains(&key.as_str()) {
                        errors.push(format!("{field}.{key}: unknown key"));
                    }
                }
                let t0 = t.get("t0").and_then(as_float);
                let eps = t.get("eps").and_then(as_float);
                let v = t.get("v").and_then(as_vector);
                match (t0, eps, v) {
                    (Some(t0), Some(eps), Some(v)) => {
                        if uses_bilinear {
                            check_len(&mut errors, &format!("{field}.v"), v.len(), m1);
                        }
                        ex1.spikes
                            .push(SpikeSpec::new(t0, eps, ControlVec::from_vec(v)));
                    }
                    _ => errors.push(format!(
                        "{field}: needs numeric t0, eps and a numeric array v"
                    )),
                }
            }
        }
        Some(_) => errors.push("experiment.spikes: expected an array of tables".to_string()),
    }
    if let Some(grid) = &grid {
        for (i, s) in ex1.spikes.iter().enumerate() {
            if let Err(e) = s.window(grid) {
                errors.push(format!("experiment.spikes[{i}]: {e}"));
            }
        }
        if uses_bilinear {
            let mut seen_probe_error = false;
            for &eps in &ex1.eps_ladder {
                let probe = SpikeSpec::new(ex1.probe_t0, eps, ControlVec::zeros(m1));
                if let Err(e) = probe.window(grid) {
                    if !seen_probe_error {
                        errors.push(format!("experiment.eps_ladder / probe_t0: {e}"));
                        seen_probe_error = true;
                    }
                }
            }
        }
    }

    // linear-quadratic problem
    let mut ex2 = Example2Config::default();
    let lq = Section::new(&root, "lq", LQ_KEYS, &mut errors);
    for (key, slot) in [
        ("a", &mut ex2.a),
        ("c", &mut ex2.c),
        ("g_tilde", &mut ex2.g_tilde),
        ("d", &mut ex2.d),
        ("p", &mut ex2.p),
        ("r", &mut ex2.r),
        ("p1", &mut ex2.p1),
    ] {
        if let Some(m) = lq.matrix(key, &mut errors) {
            *slot = m;
        }
    }
    for (key, slot) in [
        ("f", &mut ex2.f),
        ("gamma", &mut ex2.gamma),
        ("x0", &mut ex2.x0),
    ] {
        if let Some(v) = lq.vector(key, &mut errors) {
            *slot = StateVec::from_vec(v);
        }
    }
    if let Some(v) = lq.vector("direction", &mut errors) {
        ex2.driver.direction = StateVec::from_vec(v);
    }
    if let Some(a) = lq.vector("alpha", &mut errors) {
        if a.len() == 2 {
            ex2.driver.alpha0 = a[0];
            ex2.driver.alpha1 = a[1];
        } else {
            errors.push("lq.alpha: expected [a0, a1] for alpha(t) = a0 + a1*t".to_string());
        }
    }
    if let Some(d) = lq.uint("basis_degree", &mut errors) {
        ex2.basis_degree = d;
    }
    if let Some(s) = lq.uint("sweeps", &mut errors) {
        ex2.sweeps = s;
    }
    let open_loop = lq.raw("open_loop");
    let feedback = lq.has("feedback_gain") || lq.has("feedback_offset");
    if open_loop.is_some() && feedback {
        errors.push("lq: both an open-loop schedule and a feedback policy are given; the policy is ambiguous".to_string());
    }
    if let Some(v) = open_loop {
        if let Some(u) = as_vector(v) {
            ex2.initial_policy = PolicySpec::Constant(ControlVec::from_vec(u));
        } else if let Some(m) = as_matrix(v) {
            if m.nrows() != steps {
                errors.push(format!(
                    "lq.open_loop: has {} rows, expected one per step ({steps})",
                    m.nrows()
                ));
            }
            ex2.initial_policy = PolicySpec::Schedule(
                m.row_iter()
                    .map(|r| ControlVec::from_iterator(r.len(), r.iter().copied()))
                    .collect(),
            );
        } else {
            errors
                .push("lq.open_loop: expected a control vector or one vector per step".to_string());
        }
    } else if feedback {
        let gain = lq.matrix("feedback_gain", &mut errors);
        let offset = lq.vector("feedback_offset", &mut errors);
        let m = ex2.c.ncols();
        let n = ex2.a.nrows();
        let gain = gain.unwrap_or_else(|| Operator::zeros(m, n));
        let offset = offset
            .map(ControlVec::from_vec)
            .unwrap_or_else(|| ControlVec::zeros(m));
        ex2.initial_policy = PolicySpec::LinearFeedback { gain, offset };
    }
    if matches!(
        scenario,
        Some(Scenario::Example2) | Some(Scenario::DerivativeCheck)
    ) {
        // [space] describes the bilinear problem unless the scenario is example2
        let own = !matches!(scenario, Some(Scenario::Example2));
        let n = if own {
            ex2.a.nrows()
        } else {
            state_dim.unwrap_or(ex2.a.nrows())
        };
        let m = if own {
            ex2.c.ncols()
        } else {
            control_dim.unwrap_or(ex2.c.ncols())
        };
        check_shape(&mut errors, "lq.a", &ex2.a, n, n);
        check_shape(&mut errors, "lq.c", &ex2.c, n, m);
        check_len(&mut errors, "lq.x0", ex2.x0.len(), n);
        check_len(&mut errors, "lq.direction", ex2.driver.direction.len(), n);
        match &ex2.initial_policy {
            PolicySpec::Constant(u) => check_len(&mut errors, "lq.open_loop", u.len(), m),
            PolicySpec::Schedule(s) => {
                if let Some(u) = s.first() {
                    check_len(&mut errors, "lq.open_loop", u.len(), m);
                }
            }
            PolicySpec::LinearFeedback { gain, offset } => {
                check_shape(&mut errors, "lq.feedback_gain", gain, m, n);
                check_len(&mut errors, "lq.feedback_offset", offset.len(), m);
            }
        }
        if !(ex2.driver.alpha0 > 0.0 && ex2.driver.alpha0 + ex2.driver.alpha1 * horizon > 0.0) {
            errors.push("lq.alpha: the intensity must stay positive on [0, T]".to_string());
        }
        if let Err(e) = ex2.problem() {
            errors.push(format!("lq: {e}"));
        }
    }

    // faults
    let mut faults = Faults::default();
    let fs = Section::new(&root, "faults", FAULT_KEYS, &mut errors);
    faults.concave_cost = fs.boolean("concave_cost", &mut errors).unwrap_or(false);
    faults.p_scale = fs.float("p_scale", &mut errors);
    let offset = fs.float("derivative_offset", &mut errors).unwrap_or(0.1);
    if let Some(name) = fs.string("derivative", &mut errors) {
        match derivative_target(name) {
            Some(target) => faults.derivative = Some(DerivativeFault { target, offset }),
            None => errors.push(format!(
                "faults.derivative: unknown derivative {name:?} (expected F_x, F_u, G_x, l_x, l_u or h_x)"
            )),
        }
    }

    let space = SpaceConfig::new(n1.max(1), m1.max(1)).expect("positive dims");
    if !errors.is_empty() {
        return Err(ConfigErrors(errors));
    }
    let seed = seed.unwrap_or(ex1.seed);
    ex1.steps = steps;
    ex1.horizon = horizon;
    ex1.paths = paths;
    ex1.seed = seed;
    if faults.concave_cost {
        ex1.control_weight = -1.0;
    }
    if let Some(s) = faults.p_scale {
        ex1.p_scale = s;
    }
    ex2.steps = steps;
    ex2.horizon = horizon;
    ex2.paths = paths;
    ex2.seed = seed;
    let space = if matches!(scenario, Some(Scenario::Example2)) {
        SpaceConfig::new(ex2.a.nrows(), ex2.c.ncols()).expect("validated shapes")
    } else {
        space
    };
    Ok(ExperimentConfig {
        scenario: scenario.expect("validated scenario"),
        space,
        seed,
        paths,
        steps,
        horizon,
        output_dir,
        dump_paths,
        example1: ex1,
        example2: ex2,
        faults,
    })
}
