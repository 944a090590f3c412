//! Batch experiment runner behind the `pni` binary: study selection,
//! schema-checked overrides, CSV trajectories and a plain-text report.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Complex, DMatrix};

use crate::error::Error;
use crate::estimation::{
    self, EstimationConfig, EstimationMethod, ExcitationCheck, RegressorSignal,
};
use crate::sim::{self, SimConfig, Trajectory};
use crate::synthesis;
use crate::systems::{self, BuckParams, BuckState};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "PNI_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "pni_out";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Study {
    A1,
    A2,
    A3,
    B1Linear,
    BuckDualPi,
    BuckPni,
    EstGe,
    EstMre,
    EstCge,
    Excitation,
}

impl Study {
    pub const ALL: [Study; 10] = [
        Study::A1,
        Study::A2,
        Study::A3,
        Study::B1Linear,
        Study::BuckDualPi,
        Study::BuckPni,
        Study::EstGe,
        Study::EstMre,
        Study::EstCge,
        Study::Excitation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::A1 => "A1",
            Study::A2 => "A2",
            Study::A3 => "A3",
            Study::B1Linear => "B1_LINEAR",
            Study::BuckDualPi => "BUCK_DUAL_PI",
            Study::BuckPni => "BUCK_PNI",
            Study::EstGe => "EST_GE",
            Study::EstMre => "EST_MRE",
            Study::EstCge => "EST_CGE",
            Study::Excitation => "EXCITATION",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Study::A1 => "x1' = x1 + x2, manifold x2 + 2 x1 = 0",
            Study::A2 => "x1' = x2, x2' = -13 x1 + 4 x2 + u, manifold x2 + x1 = 0",
            Study::A3 => "x1' = -x1 + x1^3 x2, manifold x2 + x1^2 = 0",
            Study::B1Linear => "2x2 linear field and its sensitivity-conditioned form",
            Study::BuckDualPi => "buck converter, cascaded PI loops",
            Study::BuckPni => "buck converter, single PI plus current manifold",
            Study::EstGe => "gradient estimator",
            Study::EstMre => "gradient estimator on the filtered regressor",
            Study::EstCge => "controlled gradient estimator",
            Study::Excitation => "windowed excitation certificate of a regressor",
        }
    }

    pub fn schema(self) -> Vec<Param> {
        use Kind::*;
        let sim = |step: &'static str, t_end: &'static str, every: &'static str| {
            vec![
                Param::new("step", Positive, step, "RK4 step [s]"),
                Param::new("t_end", Positive, t_end, "horizon [s]"),
                Param::new("record_every", Count, every, "keep every n-th step"),
            ]
        };
        match self {
            Study::A1 | Study::A2 | Study::A3 => {
                let mut v = vec![
                    Param::new("alpha", Positive, "1", "residual decay rate"),
                    Param::new("x0", Vector, "0.8 -0.4", "initial state"),
                ];
                v.extend(sim("1e-3", "10", "1"));
                v
            }
            Study::B1Linear => {
                let mut v = vec![
                    Param::new("a11", Float, "-1", "A[1,1]"),
                    Param::new("a12", Float, "0.5", "A[1,2]"),
                    Param::new("a21", Float, "1", "A[2,1]"),
                    Param::new("a22", Float, "-2", "A[2,2]"),
                    Param::new("x0", Vector, "1 1", "initial state"),
                ];
                v.extend(sim("1e-3", "10", "1"));
                v
            }
            Study::BuckDualPi | Study::BuckPni => {
                let ki1 = if self == Study::BuckPni { "100" } else { "30" };
                let mut v = vec![
                    Param::new("r_load", Positive, "18.6", "load resistance [ohm]"),
                    Param::new("l", Positive, "1e-3", "inductance [H]"),
                    Param::new("c", Positive, "510e-6", "capacitance [F]"),
                    Param::new("kp1", Float, "1", "outer proportional gain"),
                    Param::new("ki1", Float, ki1, "outer integral gain"),
                    Param::new("kp2", Float, "1", "inner proportional gain"),
                    Param::new("ki2", Float, "700", "inner integral gain"),
                    Param::new("alpha", Float, "700", "current-manifold rate [1/s]"),
                    Param::new("v_ref", Float, "10", "voltage reference [V]"),
                    Param::new("x0", Vector, "0 0 0 0", "initial (vc, zeta1, il, zeta2)"),
                ];
                v.extend(sim("1e-6", "0.5", "100"));
                v
            }
            Study::EstGe | Study::EstMre | Study::EstCge => {
                let mut v = vec![
                    Param::new("signal", Choice(&["PE", "IE"]), "PE", "regressor"),
                    Param::new("gamma", Positive, "100", "adaptation gain"),
                    Param::new("beta", Positive, "0.9", "CGE coupling, in (0, 1)"),
                    Param::new("theta", AutoVector, "auto", "true parameters"),
                    Param::new("theta_hat0", AutoVector, "auto", "initial estimate (zero)"),
                    Param::new("step", Positive, "1e-3", "RK4 step [s]"),
                    Param::new("t_end", AutoFloat, "auto", "horizon [s]; 20 for PE, 50 for IE"),
                    Param::new("record_every", Count, "10", "keep every n-th step"),
                ];
                if self != Study::EstCge {
                    v.retain(|p| p.key != "beta");
                }
                v
            }
            Study::Excitation => vec![
                Param::new("signal", Choice(&["PE", "IE", "ZERO"]), "PE", "regressor"),
                Param::new("horizon", Positive, "50", "horizon [s]"),
                Param::new("window", Positive, "6.283185307179586", "window length [s]"),
                Param::new("threshold", Positive, "1e-3", "absolute level threshold"),
                Param::new("uniformity", Float, "0.25", "fraction of best window level"),
            ],
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Study {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Study::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| ExperimentError::Config(format!("unknown study {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Float,
    Positive,
    Count,
    /// Whitespace-separated floats.
    Vector,
    Choice(&'static [&'static str]),
    AutoFloat,
    AutoVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Param {
    pub key: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub help: &'static str,
}

impl Param {
    const fn new(key: &'static str, kind: Kind, default: &'static str, help: &'static str) -> Self {
        Self {
            key,
            kind,
            default,
            help,
        }
    }

    fn check(&self, value: &str) -> Result<(), String> {
        let v = value.trim();
        let float = |s: &str| -> Result<f64, String> {
            s.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("{}: {s:?} is not a finite number", self.key))
        };
        let vector = |s: &str| -> Result<(), String> {
            if s.split_whitespace().next().is_none() {
                return Err(format!("{}: empty vector", self.key));
            }
            s.split_whitespace().try_for_each(|t| float(t).map(|_| ()))
        };
        match self.kind {
            Kind::Float => float(v).map(|_| ()),
            Kind::Positive => match float(v)? {
                x if x > 0.0 => Ok(()),
                x => Err(format!("{}: must be > 0, got {x}", self.key)),
            },
            Kind::Count => match v.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(()),
                _ => Err(format!("{}: expected a positive integer, got {v:?}", self.key)),
            },
            Kind::Vector => vector(v),
            Kind::Choice(options) => {
                if options.iter().any(|o| o.eq_ignore_ascii_case(v)) {
                    Ok(())
                } else {
                    Err(format!("{}: expected one of {options:?}, got {v:?}", self.key))
                }
            }
            Kind::AutoFloat if v.eq_ignore_ascii_case("auto") => Ok(()),
            Kind::AutoFloat => match float(v)? {
                x if x > 0.0 => Ok(()),
                x => Err(format!("{}: must be > 0, got {x}", self.key)),
            },
            Kind::AutoVector if v.eq_ignore_ascii_case("auto") => Ok(()),
            Kind::AutoVector => vector(v),
        }
    }
}

#[derive(Debug)]
pub enum ExperimentError {
    Config(String),
    Simulation(Error),
    Io(io::Error),
    Invariant(String),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Simulation(_) | ExperimentError::Io(_) => 3,
            ExperimentError::Invariant(_) => 4,
        }
    }
}

impl fmt::Display for ExperimentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExperimentError::Config(m) => write!(f, "configuration error: {m}"),
            ExperimentError::Simulation(e) => write!(f, "simulation failed: {e}"),
            ExperimentError::Io(e) => write!(f, "i/o error: {e}"),
            ExperimentError::Invariant(m) => write!(f, "invariant violated: {m}"),
        }
    }
}

impl std::error::Error for ExperimentError {}

impl From<Error> for ExperimentError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(m) => ExperimentError::Config(m),
            e @ Error::DimensionMismatch { .. } => ExperimentError::Config(e.to_string()),
            e => ExperimentError::Simulation(e),
        }
    }
}

impl From<io::Error> for ExperimentError {
    fn from(e: io::Error) -> Self {
        ExperimentError::Io(e)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, ExperimentError> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ExperimentError::Config(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ExperimentError::Config(format!("line {}: empty key", n + 1)));
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Splits a `key=value` command-line override.
pub fn parse_assignment(s: &str) -> Result<(String, String), ExperimentError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| ExperimentError::Config(format!("expected key=value, got {s:?}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub study: Study,
    pub overrides: BTreeMap<String, String>,
}

impl ExperimentSpec {
    pub fn new(study: Study) -> Self {
        Self {
            study,
            overrides: BTreeMap::new(),
        }
    }

    pub fn set(mut self, key: &str, value: &str) -> Self {
        self.overrides.insert(key.to_string(), value.to_string());
        self
    }

    /// Checks every override against the study schema and fills in defaults.
    pub fn resolve(&self) -> Result<Params, ExperimentError> {
        let schema = self.study.schema();
        for key in self.overrides.keys() {
            if !schema.iter().any(|p| p.key == key) {
                let known: Vec<_> = schema.iter().map(|p| p.key).collect();
                return Err(ExperimentError::Config(format!(
                    "unknown key {key:?} for {}; known keys: {}",
                    self.study,
                    known.join(", ")
                )));
            }
        }
        let mut values = BTreeMap::new();
        for p in &schema {
            let v = self.overrides.get(p.key).map(String::as_str).unwrap_or(p.default);
            p.check(v).map_err(ExperimentError::Config)?;
            values.insert(p.key, v.trim().to_string());
        }
        Ok(Params { values })
    }
}

/// Schema-checked parameter values of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    values: BTreeMap<&'static str, String>,
}

impl Params {
    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key in schema")
    }

    fn f64(&self, key: &str) -> f64 {
        self.raw(key).parse().expect("checked")
    }

    fn usize(&self, key: &str) -> usize {
        self.raw(key).parse().expect("checked")
    }

    fn vector(&self, key: &str) -> Vec<f64> {
        self.raw(key).split_whitespace().map(|t| t.parse().expect("checked")).collect()
    }

    fn auto_f64(&self, key: &str) -> Option<f64> {
        let v = self.raw(key);
        (!v.eq_ignore_ascii_case("auto")).then(|| v.parse().expect("checked"))
    }

    fn auto_vector(&self, key: &str) -> Option<Vec<f64>> {
        let v = self.raw(key);
        (!v.eq_ignore_ascii_case("auto")).then(|| self.vector(key))
    }

    fn choice(&self, key: &str) -> String {
        self.raw(key).to_ascii_uppercase()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &str)> {
        self.values.iter().map(|(k, v)| (*k, v.as_str()))
    }
}

/// Column layout of a trajectory CSV.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CsvLayout {
    /// `t`, the named states, `residual`, `u`.
    Control(Vec<String>),
    /// `t`, `err_1..err_q`, `err_norm`.
    Estimation(usize),
}

impl CsvLayout {
    pub fn header(&self) -> String {
        let mut cols = vec!["t".to_string()];
        match self {
            CsvLayout::Control(names) => {
                cols.extend(names.iter().cloned());
                cols.push("residual".into());
                cols.push("u".into());
            }
            CsvLayout::Estimation(q) => {
                cols.extend((1..=*q).map(|i| format!("err_{i}")));
                cols.push("err_norm".into());
            }
        }
        cols.join(",")
    }

    fn state_count(&self) -> usize {
        match self {
            CsvLayout::Control(names) => names.len(),
            CsvLayout::Estimation(q) => *q,
        }
    }
}

fn fmt_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Renders a trajectory as CSV text with 17 significant digits.
pub fn csv_string(traj: &Trajectory, layout: &CsvLayout) -> Result<String, ExperimentError> {
    if traj.is_empty() {
        return Err(ExperimentError::Config("cannot write an empty trajectory".into()));
    }
    if traj.state_dim() != layout.state_count() {
        return Err(ExperimentError::Config(format!(
            "trajectory has {} states, layout names {}",
            traj.state_dim(),
            layout.state_count()
        )));
    }
    let mut out = layout.header();
    out.push('\n');
    for k in 0..traj.len() {
        let mut row: Vec<String> = Vec::with_capacity(traj.state_dim() + 3);
        row.push(fmt_value(traj.times[k]));
        row.extend(traj.states[k].iter().map(|v| fmt_value(*v)));
        row.push(fmt_value(traj.residuals[k]));
        if matches!(layout, CsvLayout::Control(_)) {
            row.push(fmt_value(traj.inputs[k]));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_csv(traj: &Trajectory, layout: &CsvLayout, path: &Path) -> Result<(), ExperimentError> {
    let text = csv_string(traj, layout)?;
    fs::write(path, text)?;
    Ok(())
}

/// Files and report text produced by one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub study: Study,
    pub csv_path: PathBuf,
    pub report_path: PathBuf,
    pub report: String,
}

struct Report {
    lines: Vec<(String, String)>,
}

impl Report {
    fn new(study: Study, params: &Params) -> Self {
        let mut r = Self { lines: Vec::new() };
        r.push("study", study.name());
        for (k, v) in params.iter() {
            r.push(&format!("param.{k}"), v);
        }
        r
    }

    fn push(&mut self, key: &str, value: impl fmt::Display) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    fn push_num(&mut self, key: &str, value: f64) {
        self.push(key, format_number(value));
    }

    fn push_opt(&mut self, key: &str, value: Option<f64>) {
        match value {
            Some(v) => self.push_num(key, v),
            None => self.push(key, "n/a"),
        }
    }

    fn push_metrics(&mut self, prefix: &str, m: &sim::ConvergenceReport) {
        self.push_opt(&format!("{prefix}.fitted_rate"), m.fitted_rate);
        self.push_opt(&format!("{prefix}.settling_time_2pct"), m.settling_time_2pct);
        self.push_num(&format!("{prefix}.steady_state_error"), m.steady_state_error);
        self.push_num(&format!("{prefix}.overshoot_pct"), m.overshoot_pct);
        self.push(&format!("{prefix}.sign_changes"), m.sign_change_count);
    }

    fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Shortest round-trip form, in exponent notation outside `[1e-4, 1e6)`.
pub fn format_number(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || !a.is_finite() || (1e-4..1e6).contains(&a) {
        format!("{}", v + 0.0)
    } else {
        format!("{v:e}")
    }
}

pub fn format_complex(z: &Complex<f64>) -> String {
    let re = format_number(z.re);
    if z.im == 0.0 {
        re
    } else if z.im > 0.0 {
        format!("{re}+{}i", format_number(z.im))
    } else {
        format!("{re}-{}i", format_number(-z.im))
    }
}

pub fn format_spectrum(eig: &[Complex<f64>]) -> String {
    eig.iter().map(format_complex).collect::<Vec<_>>().join(", ")
}

fn format_matrix(m: &DMatrix<f64>) -> String {
    (0..m.nrows())
        .map(|i| {
            let row: Vec<String> = m.row(i).iter().map(|v| format_number(*v)).collect();
            format!("[{}]", row.join(" "))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn sim_config(p: &Params, x0: Vec<f64>) -> SimConfig {
    SimConfig::new(p.f64("t_end"), p.f64("step"), x0).with_record_every(p.usize("record_every"))
}

fn check_len(key: &str, v: &[f64], n: usize) -> Result<(), ExperimentError> {
    if v.len() == n {
        Ok(())
    } else {
        Err(ExperimentError::Config(format!("{key}: expected {n} values, got {}", v.len())))
    }
}

/// Checks `M(t) = M(0) e^{−αt}` and sample-to-sample storage decrease.
fn check_residual_decay(traj: &Trajectory, alpha: f64) -> Result<f64, ExperimentError> {
    let m0 = traj.residuals[0];
    let tol = 1e-6 * m0.abs().max(1.0);
    let mut worst = 0.0_f64;
    for (t, m) in traj.times.iter().zip(&traj.residuals) {
        worst = worst.max((m - m0 * (-alpha * t).exp()).abs());
    }
    if worst > tol {
        return Err(ExperimentError::Invariant(format!(
            "residual deviates from M0 exp(-alpha t) by {worst:e}"
        )));
    }
    let s = traj.storage();
    if let Some(k) = (1..s.len()).find(|&k| s[k] > s[k - 1] + 1e-12) {
        return Err(ExperimentError::Invariant(format!(
            "storage increased at t = {}",
            traj.times[k]
        )));
    }
    Ok(worst)
}

fn rate_or_na(times: &[f64], values: &[f64]) -> Option<f64> {
    sim::fit_exponential_rate(times, values).ok()
}

struct Produced {
    csv: String,
    report: Report,
    violation: Option<String>,
}

fn run_pni_example(study: Study, p: &Params) -> Result<Produced, ExperimentError> {
    let alpha = p.f64("alpha");
    let design = match study {
        Study::A1 => systems::make_a1(alpha)?,
        Study::A2 => systems::make_a2(alpha)?,
        _ => systems::make_a3(alpha)?,
    };
    let x0 = p.vector("x0");
    check_len("x0", &x0, 2)?;
    let mut report = Report::new(study, p);
    if study != Study::A3 {
        let lin = systems::sample_affine(&design.closed_loop)?;
        report.push("closed_loop_matrix", format_matrix(&lin.a));
        report.push("eigenvalues", format_spectrum(&lin.eigenvalues()));
    } else {
        let grid: Vec<Vec<f64>> = (-8..=8).map(|k| vec![k as f64 * 0.1]).collect();
        let cl = design.closed_loop.clone();
        let kr = synthesis::krasovskii_check(|x| cl.target_dynamics(x).unwrap_or(vec![f64::NAN]), &grid);
        report.push("krasovskii.passed", kr.passed);
        report.push_num("krasovskii.worst_vdot", kr.worst);
    }

    let traj = sim::integrate(&design.closed_loop, &sim_config(p, x0))?;
    report.push_opt("residual.fitted_rate", rate_or_na(&traj.times, &traj.residuals));
    if let Ok(split) = sim::rate_split(&traj, &design.equilibrium) {
        report.push_num("rate_split.normal", split.normal);
        report.push_num("rate_split.tangential", split.tangential);
    }
    report.push_metrics("x1", &sim::transient_metrics(&traj, 0.0, 0));
    let final_state = traj.final_state().unwrap_or(&[]);
    report.push("final_state", format!("{final_state:?}"));

    let violation = match check_residual_decay(&traj, alpha) {
        Ok(worst) => {
            report.push_num("residual.max_deviation", worst);
            None
        }
        Err(e) => Some(e.to_string()),
    };
    let layout = CsvLayout::Control(vec!["x1".into(), "x2".into()]);
    Ok(Produced {
        csv: csv_string(&traj, &layout)?,
        report,
        violation,
    })
}

fn run_b1(p: &Params) -> Result<Produced, ExperimentError> {
    let a = DMatrix::from_row_slice(2, 2, &[p.f64("a11"), p.f64("a12"), p.f64("a21"), p.f64("a22")]);
    let field = systems::make_b1(a.clone())?;
    let x0 = p.vector("x0");
    check_len("x0", &x0, 2)?;
    let mut report = Report::new(Study::B1Linear, p);
    report.push("eigenvalues", format_spectrum(&systems::eigenvalues(&a)));
    report.push_num("connection", field.conditioned.connection);
    report.push("conditioned_matrix", format_matrix(&field.conditioned.matrix));
    let traj = sim::integrate(&field, &sim_config(p, x0))?;
    report.push_opt("residual.fitted_rate", rate_or_na(&traj.times, &traj.residuals));
    report.push_metrics("x1", &sim::transient_metrics(&traj, 0.0, 0));
    let violation = (!systems::is_hurwitz(&a)).then(|| "system matrix is not Hurwitz".to_string());
    let layout = CsvLayout::Control(vec!["x1".into(), "x2".into()]);
    Ok(Produced {
        csv: csv_string(&traj, &layout)?,
        report,
        violation,
    })
}

fn buck_params(p: &Params) -> BuckParams {
    BuckParams {
        r_load: p.f64("r_load"),
        l: p.f64("l"),
        c: p.f64("c"),
        kp1: p.f64("kp1"),
        ki1: p.f64("ki1"),
        kp2: p.f64("kp2"),
        ki2: p.f64("ki2"),
        alpha: p.f64("alpha"),
        v_ref: p.f64("v_ref"),
    }
}

fn run_buck(study: Study, p: &Params) -> Result<Produced, ExperimentError> {
    let params = buck_params(p);
    let cl = if study == Study::BuckPni {
        systems::buck_pni(&params)?
    } else {
        systems::buck_dual_pi(&params)?
    };
    let x0 = p.vector("x0");
    check_len("x0", &x0, 4)?;
    let mut report = Report::new(study, p);
    report.push("closed_loop_matrix", format_matrix(cl.matrix()));
    report.push("eigenvalues", format_spectrum(&cl.eigenvalues()));
    report.push("hurwitz_active_block", cl.is_hurwitz());

    let traj = sim::integrate(&cl, &sim_config(p, x0))?;
    report.push_metrics("vc", &sim::transient_metrics(&traj, params.v_ref, 0));
    report.push_metrics("il", &sim::transient_metrics_of(&traj.times, &traj.channel(2), traj.channel(2).last().copied().unwrap_or(0.0)));
    report.push_opt("residual.fitted_rate", rate_or_na(&traj.times, &traj.residuals));
    let final_state = traj.final_state().unwrap_or(&[]);
    report.push("final_state", format!("{final_state:?}"));

    let mut violation = (!cl.is_hurwitz()).then(|| "closed loop is not Hurwitz".to_string());
    if study == Study::BuckPni && violation.is_none() {
        violation = check_residual_decay(&traj, params.alpha).err().map(|e| e.to_string());
    }
    let layout = CsvLayout::Control(BuckState::NAMES.iter().map(|s| s.to_string()).collect());
    Ok(Produced {
        csv: csv_string(&traj, &layout)?,
        report,
        violation,
    })
}

fn signal_from(p: &Params) -> Result<(RegressorSignal, f64), ExperimentError> {
    let (signal, t_default) = match p.choice("signal").as_str() {
        "IE" => (RegressorSignal::ie(), 50.0),
        _ => (RegressorSignal::pe(), 20.0),
    };
    let signal = match p.auto_vector("theta") {
        Some(theta) => signal.with_theta(theta)?,
        None => signal,
    };
    Ok((signal, p.auto_f64("t_end").unwrap_or(t_default)))
}

fn run_estimation_study(study: Study, p: &Params) -> Result<Produced, ExperimentError> {
    let method = match study {
        Study::EstGe => EstimationMethod::Ge,
        Study::EstMre => EstimationMethod::MreGe,
        _ => EstimationMethod::Cge,
    };
    let (signal, t_end) = signal_from(p)?;
    let cfg = EstimationConfig {
        gamma: p.f64("gamma"),
        beta: if study == Study::EstCge { p.f64("beta") } else { 0.9 },
        t_end,
        step: p.f64("step"),
        record_every: p.usize("record_every"),
        theta_hat0: p.auto_vector("theta_hat0"),
    };
    let run = estimation::run_estimation(&signal, method, &cfg)?;
    let mut report = Report::new(study, p);
    report.push("method", method);
    report.push_num("t_end", t_end);
    report.push_num("final_error_norm", run.final_error_norm());
    report.push_metrics("err_norm", &run.norm_report);
    report.push(
        "sign_changes",
        run.sign_changes().iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "),
    );
    Ok(Produced {
        csv: csv_string(&run.trajectory, &CsvLayout::Estimation(signal.q()))?,
        report,
        violation: None,
    })
}

fn run_excitation(p: &Params) -> Result<Produced, ExperimentError> {
    let mut check = ExcitationCheck::new(p.f64("horizon"), p.f64("window"), p.f64("threshold"));
    check.uniformity = p.f64("uniformity");
    let phi: Box<dyn Fn(f64) -> Vec<f64>> = match p.choice("signal").as_str() {
        "IE" => Box::new(estimation::ie_regressor),
        "ZERO" => Box::new(|_| vec![0.0, 0.0]),
        _ => Box::new(estimation::pe_regressor),
    };
    let levels = check.window_levels(&phi)?;
    let verdict = check.run(&phi)?;
    let mut report = Report::new(Study::Excitation, p);
    report.push("verdict", verdict.kind);
    report.push_num("level", verdict.level);
    report.push_num("min_window_level", verdict.min_level);
    report.push_num("max_window_level", verdict.max_level);
    report.push_opt("first_passing_window", verdict.first_passing_window);
    let mut csv = String::from("t_start,level\n");
    for (t, l) in levels {
        let _ = writeln!(csv, "{},{}", fmt_value(t), fmt_value(l));
    }
    Ok(Produced {
        csv,
        report,
        violation: None,
    })
}

/// Runs one study and writes `<STUDY><suffix>.csv` and
/// `<STUDY><suffix>_report.txt` under `out_dir`.
pub fn run(spec: &ExperimentSpec, out_dir: &Path) -> Result<RunOutcome, ExperimentError> {
    run_with_suffix(spec, out_dir, "")
}

fn run_with_suffix(spec: &ExperimentSpec, out_dir: &Path, suffix: &str) -> Result<RunOutcome, ExperimentError> {
    let params = spec.resolve()?;
    let produced = match spec.study {
        Study::A1 | Study::A2 | Study::A3 => run_pni_example(spec.study, &params)?,
        Study::B1Linear => run_b1(&params)?,
        Study::BuckDualPi | Study::BuckPni => run_buck(spec.study, &params)?,
        Study::EstGe | Study::EstMre | Study::EstCge => run_estimation_study(spec.study, &params)?,
        Study::Excitation => run_excitation(&params)?,
    };
    let mut report = produced.report;
    report.push(
        "invariants",
        produced.violation.as_deref().map_or("ok".to_string(), |v| format!("violated: {v}")),
    );
    let text = report.render();

    fs::create_dir_all(out_dir)?;
    let stem = format!("{}{suffix}", spec.study.name());
    let csv_path = out_dir.join(format!("{stem}.csv"));
    let report_path = out_dir.join(format!("{stem}_report.txt"));
    fs::write(&csv_path, &produced.csv)?;
    fs::write(&report_path, &text)?;

    if let Some(v) = produced.violation {
        return Err(ExperimentError::Invariant(v));
    }
    Ok(RunOutcome {
        study: spec.study,
        csv_path,
        report_path,
        report: text,
    })
}

/// Parses `key=v1,v2,...`.
pub fn parse_sweep(s: &str) -> Result<(String, Vec<String>), ExperimentError> {
    let (key, values) = parse_assignment(s)?;
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(ExperimentError::Config(format!("sweep over {key:?} has no values")));
    }
    Ok((key, values))
}

/// One run per sweep value, files suffixed with `_<key>-<value>`.
pub fn run_sweep(
    spec: &ExperimentSpec,
    key: &str,
    values: &[String],
    out_dir: &Path,
) -> Result<Vec<RunOutcome>, ExperimentError> {
    let mut outcomes = Vec::with_capacity(values.len());
    for v in values {
        let s = spec.clone().set(key, v);
        let tag: String = v
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
            .collect();
        outcomes.push(run_with_suffix(&s, out_dir, &format!("_{key}-{tag}"))?);
    }
    Ok(outcomes)
}

/// Output directory: explicit flag, then `PNI_OUT_DIR`, then `pni_out`.
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_traj() -> Trajectory {
        Trajectory {
            times: vec![0.0, 0.5, 1.0],
            states: vec![vec![1.0, 2.0], vec![0.5, 1.0], vec![0.25, 0.5]],
            residuals: vec![0.1, 0.05, 0.025],
            inputs: vec![-1.0, -0.5, -0.25],
        }
    }

    #[test]
    fn csv_line_count_and_header() {
        let layout = CsvLayout::Control(vec!["x1".into(), "x2".into()]);
        let s = csv_string(&tiny_traj(), &layout).unwrap();
        let lines: Vec<_> = s.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "t,x1,x2,residual,u");
        assert!(!s.contains('\r'));
        assert!(lines.iter().all(|l| !l.ends_with(',')));
        let fields: Vec<f64> = lines[2].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(fields, vec![0.5, 0.5, 1.0, 0.05, -0.5]);
    }

    #[test]
    fn csv_round_trips_doubles() {
        let mut t = tiny_traj();
        t.states[1][0] = 0.1 + 0.2;
        t.residuals[2] = std::f64::consts::PI * 1e-300;
        let s = csv_string(&t, &CsvLayout::Control(vec!["a".into(), "b".into()])).unwrap();
        let row: Vec<f64> = s.lines().nth(2).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row[1], 0.1 + 0.2);
        let row: Vec<f64> = s.lines().nth(3).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row[3], std::f64::consts::PI * 1e-300);
    }

    #[test]
    fn csv_headers() {
        assert_eq!(
            CsvLayout::Control(BuckState::NAMES.iter().map(|s| s.to_string()).collect()).header(),
            "t,vc,zeta1,il,zeta2,residual,u"
        );
        assert_eq!(CsvLayout::Estimation(3).header(), "t,err_1,err_2,err_3,err_norm");
    }

    #[test]
    fn empty_trajectory_rejected() {
        let t = Trajectory {
            times: vec![],
            states: vec![],
            residuals: vec![],
            inputs: vec![],
        };
        assert!(csv_string(&t, &CsvLayout::Estimation(2)).is_err());
    }

    #[test]
    fn config_parsing() {
        let m = parse_config("# comment\nalpha = 2 # inline\n\n x0 = 1 -1 \n").unwrap();
        assert_eq!(m["alpha"], "2");
        assert_eq!(m["x0"], "1 -1");
        assert!(parse_config("alpha 2").is_err());
        assert!(parse_config(" = 2").is_err());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let e = ExperimentSpec::new(Study::A1).set("alpah", "1").resolve().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = ExperimentSpec::new(Study::A1).set("alpha", "-1").resolve().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = ExperimentSpec::new(Study::EstGe).set("beta", "0.5").resolve().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = ExperimentSpec::new(Study::EstCge).set("signal", "XX").resolve().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(ExperimentSpec::new(Study::EstCge).set("signal", "ie").resolve().is_ok());
    }

    #[test]
    fn study_names() {
        for s in Study::ALL {
            assert_eq!(s.name().parse::<Study>().unwrap(), s);
        }
        assert_eq!("buck-pni".parse::<Study>().unwrap(), Study::BuckPni);
        assert_eq!("nope".parse::<Study>().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn defaults_pass_schema() {
        for s in Study::ALL {
            ExperimentSpec::new(s).resolve().unwrap();
        }
    }

    #[test]
    fn sweep_parsing() {
        let (k, v) = parse_sweep("ki1=30,100").unwrap();
        assert_eq!(k, "ki1");
        assert_eq!(v, vec!["30", "100"]);
        assert!(parse_sweep("ki1=").is_err());
        assert!(parse_sweep("ki1").is_err());
    }

    #[test]
    fn number_formatting() {
        assert_eq!(format_number(-1.0), "-1");
        assert_eq!(format_number(-0.0), "0");
        assert_eq!(format_number(6.5e-15), "6.5e-15");
        assert_eq!(format_number(700.25), "700.25");
        assert_eq!(format_number(7e7), "7e7");
    }

    #[test]
    fn complex_formatting() {
        assert_eq!(format_complex(&Complex::new(-1.0, 0.0)), "-1");
        assert_eq!(format_complex(&Complex::new(-0.5, 2.0)), "-0.5+2i");
        assert_eq!(format_complex(&Complex::new(-0.5, -2.0)), "-0.5-2i");
        assert_eq!(format_complex(&Complex::new(-0.0, 0.0)), "0");
    }
}
