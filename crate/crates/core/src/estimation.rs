//! Parameter estimation for `y = Φᵀθ + ε`: plain gradient, gradient on the
//! memory-regressor extension (`Ω`, `Y` filtered through `1/(s+1)`), and the
//! controlled gradient estimator `θ̃̇ = −γ P Ω θ̃`. Also windowed excitation
//! certification.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::sim::{self, ConvergenceReport, SimConfig, Trajectory, VectorField};

pub type RegressorMap = Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>;
pub type NoiseMap = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Largest regressor norm accepted over a simulation horizon.
pub const REGRESSOR_BOUND: f64 = 1e6;

#[derive(Clone)]
pub struct RegressorSignal {
    q: usize,
    phi: RegressorMap,
    theta_true: Vec<f64>,
    noise: NoiseMap,
}

impl fmt::Debug for RegressorSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegressorSignal")
            .field("q", &self.q)
            .field("theta_true", &self.theta_true)
            .finish_non_exhaustive()
    }
}

impl RegressorSignal {
    pub fn new<F>(q: usize, phi: F, theta_true: Vec<f64>) -> Result<Self>
    where
        F: Fn(f64) -> Vec<f64> + Send + Sync + 'static,
    {
        if q == 0 || theta_true.len() != q {
            return Err(Error::DimensionMismatch {
                context: "regressor parameters",
                expected: q,
                found: theta_true.len(),
            });
        }
        let probe = phi(0.0);
        if probe.len() != q {
            return Err(Error::DimensionMismatch {
                context: "regressor",
                expected: q,
                found: probe.len(),
            });
        }
        Ok(Self {
            q,
            phi: Arc::new(phi),
            theta_true,
            noise: Arc::new(|_| 0.0),
        })
    }

    /// `Φ(t) = (1, sin t + sin 3t)`, `θ = (2, −1)`.
    pub fn pe() -> Self {
        Self::new(2, pe_regressor, vec![2.0, -1.0]).expect("valid signal")
    }

    /// Three channels whose last one decays like `(1 + t)^{−1/2}`;
    /// `θ = (1, 2, 3)`.
    pub fn ie() -> Self {
        Self::new(3, ie_regressor, vec![1.0, 2.0, 3.0]).expect("valid signal")
    }

    pub fn constant(phi: Vec<f64>, theta_true: Vec<f64>) -> Result<Self> {
        let q = phi.len();
        Self::new(q, move |_| phi.clone(), theta_true)
    }

    pub fn with_theta(mut self, theta_true: Vec<f64>) -> Result<Self> {
        if theta_true.len() != self.q {
            return Err(Error::DimensionMismatch {
                context: "regressor parameters",
                expected: self.q,
                found: theta_true.len(),
            });
        }
        self.theta_true = theta_true;
        Ok(self)
    }

    pub fn with_noise<F>(mut self, noise: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.noise = Arc::new(noise);
        self
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn theta_true(&self) -> &[f64] {
        &self.theta_true
    }

    pub fn phi(&self, t: f64) -> Vec<f64> {
        (self.phi)(t)
    }

    pub fn noise(&self, t: f64) -> f64 {
        (self.noise)(t)
    }

    /// `y(t) = Φᵀ(t) θ + ε(t)`.
    pub fn output(&self, t: f64) -> f64 {
        dot(&self.phi(t), &self.theta_true) + self.noise(t)
    }

    pub fn regressor_map(&self) -> RegressorMap {
        Arc::clone(&self.phi)
    }

    /// Checks `|Φ(t)| ≤ 1e6` on a `1e-3` grid over `[0, horizon]`.
    pub fn check_bounded(&self, horizon: f64) -> Result<()> {
        let n = (horizon / 1e-3).round() as usize;
        for k in 0..=n {
            let t = k as f64 * 1e-3;
            let norm = self.phi(t).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm <= REGRESSOR_BOUND) {
                return Err(Error::Domain(format!("regressor norm {norm:e} at t = {t}")));
            }
        }
        Ok(())
    }
}

pub fn pe_regressor(t: f64) -> Vec<f64> {
    vec![1.0, t.sin() + (3.0 * t).sin()]
}

pub fn ie_regressor(t: f64) -> Vec<f64> {
    let s = 1.0 + t;
    vec![
        1.0,
        t.cos(),
        (t.sin() + t.cos()) / s.sqrt() - t.sin() / (2.0 * s.powf(1.5)),
    ]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Estimate together with the memory-regressor filter states.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorState {
    pub theta_hat: DVector<f64>,
    pub omega: DMatrix<f64>,
    pub y_filt: DVector<f64>,
}

impl EstimatorState {
    pub fn new(q: usize) -> Self {
        Self {
            theta_hat: DVector::zeros(q),
            omega: DMatrix::zeros(q, q),
            y_filt: DVector::zeros(q),
        }
    }

    /// Advances `Ω̇ = −Ω + ΦΦᵀ`, `Ẏ = −Y + Φy` by `h` with `Φ`, `y` held
    /// constant over the step (exact for that input). Each entry is a convex
    /// combination of its old value and the new product, so symmetry holds
    /// exactly and positive semi-definiteness is preserved.
    pub fn mre_step(&mut self, phi: &[f64], y: f64, h: f64) -> Result<()> {
        let q = self.omega.nrows();
        if phi.len() != q {
            return Err(Error::DimensionMismatch {
                context: "mre_step regressor",
                expected: q,
                found: phi.len(),
            });
        }
        let decay = (-h).exp();
        let gain = -(-h).exp_m1();
        for i in 0..q {
            for j in 0..q {
                self.omega[(i, j)] = decay * self.omega[(i, j)] + gain * (phi[i] * phi[j]);
            }
            self.y_filt[i] = decay * self.y_filt[i] + gain * (phi[i] * y);
        }
        Ok(())
    }

    /// Smallest eigenvalue of `Ω`.
    pub fn omega_min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.omega)
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimationMethod {
    /// `θ̃̇ = −γ Φ Φᵀ θ̃`.
    Ge,
    /// `θ̃̇ = −γ Ω θ̃`.
    MreGe,
    /// `θ̃̇ = −γ P Ω θ̃`.
    Cge,
}

impl FromStr for EstimationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GE" => Ok(Self::Ge),
            "MRE" | "MRE_GE" => Ok(Self::MreGe),
            "CGE" => Ok(Self::Cge),
            _ => Err(Error::InvalidParameter(format!("unknown estimation method {s:?}"))),
        }
    }
}

impl fmt::Display for EstimationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Self::Ge => "GE",
            Self::MreGe => "MRE_GE",
            Self::Cge => "CGE",
        })
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("gamma must be > 0, got {gamma}")))
    }
}

/// Parameter-error dynamics of the plain gradient estimator
/// `θ̂̇ = γ Φ (y − Φᵀθ̂)`, i.e. `θ̃̇ = −γ Φ (Φᵀθ̃ + ε)`.
#[derive(Clone, Debug)]
pub struct GeField {
    signal: RegressorSignal,
    gamma: f64,
}

pub fn ge_field(signal: &RegressorSignal, gamma: f64) -> Result<GeField> {
    check_gamma(gamma)?;
    Ok(GeField {
        signal: signal.clone(),
        gamma,
    })
}

impl VectorField for GeField {
    fn dim(&self) -> usize {
        self.signal.q
    }

    fn eval(&self, t: f64, err: &[f64], out: &mut [f64]) {
        let phi = self.signal.phi(t);
        let e = dot(&phi, err) + self.signal.noise(t);
        for (o, p) in out.iter_mut().zip(&phi) {
            *o = -self.gamma * p * e;
        }
    }

    fn residual(&self, _t: f64, err: &[f64]) -> f64 {
        norm(err)
    }
}

/// `P` with `P₁₁ = 1`, `Pᵢᵢ = 2` and `Pᵢ,ᵢ₋₁ = −β` below, zero elsewhere.
pub fn cge_matrix(beta: f64, q: usize) -> Result<DMatrix<f64>> {
    if q < 2 {
        return Err(Error::InvalidParameter(format!("q must be at least 2, got {q}")));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidParameter(format!("beta must lie in (0, 1), got {beta}")));
    }
    let mut p = DMatrix::zeros(q, q);
    p[(0, 0)] = 1.0;
    for i in 1..q {
        p[(i, i)] = 2.0;
        p[(i, i - 1)] = -beta;
    }
    Ok(p)
}

/// `−γ P (Ω θ̃)`. The product is formed in that order so that `P = I`
/// reproduces `−γ Ω θ̃` bit for bit.
pub fn cge_field(
    omega: &DMatrix<f64>,
    theta_err: &[f64],
    gamma: f64,
    p: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let q = theta_err.len();
    if omega.shape() != (q, q) || p.shape() != (q, q) {
        return Err(Error::DimensionMismatch {
            context: "cge_field",
            expected: q,
            found: if omega.nrows() != q { omega.nrows() } else { p.nrows() },
        });
    }
    let w = omega * DVector::from_column_slice(theta_err);
    Ok(apply_gain(p, &w, gamma))
}

fn apply_gain(p: &DMatrix<f64>, w: &DVector<f64>, gamma: f64) -> Vec<f64> {
    let v = p * w;
    v.iter().map(|x| -gamma * x).collect()
}

/// `−γ Ω θ̃`.
pub fn mre_field(omega: &DMatrix<f64>, theta_err: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let q = theta_err.len();
    if omega.shape() != (q, q) {
        return Err(Error::DimensionMismatch {
            context: "mre_field",
            expected: q,
            found: omega.nrows(),
        });
    }
    let w = omega * DVector::from_column_slice(theta_err);
    Ok(w.iter().map(|x| -gamma * x).collect())
}

/// Joint error and filter dynamics for the memory-regressor estimators.
/// State layout: `θ̃` (q), `Ω` column-major (q²), filtered `Φε` (q).
#[derive(Clone, Debug)]
pub struct FilteredErrorField {
    signal: RegressorSignal,
    gamma: f64,
    gain: DMatrix<f64>,
}

impl FilteredErrorField {
    pub fn new(signal: &RegressorSignal, gamma: f64, gain: DMatrix<f64>) -> Result<Self> {
        check_gamma(gamma)?;
        let q = signal.q;
        if gain.shape() != (q, q) {
            return Err(Error::DimensionMismatch {
                context: "estimator gain",
                expected: q,
                found: gain.nrows(),
            });
        }
        Ok(Self {
            signal: signal.clone(),
            gamma,
            gain,
        })
    }

    pub fn initial_state(&self, theta_err0: &[f64]) -> Vec<f64> {
        let q = self.signal.q;
        let mut s = theta_err0.to_vec();
        s.resize(q + q * q + q, 0.0);
        s
    }

    pub fn omega_of(&self, state: &[f64]) -> DMatrix<f64> {
        let q = self.signal.q;
        DMatrix::from_column_slice(q, q, &state[q..q + q * q])
    }
}

impl VectorField for FilteredErrorField {
    fn dim(&self) -> usize {
        let q = self.signal.q;
        2 * q + q * q
    }

    fn eval(&self, t: f64, state: &[f64], out: &mut [f64]) {
        let q = self.signal.q;
        let phi = self.signal.phi(t);
        let eps = self.signal.noise(t);
        let omega = self.omega_of(state);
        let filt_noise = &state[q + q * q..];

        let mut w = &omega * DVector::from_column_slice(&state[..q]);
        for i in 0..q {
            w[i] += filt_noise[i];
        }
        let d_err = apply_gain(&self.gain, &w, self.gamma);
        out[..q].copy_from_slice(&d_err);
        for j in 0..q {
            for i in 0..q {
                let k = q + j * q + i;
                out[k] = -state[k] + phi[i] * phi[j];
            }
        }
        for i in 0..q {
            out[q + q * q + i] = -filt_noise[i] + phi[i] * eps;
        }
    }

    fn residual(&self, _t: f64, state: &[f64]) -> f64 {
        norm(&state[..self.signal.q])
    }
}

/// The estimator as it would run online, on `(θ̂, Ω, Y)` with `Y` the
/// filtered `Φy`. Used to cross-check the error formulation.
#[derive(Clone, Debug)]
pub struct OnlineEstimator {
    signal: RegressorSignal,
    method: EstimationMethod,
    gamma: f64,
    gain: DMatrix<f64>,
}

impl OnlineEstimator {
    pub fn new(signal: &RegressorSignal, method: EstimationMethod, gamma: f64, beta: f64) -> Result<Self> {
        check_gamma(gamma)?;
        let q = signal.q;
        let gain = match method {
            EstimationMethod::Cge => cge_matrix(beta, q)?,
            _ => DMatrix::identity(q, q),
        };
        Ok(Self {
            signal: signal.clone(),
            method,
            gamma,
            gain,
        })
    }

    pub fn initial_state(&self, theta_hat0: &[f64]) -> Vec<f64> {
        let q = self.signal.q;
        let mut s = theta_hat0.to_vec();
        s.resize(2 * q + q * q, 0.0);
        s
    }
}

impl VectorField for OnlineEstimator {
    fn dim(&self) -> usize {
        let q = self.signal.q;
        2 * q + q * q
    }

    fn eval(&self, t: f64, state: &[f64], out: &mut [f64]) {
        let q = self.signal.q;
        let phi = self.signal.phi(t);
        let y = self.signal.output(t);
        let theta_hat = &state[..q];
        let omega = DMatrix::from_column_slice(q, q, &state[q..q + q * q]);
        let y_filt = &state[q + q * q..];

        match self.method {
            EstimationMethod::Ge => {
                let e = y - dot(&phi, theta_hat);
                for i in 0..q {
                    out[i] = self.gamma * phi[i] * e;
                }
            }
            _ => {
                let pred = &omega * DVector::from_column_slice(theta_hat);
                let diff = DVector::from_iterator(q, (0..q).map(|i| y_filt[i] - pred[i]));
                let v = &self.gain * diff;
                for i in 0..q {
                    out[i] = self.gamma * v[i];
                }
            }
        }
        for j in 0..q {
            for i in 0..q {
                let k = q + j * q + i;
                out[k] = -state[k] + phi[i] * phi[j];
            }
        }
        for i in 0..q {
            out[q + q * q + i] = -y_filt[i] + phi[i] * y;
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimationConfig {
    pub gamma: f64,
    pub beta: f64,
    pub t_end: f64,
    pub step: f64,
    pub record_every: usize,
    /// Initial estimate; zero when absent.
    pub theta_hat0: Option<Vec<f64>>,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            gamma: 100.0,
            beta: 0.9,
            t_end: 20.0,
            step: 1e-3,
            record_every: 1,
            theta_hat0: None,
        }
    }
}

/// Parameter-error trace of one run. The trajectory holds `θ̃` only, with
/// `|θ̃|` as its residual channel.
#[derive(Clone, Debug)]
pub struct EstimationRun {
    pub method: EstimationMethod,
    pub trajectory: Trajectory,
    /// Metrics of `|θ̃|` against zero.
    pub norm_report: ConvergenceReport,
    /// Metrics of each `θ̃ᵢ` against zero.
    pub component_reports: Vec<ConvergenceReport>,
}

impl EstimationRun {
    pub fn final_error_norm(&self) -> f64 {
        *self.trajectory.residuals.last().expect("non-empty run")
    }

    pub fn sign_changes(&self) -> Vec<usize> {
        self.component_reports.iter().map(|r| r.sign_change_count).collect()
    }
}

pub fn run_estimation(
    signal: &RegressorSignal,
    method: EstimationMethod,
    config: &EstimationConfig,
) -> Result<EstimationRun> {
    let q = signal.q;
    signal.check_bounded(config.t_end)?;
    let theta_hat0 = config.theta_hat0.clone().unwrap_or_else(|| vec![0.0; q]);
    if theta_hat0.len() != q {
        return Err(Error::DimensionMismatch {
            context: "initial estimate",
            expected: q,
            found: theta_hat0.len(),
        });
    }
    let err0: Vec<f64> = signal.theta_true.iter().zip(&theta_hat0).map(|(a, b)| a - b).collect();

    let raw = match method {
        EstimationMethod::Ge => {
            let field = ge_field(signal, config.gamma)?;
            let cfg = SimConfig::new(config.t_end, config.step, err0)
                .with_record_every(config.record_every);
            sim::integrate(&field, &cfg)?
        }
        EstimationMethod::MreGe | EstimationMethod::Cge => {
            let gain = if method == EstimationMethod::Cge {
                cge_matrix(config.beta, q)?
            } else {
                DMatrix::identity(q, q)
            };
            let field = FilteredErrorField::new(signal, config.gamma, gain)?;
            let cfg = SimConfig::new(config.t_end, config.step, field.initial_state(&err0))
                .with_record_every(config.record_every);
            sim::integrate(&field, &cfg)?
        }
    };

    let states: Vec<Vec<f64>> = raw.states.iter().map(|s| s[..q].to_vec()).collect();
    let residuals: Vec<f64> = states.iter().map(|s| norm(s)).collect();
    let trajectory = Trajectory {
        inputs: vec![0.0; states.len()],
        times: raw.times,
        states,
        residuals,
    };
    let norm_report = sim::transient_metrics_of(&trajectory.times, &trajectory.residuals, 0.0);
    let component_reports = (0..q).map(|i| sim::transient_metrics(&trajectory, 0.0, i)).collect();
    Ok(EstimationRun {
        method,
        trajectory,
        norm_report,
        component_reports,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExcitationKind {
    Pe,
    IeOnly,
    Neither,
}

impl fmt::Display for ExcitationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Self::Pe => "PE",
            Self::IeOnly => "IE_ONLY",
            Self::Neither => "NEITHER",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExcitationVerdict {
    pub kind: ExcitationKind,
    /// For PE the smallest window level (the uniform bound); otherwise the
    /// largest one (the best interval found).
    pub level: f64,
    pub window: f64,
    pub min_level: f64,
    pub max_level: f64,
    /// Start time of the first passing window, if any.
    pub first_passing_window: Option<f64>,
}

/// Settings for [`ExcitationCheck::run`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExcitationCheck {
    pub horizon: f64,
    pub window: f64,
    pub level_threshold: f64,
    /// A window passes only if its level is also at least this fraction of
    /// the best window level over the horizon.
    pub uniformity: f64,
    pub dt: f64,
    pub stride: f64,
}

impl ExcitationCheck {
    pub fn new(horizon: f64, window: f64, level_threshold: f64) -> Self {
        Self {
            horizon,
            window,
            level_threshold,
            uniformity: 0.25,
            dt: 1e-3,
            stride: 0.1,
        }
    }

    /// Windowed `λ_min(∫ₜ^{t+T} Φ Φᵀ dτ)` for every window start, trapezoid
    /// rule on the `dt` grid.
    pub fn window_levels<F>(&self, phi: F) -> Result<Vec<(f64, f64)>>
    where
        F: Fn(f64) -> Vec<f64>,
    {
        if !(self.window > 0.0 && self.window <= self.horizon) {
            return Err(Error::InvalidParameter(format!(
                "window {} must lie in (0, horizon = {}]",
                self.window, self.horizon
            )));
        }
        let n = (self.horizon / self.dt).round() as usize;
        let w = (self.window / self.dt).round() as usize;
        let stride = ((self.stride / self.dt).round() as usize).max(1);
        let q = phi(0.0).len();

        // cumulative trapezoid sums of Φ Φᵀ, one q×q block per grid point
        let mut cum = vec![0.0; (n + 1) * q * q];
        let mut prev = outer(&phi(0.0));
        for k in 1..=n {
            let cur = outer(&phi(k as f64 * self.dt));
            for idx in 0..q * q {
                cum[k * q * q + idx] =
                    cum[(k - 1) * q * q + idx] + 0.5 * self.dt * (prev[idx] + cur[idx]);
            }
            prev = cur;
        }

        let mut levels = Vec::new();
        let mut start = 0;
        while start + w <= n {
            let gram = DMatrix::from_fn(q, q, |i, j| {
                let idx = i * q + j;
                cum[(start + w) * q * q + idx] - cum[start * q * q + idx]
            });
            let sym = (&gram + gram.transpose()) * 0.5;
            levels.push((start as f64 * self.dt, min_eigenvalue(&sym).max(0.0)));
            start += stride;
        }
        Ok(levels)
    }

    pub fn run<F>(&self, phi: F) -> Result<ExcitationVerdict>
    where
        F: Fn(f64) -> Vec<f64>,
    {
        let levels = self.window_levels(phi)?;
        let min_level = levels.iter().map(|l| l.1).fold(f64::INFINITY, f64::min);
        let max_level = levels.iter().map(|l| l.1).fold(0.0, f64::max);
        let bar = self.level_threshold.max(self.uniformity * max_level);
        let passing = levels.iter().filter(|l| l.1 >= bar).count();
        let first_passing_window = levels.iter().find(|l| l.1 >= bar).map(|l| l.0);
        let (kind, level) = if passing == levels.len() {
            (ExcitationKind::Pe, min_level)
        } else if passing > 0 {
            (ExcitationKind::IeOnly, max_level)
        } else {
            (ExcitationKind::Neither, max_level)
        };
        Ok(ExcitationVerdict {
            kind,
            level,
            window: self.window,
            min_level,
            max_level,
            first_passing_window,
        })
    }
}

fn outer(v: &[f64]) -> Vec<f64> {
    let q = v.len();
    let mut m = vec![0.0; q * q];
    for i in 0..q {
        for j in 0..q {
            m[i * q + j] = v[i] * v[j];
        }
    }
    m
}

/// Excitation verdict with the default uniformity, grid and stride.
pub fn excitation_check<F>(
    phi: F,
    horizon: f64,
    window: f64,
    level_threshold: f64,
) -> Result<ExcitationVerdict>
where
    F: Fn(f64) -> Vec<f64>,
{
    ExcitationCheck::new(horizon, window, level_threshold).run(phi)
}
