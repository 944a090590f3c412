//! Fixed-step integration, trajectory recording and convergence diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// States whose Euclidean norm exceeds this are treated as a blow-up.
pub const BLOW_UP_NORM: f64 = 1e12;

/// Samples at or below this magnitude are excluded from exponential fits.
pub const FIT_FLOOR: f64 = 1e-8;

/// Minimum number of qualifying samples for an exponential fit.
pub const FIT_MIN_SAMPLES: usize = 10;

/// Settling band as a fraction of the reference (or of the peak deviation).
pub const SETTLING_BAND: f64 = 0.02;

/// A possibly time-varying vector field with optional scalar observables.
pub trait VectorField {
    fn dim(&self) -> usize;

    fn eval(&self, t: f64, state: &[f64], out: &mut [f64]);

    /// Manifold residual recorded alongside the state; zero when not defined.
    fn residual(&self, _t: f64, _state: &[f64]) -> f64 {
        0.0
    }

    /// Control input recorded alongside the state; zero when not defined.
    fn input(&self, _t: f64, _state: &[f64]) -> f64 {
        0.0
    }

    fn derivative(&self, t: f64, state: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval(t, state, &mut out);
        out
    }
}

impl<F: VectorField + ?Sized> VectorField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, t: f64, state: &[f64], out: &mut [f64]) {
        (**self).eval(t, state, out)
    }
    fn residual(&self, t: f64, state: &[f64]) -> f64 {
        (**self).residual(t, state)
    }
    fn input(&self, t: f64, state: &[f64]) -> f64 {
        (**self).input(t, state)
    }
}

/// Adapter turning a closure `(t, x, dx)` into a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, state: &[f64], out: &mut [f64]) {
        (self.f)(t, state, out)
    }
}

/// Linear time-invariant field `ẋ = A x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearField {
    pub a: DMatrix<f64>,
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
    fn eval(&self, _t: f64, state: &[f64], out: &mut [f64]) {
        let n = self.a.nrows();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            *o = (0..n).map(|j| self.a[(i, j)] * state[j]).sum();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub t_end: f64,
    pub step: f64,
    pub record_every: usize,
    pub initial_state: Vec<f64>,
}

impl SimConfig {
    pub fn new(t_end: f64, step: f64, initial_state: Vec<f64>) -> Self {
        Self {
            t_end,
            step,
            record_every: 1,
            initial_state,
        }
    }

    pub fn with_record_every(mut self, record_every: usize) -> Self {
        self.record_every = record_every;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidParameter(format!("step must be > 0, got {}", self.step)));
        }
        if !(self.step <= self.t_end && self.t_end.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < step <= t_end, got step {} and t_end {}",
                self.step, self.t_end
            )));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParameter("record_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of integration steps; `t_end` is rounded to the step grid.
    pub fn steps(&self) -> usize {
        (self.t_end / self.step).round() as usize
    }
}

/// Recorded samples of a simulation; every vector has one entry per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub inputs: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// One state component across all samples.
    pub fn channel(&self, index: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[index]).collect()
    }

    pub fn final_state(&self) -> Option<&[f64]> {
        self.states.last().map(Vec::as_slice)
    }

    /// Storage `½M²` at every sample.
    pub fn storage(&self) -> Vec<f64> {
        self.residuals.iter().map(|m| 0.5 * m * m).collect()
    }
}

/// Classic fourth-order Runge–Kutta with a fixed step, starting at `t = 0`.
///
/// Sample times are computed as `k * step` so that runs are bit-reproducible.
pub fn integrate<F>(field: &F, config: &SimConfig) -> Result<Trajectory>
where
    F: VectorField + ?Sized,
{
    config.validate()?;
    let n = field.dim();
    if config.initial_state.len() != n {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: n,
            found: config.initial_state.len(),
        });
    }
    let steps = config.steps();
    let h = config.step;

    let mut x = config.initial_state.clone();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    let capacity = steps / config.record_every + 1;
    let mut traj = Trajectory {
        times: Vec::with_capacity(capacity),
        states: Vec::with_capacity(capacity),
        residuals: Vec::with_capacity(capacity),
        inputs: Vec::with_capacity(capacity),
    };

    field.eval(0.0, &x, &mut k1);
    check_finite(0.0, &k1, "field at initial state")?;
    record(field, &mut traj, 0.0, &x)?;

    for k in 0..steps {
        let t = k as f64 * h;
        field.eval(t, &x, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        field.eval(t + 0.5 * h, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        field.eval(t + 0.5 * h, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + h * k3[i];
        }
        field.eval(t + h, &tmp, &mut k4);
        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }

        let t_next = (k + 1) as f64 * h;
        check_finite(t_next, &x, "state")?;
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > BLOW_UP_NORM {
            return Err(Error::BlowUp { t: t_next, norm });
        }
        if (k + 1) % config.record_every == 0 {
            record(field, &mut traj, t_next, &x)?;
        }
    }
    Ok(traj)
}

fn record<F: VectorField + ?Sized>(
    field: &F,
    traj: &mut Trajectory,
    t: f64,
    x: &[f64],
) -> Result<()> {
    let residual = field.residual(t, x);
    let input = field.input(t, x);
    check_finite(t, &[residual], "residual")?;
    check_finite(t, &[input], "input")?;
    traj.times.push(t);
    traj.states.push(x.to_vec());
    traj.residuals.push(residual);
    traj.inputs.push(input);
    Ok(())
}

fn check_finite(t: f64, values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            t,
            what: what.to_string(),
        })
    }
}

/// `e^{At} x₀` by scaling and squaring of a Taylor series; used as an
/// independent reference for the integrator on linear systems.
pub fn linear_analytic_oracle(a: &DMatrix<f64>, x0: &[f64], t: f64) -> Vec<f64> {
    let e = expm(&(a * t));
    (e * DVector::from_column_slice(x0)).iter().copied().collect()
}

/// Matrix exponential via scaling and squaring with a truncated Taylor
/// series (terms added until they fall below machine precision).
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.lp_norm(1).max(a.transpose().lp_norm(1)).max(a.amax());
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        squarings += 1;
    }
    let scaled = a * scale;
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=40 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if term.amax() <= f64::EPSILON * 1e-3 * sum.amax() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Least-squares decay rate of `|value|` against time: minus the slope of
/// `ln|value|` over samples with `|value| > 1e-8`.
pub fn fit_exponential_rate(times: &[f64], values: &[f64]) -> Result<f64> {
    let (ts, ys): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(values)
        .filter(|(_, v)| v.abs() > FIT_FLOOR)
        .map(|(t, v)| (*t, v.abs().ln()))
        .unzip();
    if ts.len() < FIT_MIN_SAMPLES {
        return Err(Error::InsufficientSamples {
            found: ts.len(),
            required: FIT_MIN_SAMPLES,
        });
    }
    let n = ts.len() as f64;
    let t_mean = ts.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (t, y) in ts.iter().zip(&ys) {
        sxy += (t - t_mean) * (y - y_mean);
        sxx += (t - t_mean) * (t - t_mean);
    }
    Ok(-sxy / sxx)
}

/// Decay rates normal to the manifold (of `|M|`) and along it (of the base
/// coordinate error `|x − x*|`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateSplit {
    pub tangential: f64,
    pub normal: f64,
}

impl RateSplit {
    /// Normal-over-tangential rate ratio; above one the manifold attracts
    /// faster than the flow on it.
    pub fn dominance(&self) -> f64 {
        self.normal / self.tangential
    }
}

/// Fits the normal and tangential decay rates of a trajectory converging to
/// `equilibrium` (base coordinates). A channel that never rises above the
/// fit floor is reported with rate zero.
pub fn rate_split(traj: &Trajectory, equilibrium: &[f64]) -> Result<RateSplit> {
    let base = equilibrium.len();
    if traj.state_dim() < base {
        return Err(Error::DimensionMismatch {
            context: "rate_split equilibrium",
            expected: traj.state_dim(),
            found: base,
        });
    }
    let tangential_err: Vec<f64> = traj
        .states
        .iter()
        .map(|s| {
            s[..base]
                .iter()
                .zip(equilibrium)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(RateSplit {
        tangential: rate_or_zero(&traj.times, &tangential_err)?,
        normal: rate_or_zero(&traj.times, &traj.residuals)?,
    })
}

fn rate_or_zero(times: &[f64], values: &[f64]) -> Result<f64> {
    if values.iter().all(|v| v.abs() <= FIT_FLOOR) {
        return Ok(0.0);
    }
    fit_exponential_rate(times, values)
}

/// Step-response style metrics for a single recorded signal.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    /// Fitted decay rate of `|y − ref|`, absent when too few samples qualify.
    pub fitted_rate: Option<f64>,
    /// First time after which the error stays inside the 2% band; `None`
    /// when the signal has not settled by the end of the record.
    pub settling_time_2pct: Option<f64>,
    pub steady_state_error: f64,
    pub overshoot_pct: f64,
    pub sign_change_count: usize,
}

impl ConvergenceReport {
    pub fn settled(&self) -> bool {
        self.settling_time_2pct.is_some()
    }
}

/// [`transient_metrics_of`] applied to one state channel of a trajectory.
pub fn transient_metrics(traj: &Trajectory, reference: f64, channel: usize) -> ConvergenceReport {
    transient_metrics_of(&traj.times, &traj.channel(channel), reference)
}

/// Settling time (2% band around `reference`, or 2% of the peak deviation
/// when the reference is zero), overshoot relative to the reference (or the
/// initial deviation), final error and the number of error sign changes.
///
/// Sign changes ignore samples within `1e-9` of the peak error so that
/// rounding noise around a converged value is not counted.
pub fn transient_metrics_of(times: &[f64], values: &[f64], reference: f64) -> ConvergenceReport {
    let errors: Vec<f64> = values.iter().map(|y| y - reference).collect();
    let peak = errors.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
    let band = if reference != 0.0 {
        SETTLING_BAND * reference.abs()
    } else {
        SETTLING_BAND * peak
    };

    let settling_time_2pct = match errors.iter().rposition(|e| e.abs() > band) {
        None => times.first().copied(),
        Some(last) if last + 1 < times.len() => Some(times[last + 1]),
        Some(_) => None,
    };

    let initial = errors.first().copied().unwrap_or(0.0);
    let direction = -initial.signum();
    let denom = if reference != 0.0 {
        reference.abs()
    } else {
        initial.abs()
    };
    let overshoot_pct = if initial == 0.0 || denom == 0.0 {
        0.0
    } else {
        let worst = errors.iter().fold(0.0_f64, |m, e| m.max(e * direction));
        100.0 * worst / denom
    };

    let deadband = 1e-9 * peak;
    let mut sign_change_count = 0;
    let mut previous = 0.0_f64;
    for &e in &errors {
        if e.abs() <= deadband {
            continue;
        }
        if previous != 0.0 && e.signum() != previous {
            sign_change_count += 1;
        }
        previous = e.signum();
    }

    ConvergenceReport {
        fitted_rate: fit_exponential_rate(times, &errors).ok(),
        settling_time_2pct,
        steady_state_error: errors.last().map_or(0.0, |e| e.abs()),
        overshoot_pct,
        sign_change_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn decay() -> FnField<impl Fn(f64, &[f64], &mut [f64])> {
        FnField::new(1, |_, x: &[f64], dx: &mut [f64]| dx[0] = -x[0])
    }

    #[test]
    fn scalar_decay_matches_exponential() {
        let traj = integrate(&decay(), &SimConfig::new(1.0, 1e-3, vec![1.0])).unwrap();
        assert_eq!(traj.len(), 1001);
        assert_eq!(*traj.times.last().unwrap(), 1.0);
        assert!((traj.final_state().unwrap()[0] - (-1.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn zero_field_is_constant() {
        let f = FnField::new(2, |_, _: &[f64], dx: &mut [f64]| dx.fill(0.0));
        let traj = integrate(&f, &SimConfig::new(2.0, 0.1, vec![3.0, -1.0])).unwrap();
        assert!(traj.states.iter().all(|s| s == &vec![3.0, -1.0]));
    }

    #[test]
    fn decimation_keeps_uniform_spacing() {
        let cfg = SimConfig::new(1.0, 0.01, vec![1.0]).with_record_every(10);
        let traj = integrate(&decay(), &cfg).unwrap();
        assert_eq!(traj.len(), 11);
        for w in traj.times.windows(2) {
            assert_relative_eq!(w[1] - w[0], 0.1, max_relative = 1e-12);
        }
    }

    #[test]
    fn blow_up_and_nan_are_reported() {
        let explode = FnField::new(1, |_, x: &[f64], dx: &mut [f64]| dx[0] = x[0] * x[0]);
        let err = integrate(&explode, &SimConfig::new(5.0, 1e-3, vec![1.0])).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. } | Error::NonFinite { .. }), "{err:?}");

        let nan = FnField::new(1, |_, _: &[f64], dx: &mut [f64]| dx[0] = f64::NAN);
        let err = integrate(&nan, &SimConfig::new(1.0, 0.1, vec![0.0])).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::new(1.0, 0.0, vec![0.0]).validate().is_err());
        assert!(SimConfig::new(1.0, 2.0, vec![0.0]).validate().is_err());
        assert!(SimConfig::new(1.0, 0.1, vec![0.0])
            .with_record_every(0)
            .validate()
            .is_err());
        let wrong_dim = integrate(&decay(), &SimConfig::new(1.0, 0.1, vec![0.0, 1.0]));
        assert!(matches!(wrong_dim, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn oracle_examples() {
        let a = DMatrix::from_row_slice(1, 1, &[-1.0]);
        assert!((linear_analytic_oracle(&a, &[1.0], 1.0)[0] - (-1.0f64).exp()).abs() < 1e-14);

        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -2.0]);
        let x = linear_analytic_oracle(&a, &[1.0, 0.0], 1.0);
        let e = (-1.0f64).exp();
        assert!((x[0] - 2.0 * e).abs() < 1e-12);
        assert!((x[1] + e).abs() < 1e-12);

        let zero = DMatrix::zeros(3, 3);
        assert_eq!(linear_analytic_oracle(&zero, &[1.0, 2.0, 3.0], 7.0), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn oracle_agrees_with_rotation() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let x = linear_analytic_oracle(&a, &[1.0, 0.0], 10.0);
        assert!((x[0] - 10f64.cos()).abs() < 1e-12);
        assert!((x[1] + 10f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn fit_examples() {
        let times: Vec<f64> = (0..200).map(|k| k as f64 * 0.01).collect();
        let exp2: Vec<f64> = times.iter().map(|t| (-2.0 * t).exp()).collect();
        assert!((fit_exponential_rate(&times, &exp2).unwrap() - 2.0).abs() < 1e-6);
        let constant = vec![0.37; times.len()];
        assert!(fit_exponential_rate(&times, &constant).unwrap().abs() < 1e-9);
        let tiny = vec![1e-9; times.len()];
        assert!(matches!(
            fit_exponential_rate(&times, &tiny),
            Err(Error::InsufficientSamples { found: 0, .. })
        ));
    }

    #[test]
    fn rate_split_of_stationary_trajectory() {
        let traj = Trajectory {
            times: vec![0.0, 1.0, 2.0],
            states: vec![vec![0.0, 0.0]; 3],
            residuals: vec![0.0; 3],
            inputs: vec![0.0; 3],
        };
        let r = rate_split(&traj, &[0.0]).unwrap();
        assert_eq!((r.tangential, r.normal), (0.0, 0.0));
    }

    #[test]
    fn metrics_on_exact_reference() {
        let times: Vec<f64> = (0..100).map(|k| k as f64 * 0.1).collect();
        let r = transient_metrics_of(&times, &vec![5.0; 100], 5.0);
        assert_eq!(r.settling_time_2pct, Some(0.0));
        assert_eq!(r.overshoot_pct, 0.0);
        assert_eq!(r.steady_state_error, 0.0);
        assert_eq!(r.sign_change_count, 0);
    }

    #[test]
    fn metrics_on_first_order_rise() {
        let dt = 1e-3;
        let times: Vec<f64> = (0..=8000).map(|k| k as f64 * dt).collect();
        let y: Vec<f64> = times.iter().map(|t| 2.0 * (1.0 - (-t).exp())).collect();
        let r = transient_metrics_of(&times, &y, 2.0);
        let settle = r.settling_time_2pct.unwrap();
        assert!((settle - 50f64.ln()).abs() <= dt, "{settle}");
        assert_eq!(r.overshoot_pct, 0.0);
        assert_eq!(r.sign_change_count, 0);
    }

    #[test]
    fn metrics_count_oscillations() {
        let dt = 1e-4;
        let n = (std::f64::consts::PI / dt) as usize;
        let times: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
        let y: Vec<f64> = times.iter().map(|t| (-t).exp() * (10.0 * t).sin()).collect();
        let r = transient_metrics_of(&times, &y, 0.0);
        // interior zeros of sin(10t) on (0, π) sit at kπ/10, k = 1..9
        assert_eq!(r.sign_change_count, 9);

        let times: Vec<f64> = (0..=n + 500).map(|k| k as f64 * dt).collect();
        let y: Vec<f64> = times.iter().map(|t| (-t).exp() * (10.0 * t).sin()).collect();
        assert!(transient_metrics_of(&times, &y, 0.0).sign_change_count >= 10);
    }

    #[test]
    fn unsettled_signal_is_flagged() {
        let times: Vec<f64> = (0..50).map(|k| k as f64).collect();
        let y: Vec<f64> = times.iter().map(|t| t.sin()).collect();
        let r = transient_metrics_of(&times, &y, 0.0);
        assert!(!r.settled());
    }
}
