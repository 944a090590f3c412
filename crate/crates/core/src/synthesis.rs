//! Control synthesis on an implicit manifold: residual, storage function,
//! the pathway-plus-push control law and the closed-loop vector field.
//!
//! For a plant `ẋ = f(x, λ)`, `λ̇ = g(x, λ) + u` and residual
//! `M = λ ± φ(x)`, the law
//!
//! ```text
//! u = −g − (±∇φ(x))·f(x, λ) − α M
//! ```
//!
//! makes `Ṁ = −α M` hold identically, hence `Ṡ = −2α S` for `S = ½ M²`.
//! With `cancel_drift = false` the `−g` term is dropped.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::manifold::{self, ImplicitManifold, SINGULAR_BLOCK_THRESHOLD};
use crate::numdiff;
use crate::sim::{self, FnField, SimConfig, VectorField};

pub type DriftMap = Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>;
pub type FiberDriftMap = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;

/// `ẋ = f(x, λ)`, `λ̇ = g(x, λ) + u` on a state of dimension `state_dim`.
#[derive(Clone)]
pub struct ControlAffinePlant {
    state_dim: usize,
    f: DriftMap,
    g: FiberDriftMap,
}

impl fmt::Debug for ControlAffinePlant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffinePlant")
            .field("state_dim", &self.state_dim)
            .finish_non_exhaustive()
    }
}

impl ControlAffinePlant {
    pub fn new<F, G>(state_dim: usize, f: F, g: G) -> Self
    where
        F: Fn(&[f64], f64) -> Vec<f64> + Send + Sync + 'static,
        G: Fn(&[f64], f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            state_dim,
            f: Arc::new(f),
            g: Arc::new(g),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn base_drift(&self, x: &[f64], lambda: f64) -> Result<Vec<f64>> {
        let fx = (self.f)(x, lambda);
        if fx.len() != self.state_dim - 1 {
            return Err(Error::DimensionMismatch {
                context: "base drift",
                expected: self.state_dim - 1,
                found: fx.len(),
            });
        }
        if fx.iter().all(|v| v.is_finite()) {
            Ok(fx)
        } else {
            Err(Error::Domain(format!("f undefined at x = {x:?}, λ = {lambda}")))
        }
    }

    pub fn fiber_drift(&self, x: &[f64], lambda: f64) -> Result<f64> {
        let g = (self.g)(x, lambda);
        if g.is_finite() {
            Ok(g)
        } else {
            Err(Error::Domain(format!("g undefined at x = {x:?}, λ = {lambda}")))
        }
    }
}

/// Manifold, convergence gain `α > 0` and whether the fiber drift is cancelled.
#[derive(Clone, Debug)]
pub struct PniLaw {
    manifold: ImplicitManifold,
    alpha: f64,
    cancel_drift: bool,
}

impl PniLaw {
    pub fn new(manifold: ImplicitManifold, alpha: f64, cancel_drift: bool) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha must be > 0, got {alpha}")));
        }
        Ok(Self {
            manifold,
            alpha,
            cancel_drift,
        })
    }

    pub fn manifold(&self) -> &ImplicitManifold {
        &self.manifold
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn cancel_drift(&self) -> bool {
        self.cancel_drift
    }
}

pub fn residual(manifold: &ImplicitManifold, x: &[f64], lambda: f64) -> f64 {
    manifold.residual(x, lambda)
}

/// `S = ½ M²`.
pub fn storage(manifold: &ImplicitManifold, x: &[f64], lambda: f64) -> f64 {
    storage_of_residual(residual(manifold, x, lambda))
}

pub fn storage_of_residual(m: f64) -> f64 {
    0.5 * m * m
}

/// The control input at `(x, λ)`.
pub fn pni_control(plant: &ControlAffinePlant, law: &PniLaw, x: &[f64], lambda: f64) -> Result<f64> {
    let f = plant.base_drift(x, lambda)?;
    let connection = law.manifold.connection(x)?;
    let pathway: f64 = connection.iter().zip(&f).map(|(c, v)| c * v).sum();
    let push = law.alpha * law.manifold.try_phi(x).map(|phi| {
        lambda + law.manifold.sign().factor() * phi
    })?;
    let drift = if law.cancel_drift {
        plant.fiber_drift(x, lambda)?
    } else {
        0.0
    };
    Ok(-drift - pathway - push)
}

/// Closed loop of a plant under a [`PniLaw`].
#[derive(Clone, Debug)]
pub struct ClosedLoopField {
    plant: ControlAffinePlant,
    law: PniLaw,
}

pub fn close_loop(plant: ControlAffinePlant, law: PniLaw) -> Result<ClosedLoopField> {
    if plant.state_dim() != law.manifold.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "plant vs manifold",
            expected: law.manifold.state_dim(),
            found: plant.state_dim(),
        });
    }
    Ok(ClosedLoopField { plant, law })
}

impl ClosedLoopField {
    pub fn plant(&self) -> &ControlAffinePlant {
        &self.plant
    }

    pub fn law(&self) -> &PniLaw {
        &self.law
    }

    pub fn manifold(&self) -> &ImplicitManifold {
        &self.law.manifold
    }

    fn parts<'a>(&self, state: &'a [f64]) -> Result<(&'a [f64], f64)> {
        if state.len() != self.plant.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "closed-loop state",
                expected: self.plant.state_dim(),
                found: state.len(),
            });
        }
        let (x, lambda) = state.split_at(state.len() - 1);
        Ok((x, lambda[0]))
    }

    /// Full-state time derivative `(f, g + u)`.
    pub fn try_eval(&self, state: &[f64]) -> Result<Vec<f64>> {
        let (x, lambda) = self.parts(state)?;
        let mut out = self.plant.base_drift(x, lambda)?;
        let u = pni_control(&self.plant, &self.law, x, lambda)?;
        out.push(self.plant.fiber_drift(x, lambda)? + u);
        Ok(out)
    }

    pub fn residual_at(&self, state: &[f64]) -> f64 {
        let (x, lambda) = state.split_at(state.len() - 1);
        self.law.manifold.residual(x, lambda[0])
    }

    pub fn control_at(&self, state: &[f64]) -> Result<f64> {
        let (x, lambda) = self.parts(state)?;
        pni_control(&self.plant, &self.law, x, lambda)
    }

    /// `Ṁ` along the field, computed as `λ̇ + (±∇φ)·ẋ`.
    pub fn residual_rate(&self, state: &[f64]) -> Result<f64> {
        let (x, _) = self.parts(state)?;
        let v = self.try_eval(state)?;
        let connection = self.law.manifold.connection(x)?;
        let n = v.len();
        Ok(v[n - 1] + connection.iter().zip(&v[..n - 1]).map(|(c, d)| c * d).sum::<f64>())
    }

    /// `v_hᵀ R v_v` for the field vector at `state`, with `R` the metric of
    /// the manifold at the base point. The controlled correction lives in
    /// the vertical part, so this should vanish.
    pub fn pathway_orthogonality(&self, state: &[f64]) -> Result<f64> {
        let (x, _) = self.parts(state)?;
        let v = self.try_eval(state)?;
        let metric = manifold::build_metric(&self.law.manifold, x)?;
        let connection = manifold::connection_from_metric(&metric)?;
        let split = manifold::split_tangent(&v, &connection)?;
        Ok(split.orthogonality_defect(&metric))
    }

    /// Dynamics restricted to the manifold, `ẋ = f(x, ∓φ(x))`.
    pub fn target_dynamics(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = &self.law.manifold;
        let lambda = -m.sign().factor() * m.try_phi(x)?;
        self.plant.base_drift(x, lambda)
    }
}

impl VectorField for ClosedLoopField {
    fn dim(&self) -> usize {
        self.plant.state_dim()
    }

    fn eval(&self, _t: f64, state: &[f64], out: &mut [f64]) {
        match self.try_eval(state) {
            Ok(v) => out.copy_from_slice(&v),
            Err(_) => out.fill(f64::NAN),
        }
    }

    fn residual(&self, _t: f64, state: &[f64]) -> f64 {
        self.residual_at(state)
    }

    fn input(&self, _t: f64, state: &[f64]) -> f64 {
        self.control_at(state).unwrap_or(f64::NAN)
    }
}

/// Linear field rewritten through the sensitivity-conditioning transform
/// `[[1, 0], [∇φ, 1]]` with `∇φ = a21 / a22`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedField {
    pub connection: f64,
    pub transform: DMatrix<f64>,
    /// `transform * A`: first row unchanged, second row gains the pathway
    /// term `∇φ ẋ₁`.
    pub matrix: DMatrix<f64>,
}

pub fn conditioned_field(a: &DMatrix<f64>) -> Result<ConditionedField> {
    if a.shape() != (2, 2) {
        return Err(Error::DimensionMismatch {
            context: "conditioned_field",
            expected: 2,
            found: a.nrows(),
        });
    }
    let a22 = a[(1, 1)];
    if !(a22.abs() >= SINGULAR_BLOCK_THRESHOLD) {
        return Err(Error::SingularBlock {
            value: a22,
            threshold: SINGULAR_BLOCK_THRESHOLD,
        });
    }
    let connection = a[(1, 0)] / a22;
    let transform = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, connection, 1.0]);
    let matrix = &transform * a;
    Ok(ConditionedField {
        connection,
        transform,
        matrix,
    })
}

/// Largest `V̇ = ẋᵀ J ẋ` found and whether all of them are non-positive.
#[derive(Clone, Debug, PartialEq)]
pub struct KrasovskiiReport {
    pub passed: bool,
    pub worst: f64,
    pub worst_point: Option<Vec<f64>>,
}

/// Evaluates `V̇` for `V = ½|ẋ|²` at each sample, with the Jacobian of the
/// target field taken by central differences. Passes when every value is at
/// most `1e-10`.
pub fn krasovskii_check<F>(target: F, samples: &[Vec<f64>]) -> KrasovskiiReport
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut report = KrasovskiiReport {
        passed: true,
        worst: f64::NEG_INFINITY,
        worst_point: None,
    };
    for x in samples {
        let xdot = target(x);
        let jac = numdiff::jacobian(&target, x);
        let vdot: f64 = xdot
            .iter()
            .enumerate()
            .map(|(i, xi)| xi * jac[i].iter().zip(&xdot).map(|(j, d)| j * d).sum::<f64>())
            .sum();
        if vdot > 1e-10 || !vdot.is_finite() {
            report.passed = false;
        }
        if vdot > report.worst {
            report.worst = vdot;
            report.worst_point = Some(x.clone());
        }
    }
    report
}

/// Samples the flow of an autonomous target field from each initial point.
pub fn target_flow_samples<F>(
    target: F,
    initial_points: &[Vec<f64>],
    t_end: f64,
    step: f64,
    record_every: usize,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut samples = Vec::new();
    for x0 in initial_points {
        let field = FnField::new(x0.len(), |_, x: &[f64], dx: &mut [f64]| {
            dx.copy_from_slice(&target(x))
        });
        let cfg = SimConfig::new(t_end, step, x0.clone()).with_record_every(record_every);
        samples.extend(sim::integrate(&field, &cfg)?.states);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::Sign;
    use approx::assert_relative_eq;

    fn a1() -> (ControlAffinePlant, ImplicitManifold) {
        (
            ControlAffinePlant::new(2, |x, l| vec![x[0] + l], |_, _| 0.0),
            ImplicitManifold::new(1, Sign::Plus, |x| 2.0 * x[0], |_| vec![2.0]),
        )
    }

    fn a2() -> (ControlAffinePlant, ImplicitManifold) {
        (
            ControlAffinePlant::new(2, |_, l| vec![l], |x, l| -13.0 * x[0] + 4.0 * l),
            ImplicitManifold::new(1, Sign::Plus, |x| x[0], |_| vec![1.0]),
        )
    }

    fn a3() -> (ControlAffinePlant, ImplicitManifold) {
        (
            ControlAffinePlant::new(2, |x, l| vec![-x[0] + x[0].powi(3) * l], |_, _| 0.0),
            ImplicitManifold::new(1, Sign::Plus, |x| x[0] * x[0], |x| vec![2.0 * x[0]]),
        )
    }

    #[test]
    fn residual_examples() {
        let (_, m1) = a1();
        assert_eq!(residual(&m1, &[1.0], 1.0), 3.0);
        assert_eq!(residual(&m1, &[0.25], -0.5), 0.0);
        let (_, m3) = a3();
        assert_eq!(residual(&m3, &[1.0], -1.0), 0.0);
    }

    #[test]
    fn storage_examples() {
        assert_eq!(storage_of_residual(3.0), 4.5);
        assert_eq!(storage_of_residual(0.0), 0.0);
        assert_eq!(storage_of_residual(-2.0), 2.0);
        let (_, m1) = a1();
        assert_eq!(storage(&m1, &[1.0], 1.0), 4.5);
    }

    #[test]
    fn control_examples() {
        let (p, m) = a1();
        let law = PniLaw::new(m, 1.0, true).unwrap();
        assert_eq!(pni_control(&p, &law, &[1.0], 1.0).unwrap(), -7.0);

        let (p, m) = a3();
        let law = PniLaw::new(m, 1.0, true).unwrap();
        let u = pni_control(&p, &law, &[1.0], -1.0).unwrap();
        assert_eq!(u, 4.0);
        // the closed loop reproduces x1² − 2x1⁴x2 − x2 at (1, −1)
        assert_eq!(u, 1.0 - 2.0 * -1.0 - -1.0);

        let (p, m) = a2();
        let law = PniLaw::new(m, 1.0, true).unwrap();
        assert_eq!(pni_control(&p, &law, &[1.0], -1.0).unwrap(), 18.0);
        let cl = close_loop(p, law).unwrap();
        assert_eq!(cl.try_eval(&[1.0, -1.0]).unwrap(), vec![-1.0, 1.0]);
    }

    #[test]
    fn alpha_must_be_positive() {
        let (_, m) = a1();
        assert!(PniLaw::new(m.clone(), 0.0, true).is_err());
        assert!(PniLaw::new(m, f64::NAN, true).is_err());
    }

    #[test]
    fn closed_loop_matrices() {
        let (p, m) = a1();
        let cl = close_loop(p, PniLaw::new(m, 1.0, true).unwrap()).unwrap();
        assert_eq!(cl.try_eval(&[1.0, 0.0]).unwrap(), vec![1.0, -4.0]);
        assert_eq!(cl.try_eval(&[0.0, 1.0]).unwrap(), vec![1.0, -3.0]);

        let (p, m) = a2();
        let cl = close_loop(p, PniLaw::new(m, 1.0, true).unwrap()).unwrap();
        assert_eq!(cl.try_eval(&[1.0, 0.0]).unwrap(), vec![0.0, -1.0]);
        assert_eq!(cl.try_eval(&[0.0, 1.0]).unwrap(), vec![1.0, -2.0]);
    }

    #[test]
    fn a3_closed_loop_matches_published_field() {
        let (p, m) = a3();
        let cl = close_loop(p, PniLaw::new(m, 1.0, true).unwrap()).unwrap();
        for &(x1, x2) in &[(0.3, -0.7), (-0.8, 0.4), (0.5, 0.5)] {
            let v = cl.try_eval(&[x1, x2]).unwrap();
            let expected = x1 * x1 - 2.0 * x1.powi(4) * x2 - x2;
            assert_relative_eq!(v[1], expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn drift_is_kept_without_cancellation() {
        let (p, m) = a2();
        let cl = close_loop(p, PniLaw::new(m, 1.0, false).unwrap()).unwrap();
        // Ṁ + αM now equals g instead of zero
        let state = [0.5, 0.2];
        let rate = cl.residual_rate(&state).unwrap();
        let g = -13.0 * 0.5 + 4.0 * 0.2;
        assert_relative_eq!(rate + cl.residual_at(&state), g, epsilon = 1e-12);
    }

    #[test]
    fn residual_rate_is_minus_alpha_residual() {
        for (p, m) in [a1(), a2(), a3()] {
            for alpha in [0.5, 2.0] {
                let cl = close_loop(p.clone(), PniLaw::new(m.clone(), alpha, true).unwrap()).unwrap();
                for state in [[0.4, -0.9], [-0.7, 0.3]] {
                    let md = cl.residual_rate(&state).unwrap();
                    let mm = cl.residual_at(&state);
                    assert!((md + alpha * mm).abs() <= 1e-8 * (1.0 + mm.abs()));
                }
            }
        }
    }

    #[test]
    fn pathway_is_orthogonal() {
        let (p, m) = a3();
        let cl = close_loop(p, PniLaw::new(m, 1.0, true).unwrap()).unwrap();
        assert!(cl.pathway_orthogonality(&[0.6, 0.2]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn flipped_sign_gives_same_field() {
        let (p, m) = a3();
        let cl = close_loop(p.clone(), PniLaw::new(m.clone(), 1.5, true).unwrap()).unwrap();
        let flipped =
            close_loop(p, PniLaw::new(m.with_flipped_sign(), 1.5, true).unwrap()).unwrap();
        for state in [[0.1, 0.2], [-0.6, 0.9]] {
            assert_eq!(cl.try_eval(&state).unwrap(), flipped.try_eval(&state).unwrap());
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let plant = ControlAffinePlant::new(3, |x, _| x.to_vec(), |_, _| 0.0);
        let (_, m) = a1();
        assert!(close_loop(plant, PniLaw::new(m, 1.0, true).unwrap()).is_err());
    }

    #[test]
    fn conditioning_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 1.0, -2.0]);
        let c = conditioned_field(&a).unwrap();
        assert_eq!(c.connection, -0.5);
        assert_eq!(c.matrix.row(0).iter().copied().collect::<Vec<_>>(), vec![-1.0, 0.5]);
        assert_eq!(c.matrix.row(1).iter().copied().collect::<Vec<_>>(), vec![1.5, -2.25]);

        let d = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -3.0]);
        let c = conditioned_field(&d).unwrap();
        assert_eq!(c.transform, DMatrix::identity(2, 2));
        assert_eq!(c.matrix, d);

        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 1.0]);
        let c = conditioned_field(&a).unwrap();
        assert_eq!(c.connection, 1.0);
        assert_eq!(c.matrix.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0]);

        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]);
        assert!(matches!(conditioned_field(&singular), Err(Error::SingularBlock { .. })));
    }

    #[test]
    fn krasovskii_examples() {
        let grid: Vec<Vec<f64>> = (-10..=10).map(|k| vec![k as f64 * 0.1]).collect();
        let a3_target = |x: &[f64]| vec![-x[0] - x[0].powi(5)];
        let r = krasovskii_check(a3_target, &grid);
        assert!(r.passed);
        assert!(r.worst <= 0.0);

        assert!(krasovskii_check(|x: &[f64]| vec![-x[0]], &grid).passed);

        let r = krasovskii_check(|x: &[f64]| vec![x[0]], &grid);
        assert!(!r.passed);
        assert_relative_eq!(r.worst, 1.0, max_relative = 1e-6);
    }

    #[test]
    fn target_dynamics_on_manifold() {
        let (p, m) = a3();
        let cl = close_loop(p, PniLaw::new(m, 1.0, true).unwrap()).unwrap();
        let x1: f64 = 0.7;
        assert_relative_eq!(
            cl.target_dynamics(&[x1]).unwrap()[0],
            -x1 - x1.powi(5),
            epsilon = 1e-15
        );
    }
}
