//! Averaged DC-DC buck converter with integral states for both loops.
//!
//! State order is `(x₁, ζ₁, x₂, ζ₂)` = (capacitor voltage, outer integral,
//! inductor current, inner integral). The current reference is
//! `i_ref = Kp1 (v_ref − x₁) + KI1 ζ₁`.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::manifold::{ImplicitManifold, Sign};
use crate::sim::VectorField;
use crate::synthesis::{close_loop, ClosedLoopField, ControlAffinePlant, PniLaw};
use crate::systems::linear::{eigenvalues, AffineSystem};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuckParams {
    pub r_load: f64,
    pub l: f64,
    pub c: f64,
    pub kp1: f64,
    pub ki1: f64,
    pub kp2: f64,
    pub ki2: f64,
    pub alpha: f64,
    pub v_ref: f64,
}

impl BuckParams {
    /// Converter values and dual-PI gains of the reference design, with
    /// `α = 700` and a 10 V reference.
    pub fn nominal() -> Self {
        Self {
            r_load: 18.6,
            l: 1e-3,
            c: 510e-6,
            kp1: 1.0,
            ki1: 30.0,
            kp2: 1.0,
            ki2: 700.0,
            alpha: 700.0,
            v_ref: 10.0,
        }
    }

    /// The gain set used for the P&I runs: as [`nominal`](Self::nominal) but
    /// with `KI1 = 100`.
    pub fn pni_gains() -> Self {
        Self {
            ki1: 100.0,
            ..Self::nominal()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("r_load", self.r_load), ("l", self.l), ("c", self.c)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("kp1", self.kp1),
            ("ki1", self.ki1),
            ("kp2", self.kp2),
            ("ki2", self.ki2),
            ("alpha", self.alpha),
            ("v_ref", self.v_ref),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn inv_rc(&self) -> f64 {
        1.0 / (self.r_load * self.c)
    }

    /// `i_ref` as a linear form on the state plus its `v_ref` constant.
    fn i_ref_form(&self) -> ([f64; 4], f64) {
        ([-self.kp1, self.ki1, 0.0, 0.0], self.kp1 * self.v_ref)
    }

    pub fn i_ref(&self, state: &[f64]) -> f64 {
        let (row, k) = self.i_ref_form();
        k + row.iter().zip(state).map(|(a, b)| a * b).sum::<f64>()
    }
}

impl Default for BuckParams {
    fn default() -> Self {
        Self::nominal()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BuckState {
    pub x1: f64,
    pub zeta1: f64,
    pub x2: f64,
    pub zeta2: f64,
}

impl BuckState {
    pub const NAMES: [&'static str; 4] = ["vc", "zeta1", "il", "zeta2"];

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.x1, self.zeta1, self.x2, self.zeta2]
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        if s.len() != 4 {
            return Err(Error::DimensionMismatch {
                context: "buck state",
                expected: 4,
                found: s.len(),
            });
        }
        Ok(Self {
            x1: s[0],
            zeta1: s[1],
            x2: s[2],
            zeta2: s[3],
        })
    }
}

/// `ẋ = A x + B (v_ref, i_ref, u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BuckOpenLoop {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl BuckOpenLoop {
    pub fn derivative(&self, state: &[f64], v_ref: f64, i_ref: f64, u: f64) -> Vec<f64> {
        let x = DVector::from_column_slice(state);
        let w = DVector::from_vec(vec![v_ref, i_ref, u]);
        (&self.a * x + &self.b * w).iter().copied().collect()
    }
}

pub fn buck_open_loop(params: &BuckParams) -> Result<BuckOpenLoop> {
    params.validate()?;
    let (l, c) = (params.l, params.c);
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        -params.inv_rc(), 0.0, 1.0 / c, 0.0,
        -1.0, 0.0, 0.0, 0.0,
        -1.0 / l, 0.0, 0.0, 0.0,
        0.0, 0.0, -1.0, 0.0,
    ]);
    #[rustfmt::skip]
    let b = DMatrix::from_row_slice(4, 3, &[
        0.0, 0.0, 0.0,
        1.0, 0.0, 0.0,
        0.0, 0.0, 1.0 / l,
        0.0, 1.0, 0.0,
    ]);
    Ok(BuckOpenLoop { a, b })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BuckController {
    /// Cascaded PI loops: `u = Kp2 (i_ref − x₂) + KI2 ζ₂`.
    DualPi,
    /// Single PI pair plus the manifold `x₂ = i_ref` enforced at rate `α`.
    Pni,
}

/// A closed-loop converter as an affine field, with `x₂ − i_ref` and the
/// applied switch voltage `u` recorded as observables.
#[derive(Clone, Debug, PartialEq)]
pub struct BuckClosedLoop {
    pub controller: BuckController,
    pub params: BuckParams,
    pub system: AffineSystem,
    /// `u` as a linear form on the state plus constant.
    u_row: DVector<f64>,
    u_const: f64,
}

/// Substitutes a linear state feedback for `i_ref` and `u` into the open
/// loop. Each feedback is `(row, constant)`.
fn substitute(
    open: &BuckOpenLoop,
    v_ref: f64,
    i_ref: (&[f64], f64),
    u: (&[f64], f64),
) -> AffineSystem {
    let mut a = open.a.clone();
    let mut b = open.b.column(0) * v_ref;
    for (col, (row, k)) in [(1, i_ref), (2, u)] {
        for i in 0..4 {
            let gain = open.b[(i, col)];
            if gain != 0.0 {
                for j in 0..4 {
                    a[(i, j)] += gain * row[j];
                }
                b[i] += gain * k;
            }
        }
    }
    AffineSystem { a, b }
}

/// Case A: dual PI cascade, by substituting both controllers into the
/// open loop.
pub fn buck_dual_pi(params: &BuckParams) -> Result<BuckClosedLoop> {
    let open = buck_open_loop(params)?;
    let (iref_row, iref_k) = params.i_ref_form();
    let p = params;
    let u_row = [
        p.kp2 * iref_row[0],
        p.kp2 * iref_row[1],
        -p.kp2,
        p.ki2,
    ];
    let u_const = p.kp2 * iref_k;
    let system = substitute(&open, p.v_ref, (&iref_row, iref_k), (&u_row, u_const));
    Ok(BuckClosedLoop {
        controller: BuckController::DualPi,
        params: *p,
        system,
        u_row: DVector::from_row_slice(&u_row),
        u_const,
    })
}

/// Case B: the inductor-current row is replaced by
/// `ẋ₂ = ∇φ·Ẋ₁ − α (x₂ − i_ref)` with `φ = i_ref(X₁)`, `X₁ = (x₁, ζ₁)`
/// and `∇φ = (−Kp1, KI1)`. The `ζ₂` row keeps its open-loop form with
/// `i_ref` substituted; `ζ₂` does not feed back.
pub fn buck_pni(params: &BuckParams) -> Result<BuckClosedLoop> {
    let open = buck_open_loop(params)?;
    let p = params;
    let (iref_row, iref_k) = p.i_ref_form();
    let grad = [-p.kp1, p.ki1];

    // the X₁ rows do not involve i_ref or u
    let mut x2_row = [0.0; 4];
    let mut x2_const = 0.0;
    for (k, g) in grad.iter().enumerate() {
        for j in 0..4 {
            x2_row[j] += g * open.a[(k, j)];
        }
        x2_const += g * open.b[(k, 0)] * p.v_ref;
    }
    for j in 0..4 {
        let e = if j == 2 { 1.0 } else { 0.0 };
        x2_row[j] -= p.alpha * (e - iref_row[j]);
    }
    x2_const += p.alpha * iref_k;

    // the switch voltage producing that row: ẋ₂ = (−x₁ + u)/L
    let mut u_row = [0.0; 4];
    for j in 0..4 {
        u_row[j] = p.l * x2_row[j];
    }
    u_row[0] += 1.0;
    let u_const = p.l * x2_const;

    let mut system = substitute(&open, p.v_ref, (&iref_row, iref_k), (&u_row, u_const));
    // same row, without the round trip through u
    for j in 0..4 {
        system.a[(2, j)] = x2_row[j];
    }
    system.b[2] = x2_const;
    Ok(BuckClosedLoop {
        controller: BuckController::Pni,
        params: *p,
        system,
        u_row: DVector::from_row_slice(&u_row),
        u_const,
    })
}

impl BuckClosedLoop {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.system.a
    }

    pub fn input_vector(&self) -> &DVector<f64> {
        &self.system.b
    }

    /// States that feed back into the dynamics. Under P&I the inner
    /// integral `ζ₂` is only an observer of the current error and drops out.
    pub fn active_states(&self) -> usize {
        match self.controller {
            BuckController::DualPi => 4,
            BuckController::Pni => 3,
        }
    }

    pub fn active_block(&self) -> DMatrix<f64> {
        let n = self.active_states();
        self.system.a.view((0, 0), (n, n)).into_owned()
    }

    /// Spectrum of the full 4×4 matrix.
    pub fn eigenvalues(&self) -> Vec<Complex<f64>> {
        eigenvalues(&self.system.a)
    }

    /// Hurwitz test on the feedback-relevant block.
    pub fn is_hurwitz(&self) -> bool {
        eigenvalues(&self.active_block()).iter().all(|z| z.re < 0.0)
    }

    pub fn control(&self, state: &[f64]) -> f64 {
        self.u_const + self.u_row.iter().zip(state).map(|(a, b)| a * b).sum::<f64>()
    }
}

impl VectorField for BuckClosedLoop {
    fn dim(&self) -> usize {
        4
    }

    fn eval(&self, t: f64, state: &[f64], out: &mut [f64]) {
        self.system.eval(t, state, out)
    }

    fn residual(&self, _t: f64, state: &[f64]) -> f64 {
        state[2] - self.params.i_ref(state)
    }

    fn input(&self, _t: f64, state: &[f64]) -> f64 {
        self.control(state)
    }
}

/// The same Case-B loop built through the generic synthesis on the reduced
/// state `(x₁, ζ₁, x₂)`, with the control normalized as `u/L`.
pub fn buck_pni_generic(params: &BuckParams) -> Result<ClosedLoopField> {
    params.validate()?;
    let p = *params;
    let plant = ControlAffinePlant::new(
        3,
        move |x, l| vec![-x[0] * p.inv_rc() + l / p.c, p.v_ref - x[0]],
        move |x, _| -x[0] / p.l,
    );
    let manifold = ImplicitManifold::new(
        2,
        Sign::Minus,
        move |x| p.kp1 * (p.v_ref - x[0]) + p.ki1 * x[1],
        move |_| vec![-p.kp1, p.ki1],
    );
    close_loop(plant, PniLaw::new(manifold, p.alpha, true)?)
}
