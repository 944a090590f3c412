//! Planar examples with a scalar fiber, and the linear conditioning example.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::manifold::{ImplicitManifold, Sign};
use crate::sim::VectorField;
use crate::synthesis::{close_loop, conditioned_field, ClosedLoopField, ConditionedField, ControlAffinePlant, PniLaw};

/// A plant, its law and the resulting closed loop, plus the base-coordinate
/// equilibrium the loop should converge to.
#[derive(Clone, Debug)]
pub struct PniDesign {
    pub plant: ControlAffinePlant,
    pub law: PniLaw,
    pub closed_loop: ClosedLoopField,
    pub equilibrium: Vec<f64>,
}

fn design(plant: ControlAffinePlant, manifold: ImplicitManifold, alpha: f64) -> Result<PniDesign> {
    let law = PniLaw::new(manifold, alpha, true)?;
    let closed_loop = close_loop(plant.clone(), law.clone())?;
    Ok(PniDesign {
        plant,
        law,
        closed_loop,
        equilibrium: vec![0.0],
    })
}

/// `ẋ₁ = x₁ + x₂`, `ẋ₂ = u`, manifold `x₂ + 2x₁ = 0`.
pub fn make_a1(alpha: f64) -> Result<PniDesign> {
    design(
        ControlAffinePlant::new(2, |x, l| vec![x[0] + l], |_, _| 0.0),
        ImplicitManifold::new(1, Sign::Plus, |x| 2.0 * x[0], |_| vec![2.0]),
        alpha,
    )
}

/// `ẋ₁ = x₂`, `ẋ₂ = −13x₁ + 4x₂ + u`, manifold `x₂ + x₁ = 0`.
pub fn make_a2(alpha: f64) -> Result<PniDesign> {
    design(
        ControlAffinePlant::new(2, |_, l| vec![l], |x, l| -13.0 * x[0] + 4.0 * l),
        ImplicitManifold::new(1, Sign::Plus, |x| x[0], |_| vec![1.0]),
        alpha,
    )
}

/// `ẋ₁ = −x₁ + x₁³x₂`, `ẋ₂ = u`, manifold `x₂ + x₁² = 0`.
pub fn make_a3(alpha: f64) -> Result<PniDesign> {
    design(
        ControlAffinePlant::new(2, |x, l| vec![-x[0] + x[0].powi(3) * l], |_, _| 0.0),
        ImplicitManifold::new(1, Sign::Plus, |x| x[0] * x[0], |x| vec![2.0 * x[0]]),
        alpha,
    )
}

pub fn b1_default_matrix() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 1.0, -2.0])
}

/// `ẋ = A x` recorded together with the conditioned fast coordinate
/// `z₂ = x₂ + ∇φ x₁` as its residual.
#[derive(Clone, Debug)]
pub struct B1Field {
    pub a: DMatrix<f64>,
    pub conditioned: ConditionedField,
}

pub fn make_b1(a: DMatrix<f64>) -> Result<B1Field> {
    let conditioned = conditioned_field(&a)?;
    Ok(B1Field { a, conditioned })
}

impl VectorField for B1Field {
    fn dim(&self) -> usize {
        2
    }

    fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.a[(0, 0)] * x[0] + self.a[(0, 1)] * x[1];
        out[1] = self.a[(1, 0)] * x[0] + self.a[(1, 1)] * x[1];
    }

    fn residual(&self, _t: f64, x: &[f64]) -> f64 {
        x[1] + self.conditioned.connection * x[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::linear::{eigenvalues, sample_affine};
    use nalgebra::Complex;

    #[test]
    fn closed_loop_spectra() {
        let a1 = sample_affine(&make_a1(1.0).unwrap().closed_loop).unwrap();
        assert_eq!(a1.a, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -4.0, -3.0]));
        assert_eq!(eigenvalues(&a1.a), vec![Complex::new(-1.0, 0.0); 2]);

        let a2 = sample_affine(&make_a2(1.0).unwrap().closed_loop).unwrap();
        assert_eq!(a2.a, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -2.0]));
        assert_eq!(eigenvalues(&a2.a), vec![Complex::new(-1.0, 0.0); 2]);
    }

    #[test]
    fn a3_value() {
        let d = make_a3(1.0).unwrap();
        assert_eq!(d.closed_loop.try_eval(&[1.0, -1.0]).unwrap()[1], 4.0);
    }

    #[test]
    fn a1_spectrum_for_general_alpha() {
        // characteristic polynomial (s + 1)(s + α)
        for alpha in [0.5, 2.0, 6.0] {
            let a = sample_affine(&make_a1(alpha).unwrap().closed_loop).unwrap().a;
            let e = eigenvalues(&a);
            let mut expected = [-1.0, -alpha];
            expected.sort_by(f64::total_cmp);
            for (z, r) in e.iter().zip(expected) {
                assert!((z.re - r).abs() < 1e-12 && z.im == 0.0);
            }
        }
    }

    #[test]
    fn b1_residual_is_conditioned_coordinate() {
        let b1 = make_b1(b1_default_matrix()).unwrap();
        assert_eq!(b1.residual(0.0, &[2.0, 1.0]), 0.0);
        assert_eq!(b1.conditioned.connection, -0.5);
    }
}
