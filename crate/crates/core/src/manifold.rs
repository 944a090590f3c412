//! Implicit manifolds, their connection one-forms, the rank-one metric built
//! from the constraint normal, and the horizontal/vertical splitting of
//! tangent vectors.
//!
//! Coordinates are ordered base first, fiber last: a state of dimension `n`
//! is `(x, λ)` with `x ∈ ℝⁿ⁻¹` and `λ ∈ ℝ`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numdiff;

/// Below this magnitude the fiber block of a metric is treated as singular.
pub const SINGULAR_BLOCK_THRESHOLD: f64 = 1e-12;

const GRADIENT_REL_TOL: f64 = 1e-5;
const INTEGRABILITY_REL_TOL: f64 = 1e-4;

pub type ScalarMap = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type CovectorMap = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Residual convention: `M = λ + φ(x)` or `M = λ − φ(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }
}

/// Target relation `λ ± φ(x) = 0` together with the analytic gradient of `φ`.
#[derive(Clone)]
pub struct ImplicitManifold {
    base_dim: usize,
    phi: ScalarMap,
    grad_phi: CovectorMap,
    sign: Sign,
}

impl fmt::Debug for ImplicitManifold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImplicitManifold")
            .field("base_dim", &self.base_dim)
            .field("sign", &self.sign)
            .finish_non_exhaustive()
    }
}

impl ImplicitManifold {
    pub fn new<P, G>(base_dim: usize, sign: Sign, phi: P, grad_phi: G) -> Self
    where
        P: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            base_dim,
            phi: Arc::new(phi),
            grad_phi: Arc::new(grad_phi),
            sign,
        }
    }

    /// Dimension of the base coordinates `x`.
    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    /// Dimension of the full state `(x, λ)`.
    pub fn state_dim(&self) -> usize {
        self.base_dim + 1
    }

    pub fn sign(&self) -> Sign {
        self.sign
    }

    pub fn phi(&self, x: &[f64]) -> f64 {
        (self.phi)(x)
    }

    pub fn grad_phi(&self, x: &[f64]) -> Vec<f64> {
        (self.grad_phi)(x)
    }

    /// `φ(x)` checked for dimension and finiteness.
    pub fn try_phi(&self, x: &[f64]) -> Result<f64> {
        self.check_base(x)?;
        let value = self.phi(x);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::Domain(format!("phi undefined at {x:?}")))
        }
    }

    /// `∇φ(x)` checked for dimension and finiteness.
    pub fn try_grad_phi(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_base(x)?;
        let grad = self.grad_phi(x);
        if grad.len() != self.base_dim {
            return Err(Error::DimensionMismatch {
                context: "grad_phi",
                expected: self.base_dim,
                found: grad.len(),
            });
        }
        if grad.iter().all(|g| g.is_finite()) {
            Ok(grad)
        } else {
            Err(Error::Domain(format!("grad_phi undefined at {x:?}")))
        }
    }

    /// Residual `M(x, λ) = λ ± φ(x)`.
    pub fn residual(&self, x: &[f64], lambda: f64) -> f64 {
        lambda + self.sign.factor() * self.phi(x)
    }

    /// Connection one-form `±∇φ(x)` seen by the splitting; equal to
    /// `m21 / m22` of the metric built at `x`.
    pub fn connection(&self, x: &[f64]) -> Result<Vec<f64>> {
        let s = self.sign.factor();
        Ok(self.try_grad_phi(x)?.into_iter().map(|g| s * g).collect())
    }

    /// Constraint normal `∇M₀ = (±∇φ(x), 1)`.
    pub fn normal(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut n = self.connection(x)?;
        n.push(1.0);
        Ok(n)
    }

    /// The same zero set written with the opposite sign convention: the sign
    /// flips and `φ` is negated.
    pub fn with_flipped_sign(&self) -> Self {
        let phi = Arc::clone(&self.phi);
        let grad = Arc::clone(&self.grad_phi);
        Self {
            base_dim: self.base_dim,
            phi: Arc::new(move |x: &[f64]| -phi(x)),
            grad_phi: Arc::new(move |x: &[f64]| grad(x).into_iter().map(|g| -g).collect()),
            sign: self.sign.flipped(),
        }
    }

    /// Compares `grad_phi` against central differences of `phi` at each
    /// sample, returning the worst relative disagreement.
    pub fn check_gradient(&self, samples: &[Vec<f64>]) -> GradientCheck {
        let mut worst = 0.0_f64;
        for x in samples {
            let fd = numdiff::gradient(|p| self.phi(p), x);
            let analytic = self.grad_phi(x);
            for (a, b) in analytic.iter().zip(&fd) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
                worst = worst.max(rel);
            }
        }
        GradientCheck {
            consistent: worst <= GRADIENT_REL_TOL,
            max_relative_error: worst,
        }
    }

    fn check_base(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.base_dim {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                context: "base point",
                expected: self.base_dim,
                found: x.len(),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientCheck {
    pub consistent: bool,
    pub max_relative_error: f64,
}

/// Symmetric metric on the full state space, partitioned base/fiber.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitMetric {
    r: DMatrix<f64>,
}

impl SplitMetric {
    /// Wraps an exactly symmetric square matrix of dimension at least 2.
    pub fn new(r: DMatrix<f64>) -> Result<Self> {
        if !r.is_square() {
            return Err(Error::InvalidParameter(format!(
                "metric must be square, got {}x{}",
                r.nrows(),
                r.ncols()
            )));
        }
        if r.nrows() < 2 {
            return Err(Error::InvalidParameter("metric needs a base and a fiber".into()));
        }
        if r != r.transpose() {
            return Err(Error::InvalidParameter("metric must be symmetric".into()));
        }
        Ok(Self { r })
    }

    pub fn from_row_slice(n: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::DimensionMismatch {
                context: "metric entries",
                expected: n * n,
                found: entries.len(),
            });
        }
        Self::new(DMatrix::from_row_slice(n, n, entries))
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// Fiber-fiber entry.
    pub fn m22(&self) -> f64 {
        let n = self.dim();
        self.r[(n - 1, n - 1)]
    }

    /// Fiber row restricted to the base columns.
    pub fn m21(&self) -> Vec<f64> {
        let n = self.dim();
        (0..n - 1).map(|j| self.r[(n - 1, j)]).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.r.amax()
    }

    /// Numerical rank from singular values relative to the largest one.
    pub fn rank(&self) -> usize {
        let sv = self.r.clone().singular_values();
        let top = sv.max();
        if top == 0.0 {
            return 0;
        }
        sv.iter().filter(|&&s| s > 1e-12 * top).count()
    }

    /// `aᵀ R b`.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += a[i] * self.r[(i, j)] * b[j];
            }
        }
        acc
    }
}

/// `R = ∇M₀ᵀ ∇M₀` evaluated at base point `x`.
pub fn build_metric(manifold: &ImplicitManifold, x: &[f64]) -> Result<SplitMetric> {
    manifold.try_phi(x)?;
    let normal = manifold.normal(x)?;
    let n = normal.len();
    let r = DMatrix::from_fn(n, n, |i, j| normal[i] * normal[j]);
    SplitMetric::new(r)
}

/// Connection coefficients `m21 m22⁻¹`.
pub fn connection_from_metric(metric: &SplitMetric) -> Result<Vec<f64>> {
    let m22 = metric.m22();
    if !(m22.abs() >= SINGULAR_BLOCK_THRESHOLD) {
        return Err(Error::SingularBlock {
            value: m22,
            threshold: SINGULAR_BLOCK_THRESHOLD,
        });
    }
    Ok(metric.m21().into_iter().map(|m| m / m22).collect())
}

/// Horizontal and vertical parts of a tangent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentSplit {
    pub horizontal: Vec<f64>,
    pub vertical: Vec<f64>,
}

impl TangentSplit {
    /// True when `horizontal + vertical == v` componentwise in floating point.
    pub fn recomposes(&self, v: &[f64]) -> bool {
        v.len() == self.horizontal.len()
            && self
                .horizontal
                .iter()
                .zip(&self.vertical)
                .zip(v)
                .all(|((h, w), x)| h + w == *x)
    }

    /// `v_hᵀ R v_v`.
    pub fn orthogonality_defect(&self, metric: &SplitMetric) -> f64 {
        metric.inner(&self.horizontal, &self.vertical)
    }

    /// Absolute tolerance `1e-9 (1 + |R|max |v|²)` for the orthogonality defect.
    pub fn orthogonality_tolerance(metric: &SplitMetric, v: &[f64]) -> f64 {
        let norm_sq: f64 = v.iter().map(|x| x * x).sum();
        1e-9 * (1.0 + metric.max_abs() * norm_sq)
    }
}

/// Splits `v = (ẋ, λ̇)` into `(ẋ, −∇φ·ẋ) ⊕ (0, λ̇ + ∇φ·ẋ)`.
pub fn split_tangent(v: &[f64], connection: &[f64]) -> Result<TangentSplit> {
    if v.len() != connection.len() + 1 {
        return Err(Error::DimensionMismatch {
            context: "split_tangent",
            expected: connection.len() + 1,
            found: v.len(),
        });
    }
    let (xdot, lambda_dot) = v.split_at(connection.len());
    let shift: f64 = connection.iter().zip(xdot).map(|(c, x)| c * x).sum();
    let (h_last, v_last) = exact_complement(lambda_dot[0], shift);

    let mut horizontal = xdot.to_vec();
    horizontal.push(h_last);
    let mut vertical = vec![0.0; xdot.len()];
    vertical.push(v_last);
    Ok(TangentSplit {
        horizontal,
        vertical,
    })
}

/// Result of the three-coordinate splitting together with its numerically
/// verified orthogonality.
#[derive(Clone, Debug, PartialEq)]
pub struct Case3Split {
    pub split: TangentSplit,
    pub defect: f64,
    pub tolerance: f64,
    pub orthogonal: bool,
}

/// Splitting of `(ẋ, ẏ, λ̇)` against a general 3×3 metric:
/// `v_h = (ẋ, −m21/m22 ẋ, −m31/m33 ẋ − m32/m33 ẏ)` and `v_v = v − v_h`.
///
/// The formula is only orthogonal for metrics with compatible off-diagonal
/// structure, so orthogonality is checked and reported rather than assumed.
pub fn split_tangent_3d(v: &[f64], metric: &SplitMetric) -> Result<Case3Split> {
    if v.len() != 3 || metric.dim() != 3 {
        return Err(Error::DimensionMismatch {
            context: "split_tangent_3d",
            expected: 3,
            found: if v.len() != 3 { v.len() } else { metric.dim() },
        });
    }
    let m = metric.matrix();
    for k in [1, 2] {
        if !(m[(k, k)].abs() >= SINGULAR_BLOCK_THRESHOLD) {
            return Err(Error::SingularBlock {
                value: m[(k, k)],
                threshold: SINGULAR_BLOCK_THRESHOLD,
            });
        }
    }
    let c21 = m[(1, 0)] / m[(1, 1)];
    let c31 = m[(2, 0)] / m[(2, 2)];
    let c32 = m[(2, 1)] / m[(2, 2)];

    let (h1, v1) = exact_complement(v[1], c21 * v[0]);
    let (h2, v2) = exact_complement(v[2], c31 * v[0] + c32 * v[1]);
    let split = TangentSplit {
        horizontal: vec![v[0], h1, h2],
        vertical: vec![0.0, v1, v2],
    };
    let defect = split.orthogonality_defect(metric);
    let tolerance = TangentSplit::orthogonality_tolerance(metric, v);
    Ok(Case3Split {
        orthogonal: defect.abs() <= tolerance,
        split,
        defect,
        tolerance,
    })
}

/// Outcome of a flatness (exactness) test on a one-form.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegrabilityReport {
    pub integrable: bool,
    pub max_asymmetry: f64,
    pub worst_point: Option<Vec<f64>>,
}

/// Checks that the connection of `manifold` is exact by testing symmetry of
/// the finite-difference Jacobian of `grad_phi` (the Hessian of `φ`).
pub fn check_integrability(
    manifold: &ImplicitManifold,
    samples: &[Vec<f64>],
) -> IntegrabilityReport {
    check_one_form_integrability(|x| manifold.grad_phi(x), samples)
}

/// Closedness test `∂ᵢωⱼ = ∂ⱼωᵢ` for an arbitrary one-form, each pair
/// compared at relative tolerance `1e-4`.
pub fn check_one_form_integrability<F>(form: F, samples: &[Vec<f64>]) -> IntegrabilityReport
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut report = IntegrabilityReport {
        integrable: true,
        max_asymmetry: 0.0,
        worst_point: None,
    };
    for x in samples {
        let jac = numdiff::jacobian(&form, x);
        for i in 0..x.len() {
            for j in (i + 1)..x.len() {
                let asym = (jac[i][j] - jac[j][i]).abs();
                let scale = jac[i][j].abs().max(jac[j][i].abs()).max(1.0);
                if asym > INTEGRABILITY_REL_TOL * scale {
                    report.integrable = false;
                }
                if asym > report.max_asymmetry {
                    report.max_asymmetry = asym;
                    report.worst_point = Some(x.clone());
                }
            }
        }
    }
    report
}

/// Returns `(h, w)` with `h ≈ −shift`, `w ≈ total + shift` and `h + w == total`
/// exactly whenever both pieces can live on a common binary grid that also
/// carries `total`. The horizontal piece moves by at most half an ulp of
/// `|total| + |shift|`.
fn exact_complement(total: f64, shift: f64) -> (f64, f64) {
    if total == 0.0 {
        return (-shift, shift);
    }
    let bound = total.abs() + shift.abs();
    if let (Some(total_grain), Some(bound_exp)) = (lowest_bit_exponent(total), floor_log2(bound)) {
        let grain = bound_exp - 51;
        if grain <= total_grain && grain >= -1022 {
            let g = pow2(grain);
            let snapped = (shift / g).round() * g;
            return (-snapped, total + snapped);
        }
    }
    let w = total + shift;
    let h = total - w;
    if h + w == total {
        (h, w)
    } else {
        (-shift, w)
    }
}

/// Exponent of the least significant set bit of a finite nonzero float.
fn lowest_bit_exponent(x: f64) -> Option<i32> {
    if !x.is_finite() || x == 0.0 {
        return None;
    }
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let mut mantissa = bits & ((1u64 << 52) - 1);
    let scale = if exp == 0 {
        -1074
    } else {
        mantissa |= 1u64 << 52;
        exp - 1075
    };
    Some(scale + mantissa.trailing_zeros() as i32)
}

fn floor_log2(x: f64) -> Option<i32> {
    if !x.is_normal() {
        return None;
    }
    Some(((x.to_bits() >> 52) & 0x7ff) as i32 - 1023)
}

fn pow2(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}
