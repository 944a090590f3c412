//! Affine time-invariant systems and their spectra.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sim::VectorField;

/// `ẋ = A x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl AffineSystem {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if !a.is_square() || b.len() != a.nrows() {
            return Err(Error::DimensionMismatch {
                context: "affine system",
                expected: a.nrows(),
                found: if a.is_square() { b.len() } else { a.ncols() },
            });
        }
        Ok(Self { a, b })
    }

    pub fn homogeneous(a: DMatrix<f64>) -> Self {
        let n = a.nrows();
        Self {
            a,
            b: DVector::zeros(n),
        }
    }

    /// Solves `A x = −b`.
    pub fn equilibrium(&self) -> Result<Vec<f64>> {
        self.a
            .clone()
            .lu()
            .solve(&(-&self.b))
            .map(|x| x.iter().copied().collect())
            .ok_or_else(|| Error::Domain("singular system matrix, no unique equilibrium".into()))
    }

    pub fn eigenvalues(&self) -> Vec<Complex<f64>> {
        eigenvalues(&self.a)
    }
}

impl VectorField for AffineSystem {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn eval(&self, _t: f64, state: &[f64], out: &mut [f64]) {
        let n = self.a.nrows();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            *o = self.b[i] + (0..n).map(|j| self.a[(i, j)] * state[j]).sum::<f64>();
        }
    }
}

/// Recovers `(A, b)` from an autonomous field assumed affine, by evaluating
/// it at the origin and on the unit vectors. The assumption is verified at a
/// fixed off-axis probe.
pub fn sample_affine<F: VectorField>(field: &F) -> Result<AffineSystem> {
    let n = field.dim();
    let origin = vec![0.0; n];
    let b = field.derivative(0.0, &origin);
    let mut a = DMatrix::zeros(n, n);
    let mut probe = origin.clone();
    for j in 0..n {
        probe[j] = 1.0;
        let col = field.derivative(0.0, &probe);
        for i in 0..n {
            a[(i, j)] = col[i] - b[i];
        }
        probe[j] = 0.0;
    }
    let sys = AffineSystem::new(a, DVector::from_vec(b))?;

    let p: Vec<f64> = (0..n).map(|k| 0.37 + 0.61 * k as f64 - 0.29 * (k * k) as f64).collect();
    let direct = field.derivative(0.0, &p);
    let predicted = sys.derivative(0.0, &p);
    let scale = 1.0 + sys.a.amax() * p.iter().fold(0.0_f64, |m, v| m.max(v.abs())) + sys.b.amax();
    for (d, q) in direct.iter().zip(&predicted) {
        if !((d - q).abs() <= 1e-9 * scale) {
            return Err(Error::Domain("field is not affine".into()));
        }
    }
    Ok(sys)
}

/// Monic characteristic polynomial `det(sI − A)`, coefficients from the
/// leading one down (Faddeev–LeVerrier).
pub fn characteristic_polynomial(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut coeffs = vec![1.0];
    let mut m = DMatrix::<f64>::zeros(n, n);
    for k in 1..=n {
        m = a * &m + DMatrix::identity(n, n) * coeffs[k - 1];
        let am = a * &m;
        coeffs.push(-am.trace() / k as f64);
    }
    coeffs
}

/// Evaluates a polynomial (descending coefficients) at a complex point.
pub fn eval_polynomial(coeffs: &[f64], z: Complex<f64>) -> Complex<f64> {
    coeffs
        .iter()
        .fold(Complex::new(0.0, 0.0), |acc, &c| acc * z + c)
}

/// All eigenvalues, sorted by real part then imaginary part.
///
/// Sizes one and two use the characteristic polynomial in closed form, so
/// a repeated root such as `{−1, −1}` comes out exact. Larger matrices go
/// through a real Schur decomposition of `A` itself.
pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let n = a.nrows();
    let mut eig = match n {
        0 => Vec::new(),
        1 => vec![Complex::new(a[(0, 0)], 0.0)],
        2 => {
            let tr = a[(0, 0)] + a[(1, 1)];
            let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
            quadratic_roots(-tr, det)
        }
        _ => a.complex_eigenvalues().iter().copied().collect(),
    };
    eig.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
    eig
}

/// Roots of `s² + b s + c`.
fn quadratic_roots(b: f64, c: f64) -> Vec<Complex<f64>> {
    let disc = b * b - 4.0 * c;
    if disc >= 0.0 {
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        if q == 0.0 {
            return vec![Complex::new(0.0, 0.0); 2];
        }
        vec![Complex::new(q, 0.0), Complex::new(c / q, 0.0)]
    } else {
        let re = -0.5 * b;
        let im = 0.5 * (-disc).sqrt();
        vec![Complex::new(re, -im), Complex::new(re, im)]
    }
}

pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    eigenvalues(a).iter().all(|z| z.re < 0.0)
}
