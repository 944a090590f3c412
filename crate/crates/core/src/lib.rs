//! Passivity-and-immersion control design on implicit manifolds.
//!
//! A target relation `λ ± φ(x) = 0` between base states `x` and a scalar
//! fiber state `λ` defines a rank-one metric and a connection that split
//! every tangent vector into a horizontal part, which moves along the
//! manifold, and a vertical part, which corrects the residual. The control
//! law cancels the fiber drift, follows the pathway term and pushes the
//! residual to zero at a chosen rate.
//!
//! Modules:
//! - [`manifold`]: metric, connection, tangent splitting, integrability.
//! - [`synthesis`]: residual, storage, control law, closed loop.
//! - [`sim`]: fixed-step RK4, analytic oracle, decay-rate and step metrics.
//! - [`systems`]: worked examples and a buck converter.
//! - [`estimation`]: gradient, memory-regressor and controlled gradient
//!   estimators, excitation certificates.
//! - [`experiment`]: the batch runner behind the `pni` binary.

pub mod error;
pub mod estimation;
pub mod experiment;
pub mod manifold;
pub mod numdiff;
pub mod sim;
pub mod synthesis;
pub mod systems;

pub use error::{Error, Result};
pub use manifold::{ImplicitManifold, Sign, SplitMetric, TangentSplit};
pub use sim::{integrate, SimConfig, Trajectory, VectorField};
pub use synthesis::{close_loop, pni_control, ClosedLoopField, ControlAffinePlant, PniLaw};
