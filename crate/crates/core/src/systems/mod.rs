//! Concrete plants and closed loops: the three scalar-fiber examples, the
//! 2×2 conditioning example and a DC-DC buck converter under cascaded PI or
//! P&I control.

pub mod buck;
pub mod examples;
pub mod linear;

pub use buck::{
    buck_dual_pi, buck_open_loop, buck_pni, buck_pni_generic, BuckClosedLoop, BuckController,
    BuckOpenLoop, BuckParams, BuckState,
};
pub use examples::{b1_default_matrix, make_a1, make_a2, make_a3, make_b1, B1Field, PniDesign};
pub use linear::{characteristic_polynomial, eigenvalues, is_hurwitz, sample_affine, AffineSystem};
