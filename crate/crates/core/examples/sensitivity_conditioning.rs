//! Rewrites a 2×2 linear field with the lower-triangular transform built from
//! `∇φ = a21/a22` and tracks the conditioned fast coordinate.

use pni::sim::{self, SimConfig};
use pni::systems::{b1_default_matrix, eigenvalues, make_b1};

fn main() -> pni::Result<()> {
    let a = b1_default_matrix();
    let b1 = make_b1(a.clone())?;
    println!("A = {a}");
    println!("connection a21/a22 = {}", b1.conditioned.connection);
    println!("T A = {}", b1.conditioned.matrix);
    let eig: Vec<String> = eigenvalues(&a).iter().map(|z| format!("{:.6}", z.re)).collect();
    println!("eig(A) = {}", eig.join(", "));

    let traj = sim::integrate(&b1, &SimConfig::new(6.0, 1e-3, vec![1.0, 1.0]).with_record_every(1000))?;
    for (t, (x, z)) in traj.times.iter().zip(traj.states.iter().zip(&traj.residuals)) {
        println!("t = {t:.1}  x = ({:+.5}, {:+.5})  z2 = {z:+.3e}", x[0], x[1]);
    }
    Ok(())
}
