//! Closes the loop on the three planar examples, checks the residual decays
//! at exactly `α`, and certifies the on-manifold flow of the cubic example.

use pni::sim::{self, SimConfig};
use pni::synthesis::{krasovskii_check, target_flow_samples};
use pni::systems::{make_a1, make_a2, make_a3, sample_affine};

fn main() -> pni::Result<()> {
    let alpha = 2.0;
    for (name, design) in [("A1", make_a1(alpha)?), ("A2", make_a2(alpha)?), ("A3", make_a3(alpha)?)] {
        let traj = sim::integrate(&design.closed_loop, &SimConfig::new(10.0, 1e-3, vec![0.8, -0.4]))?;
        let rate = sim::fit_exponential_rate(&traj.times, &traj.residuals)?;
        let split = sim::rate_split(&traj, &design.equilibrium)?;
        println!(
            "{name}: residual rate {rate:.6} (alpha {alpha}), tangential {:.3}, final {:?}",
            split.tangential,
            traj.final_state().unwrap()
        );
        if name != "A3" {
            let lin = sample_affine(&design.closed_loop)?;
            let eig: Vec<String> = lin.eigenvalues().iter().map(|z| format!("{:.3}", z.re)).collect();
            println!("    closed-loop eigenvalues {}", eig.join(", "));
        }
    }

    let a3 = make_a3(1.0)?;
    let target = |x: &[f64]| a3.closed_loop.target_dynamics(x).unwrap();
    let starts: Vec<Vec<f64>> = [-0.8, -0.4, 0.4, 0.8].iter().map(|&v| vec![v]).collect();
    let samples = target_flow_samples(target, &starts, 5.0, 1e-3, 100)?;
    let report = krasovskii_check(target, &samples);
    println!(
        "A3 target dynamics: Krasovskii {} over {} samples, max Vdot {:.3e}",
        if report.passed { "holds" } else { "fails" },
        samples.len(),
        report.worst
    );
    Ok(())
}
