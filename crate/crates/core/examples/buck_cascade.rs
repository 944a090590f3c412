//! Buck converter under cascaded PI control and under the P&I current
//! manifold: spectra, step response metrics and the residual decay rate.

use pni::sim::{self, SimConfig};
use pni::systems::{buck_dual_pi, buck_pni, BuckParams};

fn main() -> pni::Result<()> {
    let cases = [
        ("dual PI", buck_dual_pi(&BuckParams::nominal())?),
        ("P&I KI1=30", buck_pni(&BuckParams::nominal())?),
        ("P&I KI1=100", buck_pni(&BuckParams::pni_gains())?),
    ];
    for (name, cl) in cases {
        let eig: Vec<String> = cl
            .eigenvalues()
            .iter()
            .map(|z| if z.im == 0.0 { format!("{:.1}", z.re) } else { format!("{:.1}{:+.1}i", z.re, z.im) })
            .collect();
        println!("{name}: eigenvalues [{}], hurwitz {}", eig.join(", "), cl.is_hurwitz());

        let cfg = SimConfig::new(0.1, 1e-6, vec![0.0; 4]).with_record_every(10);
        let traj = sim::integrate(&cl, &cfg)?;
        let m = sim::transient_metrics(&traj, cl.params.v_ref, 0);
        println!(
            "    vc: settling {:.4} s, overshoot {:.2}%, sign changes {}, final {:.6} V",
            m.settling_time_2pct.unwrap_or(f64::NAN),
            m.overshoot_pct,
            m.sign_change_count,
            traj.final_state().unwrap()[0]
        );
        if let Ok(rate) = sim::fit_exponential_rate(&traj.times, &traj.residuals) {
            println!("    current residual rate {rate:.2} 1/s");
        }
    }
    Ok(())
}
