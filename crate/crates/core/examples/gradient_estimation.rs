//! Plain gradient, filtered-regressor gradient and controlled gradient
//! estimators on a persistently and an interval exciting regressor.

use pni::estimation::{run_estimation, EstimationConfig, EstimationMethod, RegressorSignal};

fn main() -> pni::Result<()> {
    for (label, signal, t_end) in [
        ("PE", RegressorSignal::pe(), 20.0),
        ("IE", RegressorSignal::ie(), 50.0),
    ] {
        println!("{label} regressor, theta = {:?}", signal.theta_true());
        for method in [EstimationMethod::Ge, EstimationMethod::MreGe, EstimationMethod::Cge] {
            let cfg = EstimationConfig {
                t_end,
                ..Default::default()
            };
            let run = run_estimation(&signal, method, &cfg)?;
            let settle = run
                .norm_report
                .settling_time_2pct
                .map_or("-".to_string(), |t| format!("{t:.3} s"));
            println!(
                "    {method:<7} final |err| {:.3e}, settling {settle}, sign changes {:?}",
                run.final_error_norm(),
                run.sign_changes()
            );
        }
    }
    Ok(())
}
