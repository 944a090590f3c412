//! Windowed Gram-matrix certificates for three regressors.

use std::f64::consts::TAU;

use pni::estimation::{ie_regressor, pe_regressor, ExcitationCheck};

fn main() -> pni::Result<()> {
    let check = ExcitationCheck::new(50.0, TAU, 1e-3);
    let zero = |_: f64| vec![0.0, 0.0];
    let signals: [(&str, &dyn Fn(f64) -> Vec<f64>); 3] =
        [("PE", &pe_regressor), ("IE", &ie_regressor), ("zero", &zero)];
    for (name, phi) in signals {
        let v = check.run(phi)?;
        println!(
            "{name:<5} {:<8} level {:.4}  (window levels {:.4} .. {:.4})",
            v.kind,
            v.level,
            v.min_level,
            v.max_level
        );
    }

    let levels = check.window_levels(ie_regressor)?;
    println!("IE window level every 10 s:");
    for (t, l) in levels.iter().step_by(100) {
        println!("    t = {t:>5.1}  lambda_min = {l:.4}");
    }
    Ok(())
}
