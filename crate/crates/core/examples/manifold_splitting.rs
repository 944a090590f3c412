//! Metric, connection and horizontal/vertical splitting for `λ + x₁² = 0`,
//! plus an integrability check on a gradient and on a rotation form.

use pni::manifold::{
    build_metric, check_integrability, check_one_form_integrability, connection_from_metric,
    split_tangent, ImplicitManifold, Sign,
};

fn main() -> pni::Result<()> {
    let m = ImplicitManifold::new(1, Sign::Plus, |x| x[0] * x[0], |x| vec![2.0 * x[0]]);
    let x = [0.75];

    let metric = build_metric(&m, &x)?;
    println!("metric at x = {x:?}:\n{}", metric.matrix());
    let conn = connection_from_metric(&metric)?;
    println!("connection m21/m22 = {conn:?}");

    let v = [0.4, -1.3];
    let split = split_tangent(&v, &conn)?;
    println!("v   = {v:?}");
    println!("v_h = {:?}", split.horizontal);
    println!("v_v = {:?}", split.vertical);
    println!("recomposes exactly: {}", split.recomposes(&v));
    println!("v_h' R v_v = {:e}", split.orthogonality_defect(&metric));

    let samples: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64 * 0.3 - 0.6, 0.2]).collect();
    let bowl = ImplicitManifold::new(
        2,
        Sign::Minus,
        |x| x[0] * x[0] + x[0] * x[1],
        |x| vec![2.0 * x[0] + x[1], x[0]],
    );
    let r = check_integrability(&bowl, &samples);
    println!("gradient one-form integrable: {} (asymmetry {:e})", r.integrable, r.max_asymmetry);
    let r = check_one_form_integrability(|x: &[f64]| vec![-x[1], x[0]], &samples);
    println!("rotation one-form integrable: {} (asymmetry {})", r.integrable, r.max_asymmetry);
    Ok(())
}
