//! Central finite differences used to cross-check analytically supplied
//! derivatives.

/// Step used for coordinate `xi`: `1e-5 * (1 + |xi|)`.
pub fn step_for(xi: f64) -> f64 {
    1e-5 * (1.0 + xi.abs())
}

/// Central-difference gradient of a scalar function.
pub fn gradient<F>(f: F, x: &[f64]) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = step_for(x[i]);
            probe[i] = x[i] + h;
            let fp = f(&probe);
            probe[i] = x[i] - h;
            let fm = f(&probe);
            probe[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Jacobian of a vector map, returned row-major as
/// `jac[i][j] = d f_i / d x_j`.
pub fn jacobian<F>(f: F, x: &[f64]) -> Vec<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = x.len();
    let mut probe = x.to_vec();
    let mut columns = Vec::with_capacity(n);
    for j in 0..n {
        let h = step_for(x[j]);
        probe[j] = x[j] + h;
        let fp = f(&probe);
        probe[j] = x[j] - h;
        let fm = f(&probe);
        probe[j] = x[j];
        columns.push(
            fp.iter()
                .zip(&fm)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect::<Vec<_>>(),
        );
    }
    let m = columns.first().map_or(0, Vec::len);
    (0..m)
        .map(|i| columns.iter().map(|col| col[i]).collect())
        .collect()
}
