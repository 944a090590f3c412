use approx::assert_relative_eq;

use pni::estimation::{run_estimation, EstimationConfig, EstimationMethod, RegressorSignal};
use pni::sim::{self, SimConfig};
use pni::systems;

fn norm0(signal: &RegressorSignal) -> f64 {
    signal.theta_true().iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn ge_converges_under_persistent_excitation() {
    let s = RegressorSignal::pe();
    let cfg = EstimationConfig {
        gamma: 1.0,
        t_end: 20.0,
        ..Default::default()
    };
    let run = run_estimation(&s, EstimationMethod::Ge, &cfg).unwrap();
    assert!(run.final_error_norm() < 1e-3 * norm0(&s));
}

#[test]
fn high_gain_ge_is_monotone_but_slow() {
    // d/dt |θ̃|²/2 = −γ (Φᵀθ̃)² ≤ 0, but with γ = 100 the error is pinned to
    // the instantaneous null space of Φᵀ and decays slowly
    let s = RegressorSignal::pe();
    let cfg = EstimationConfig {
        t_end: 20.0,
        ..Default::default()
    };
    let run = run_estimation(&s, EstimationMethod::Ge, &cfg).unwrap();
    let r = &run.trajectory.residuals;
    for k in 1..r.len() {
        assert!(r[k] <= r[k - 1] * (1.0 + 1e-12));
    }
    assert!(run.final_error_norm() < r[0]);
    assert!(run.final_error_norm() > 1e-3 * norm0(&s));
}

#[test]
fn filtered_estimators_beat_plain_gradient_on_ie_signal() {
    let s = RegressorSignal::ie();
    let cfg = EstimationConfig {
        t_end: 50.0,
        ..Default::default()
    };
    let ge = run_estimation(&s, EstimationMethod::Ge, &cfg).unwrap();
    let mre = run_estimation(&s, EstimationMethod::MreGe, &cfg).unwrap();
    let cge = run_estimation(&s, EstimationMethod::Cge, &cfg).unwrap();
    assert!(cge.final_error_norm() < mre.final_error_norm());
    assert!(mre.final_error_norm() < ge.final_error_norm());
    assert!(cge.norm_report.settled());
}

#[test]
fn cge_transient_is_no_worse_than_ge() {
    for (s, t_end) in [(RegressorSignal::pe(), 20.0), (RegressorSignal::ie(), 50.0)] {
        let cfg = EstimationConfig {
            t_end,
            ..Default::default()
        };
        let ge = run_estimation(&s, EstimationMethod::Ge, &cfg).unwrap();
        let cge = run_estimation(&s, EstimationMethod::Cge, &cfg).unwrap();
        let ts_ge = ge.norm_report.settling_time_2pct.unwrap_or(f64::INFINITY);
        let ts_cge = cge.norm_report.settling_time_2pct.unwrap_or(f64::INFINITY);
        assert!(ts_cge <= ts_ge);
        for (c, g) in cge.sign_changes().iter().zip(ge.sign_changes()) {
            assert!(*c <= g);
        }
    }
}

#[test]
fn linear_examples_match_matrix_exponential() {
    for d in [systems::make_a1(1.0).unwrap(), systems::make_a2(1.0).unwrap()] {
        let a = systems::sample_affine(&d.closed_loop).unwrap().a;
        let x0 = vec![1.0, -0.5];
        let traj = sim::integrate(&d.closed_loop, &SimConfig::new(3.0, 1e-3, x0.clone())).unwrap();
        let exact = sim::linear_analytic_oracle(&a, &x0, 3.0);
        let last = traj.final_state().unwrap();
        for i in 0..2 {
            assert!((last[i] - exact[i]).abs() < 1e-11);
        }
    }
}

#[test]
fn manifold_attracts_faster_than_flow_along_it() {
    // start just off the manifold so the repeated root does not slow the
    // tangential channel
    for alpha in [3.0, 6.0] {
        let d = systems::make_a2(alpha).unwrap();
        let traj = sim::integrate(&d.closed_loop, &SimConfig::new(8.0, 1e-3, vec![1.0, -0.99])).unwrap();
        let split = sim::rate_split(&traj, &d.equilibrium).unwrap();
        assert_relative_eq!(split.normal, alpha, max_relative = 1e-6);
        assert_relative_eq!(split.tangential, 1.0, max_relative = 0.05);
        assert!(split.dominance() > 2.5);
    }
}

#[test]
fn closed_loops_are_invariant_on_the_manifold() {
    for d in [
        systems::make_a1(2.0).unwrap(),
        systems::make_a2(2.0).unwrap(),
        systems::make_a3(2.0).unwrap(),
    ] {
        let x1: f64 = 0.6;
        let on = vec![x1, -d.law.manifold().phi(&[x1])];
        let traj = sim::integrate(&d.closed_loop, &SimConfig::new(5.0, 1e-3, on)).unwrap();
        assert!(traj.residuals.iter().all(|m| m.abs() < 1e-12));
    }
}
