use std::sync::Arc;

use approx::assert_abs_diff_eq;

use dbdp_core::hilbert::TailRule;
use dbdp_core::oracles::{mc_solution_oracle, strong_error_report, LinearOuOracle, McConfig, OracleApproximators, ReportConfig, SolutionOracle};
use dbdp_core::paths::{simulate, TimeGrid};
use dbdp_core::problem::ModelProblem;
use dbdp_core::scheme::{backward_induction, NetConfig, SchemeSeeds, SchemeState, TrainConfig};
use dbdp_core::{CovarianceSpec, HilbertVec};

fn setup(r: f64) -> (ModelProblem, LinearOuOracle, HilbertVec) {
    let a = vec![-1.0, -4.0];
    let q = CovarianceSpec::new(vec![1.0, 0.25], TailRule::FiniteRank).unwrap();
    let p = ModelProblem::linear_ou(a.clone(), q.clone(), r, 0.5).unwrap();
    let o = LinearOuOracle::new(a, &q, r, 0.5).unwrap();
    (p, o, HilbertVec::from_coeffs(vec![1.0, 0.5]).unwrap())
}

#[test]
fn exact_solution_has_no_error_on_its_own_grid() {
    let (p, o, x0) = setup(0.5);
    let grid = TimeGrid::new(0.5, 4).unwrap();
    let exact = OracleApproximators::new(Arc::new(o.clone()), &grid, &p);
    let cfg = ReportConfig {
        fine_factor: 1,
        paths: 256,
        probes: 4,
        inner: 64,
        seed: 3,
    };
    let r = strong_error_report(&exact, &p, Some(&o), &grid, &x0, &cfg).unwrap();
    assert!(!r.rhs_only);
    assert_abs_diff_eq!(r.lhs_y.unwrap(), 0.0, epsilon = 1e-20);
    assert_abs_diff_eq!(r.lhs_z.unwrap(), 0.0, epsilon = 1e-20);
    assert_eq!(r.e_x, 0.0);
    let row = r.sweep_csv_row();
    assert_eq!(row.split(',').count(), 9);
}

#[test]
fn missing_oracle_gives_rhs_only_report() {
    let (p, o, x0) = setup(0.0);
    let grid = TimeGrid::new(0.5, 2).unwrap();
    let exact = OracleApproximators::new(Arc::new(o), &grid, &p);
    let cfg = ReportConfig {
        fine_factor: 2,
        paths: 64,
        probes: 2,
        inner: 16,
        seed: 0,
    };
    let r = strong_error_report(&exact, &p, None, &grid, &x0, &cfg).unwrap();
    assert!(r.rhs_only && r.lhs_y.is_none() && r.e_y.is_none());
    assert!(r.e_x > 0.0);
}

#[test]
fn monte_carlo_agrees_with_closed_form_under_discounting() {
    let (p, o, x0) = setup(1.0);
    let e = mc_solution_oracle(&p, 0.1, x0.coeffs(), &McConfig { steps: 100, paths: 20_000, ..McConfig::default() }).unwrap();
    let exact = o.y(0.1, x0.coeffs());
    assert!((e.value - exact).abs() < 3.0 * e.se + 5e-3, "{} vs {exact}", e.value);
}

#[test]
fn trained_scheme_round_trips_through_checkpoints() {
    let (p, o, x0) = setup(0.0);
    let grid = TimeGrid::new(0.5, 3).unwrap();
    let bundle = simulate(&p, &grid, &x0, 512, 5).unwrap();
    let net = NetConfig {
        width: 16,
        ..NetConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 40,
        batch: 64,
        ..TrainConfig::default()
    };
    let s = backward_induction(&p, &grid, &bundle, &net, &cfg).unwrap();
    for r in s.reports() {
        assert!(r.final_loss <= r.initial_loss);
    }
    let u0 = s.value_at_zero(x0.coeffs()).unwrap();
    let exact = o.y(0.0, x0.coeffs());
    assert!((u0 - exact).abs() / exact < 0.5, "{u0} vs {exact}");

    let dir = tempfile::tempdir().unwrap();
    s.save(dir.path(), "abc", &SchemeSeeds { paths: 5, training: 0 }).unwrap();
    let (back, manifest) = SchemeState::load(dir.path(), p.phi.clone()).unwrap();
    assert_eq!(manifest.problem_hash, "abc");
    assert_eq!(manifest.steps, 3);
    assert_eq!(back.value_at_zero(x0.coeffs()).unwrap(), u0);
}

#[test]
fn training_is_deterministic() {
    let (p, _, x0) = setup(0.0);
    let grid = TimeGrid::new(0.5, 2).unwrap();
    let bundle = simulate(&p, &grid, &x0, 128, 1).unwrap();
    let net = NetConfig {
        width: 8,
        ..NetConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 5,
        batch: 32,
        ..TrainConfig::default()
    };
    let a = backward_induction(&p, &grid, &bundle, &net, &cfg).unwrap();
    let b = backward_induction(&p, &grid, &bundle, &net, &cfg).unwrap();
    for i in 0..2 {
        assert_eq!(a.u_net(i).to_checkpoint(), b.u_net(i).to_checkpoint());
        assert_eq!(a.z_net(i).to_checkpoint(), b.z_net(i).to_checkpoint());
    }
}
