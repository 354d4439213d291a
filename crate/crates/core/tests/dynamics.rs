use std::sync::Arc;

use martingale_pmp::dynamics::{
    apply_spike, evaluate_cost, finite_diff_check, integrate_forward, integrate_variational,
    integrate_zeta, ControlPolicy, ControlProblem, ControlSet, DerivativeProbe, SpikeSpec,
};
use martingale_pmp::hilbert::{ControlVec, Operator, StateVec};
use martingale_pmp::martingale::{sample_increments, MartingaleDriver, PathGrid, ScalarIntensity};
use martingale_pmp::problems::{BilinearProblem, FaultTarget, FaultyDerivative, LqProblem};
use martingale_pmp::Error;

fn s(v: f64) -> Operator {
    Operator::from_element(1, 1, v)
}

/// Scalar `dX = (aX + cu + f)dt + (γX·g + d)dM` with no running state cost.
fn scalar_lq(a: f64, c: f64, f: f64, gamma: f64, g: f64, d: f64) -> LqProblem {
    LqProblem::new(
        s(a),
        s(c),
        StateVec::from_element(1, f),
        StateVec::from_element(1, gamma),
        s(g),
        s(d),
        s(0.0),
        s(1.0),
        s(1.0),
    )
    .unwrap()
}

fn scalar_driver(horizon: f64) -> MartingaleDriver {
    MartingaleDriver::rank_one(
        StateVec::from_element(1, 1.0),
        ScalarIntensity::constant(1.0),
        horizon,
    )
    .unwrap()
}

fn bilinear() -> BilinearProblem {
    #[rustfmt::skip]
    let f = Operator::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 1.0]);
    let g = Operator::from_row_slice(2, 2, &[0.4, 0.1, 0.0, 0.3]);
    BilinearProblem::new(
        StateVec::from_vec(vec![0.7, -0.2]),
        StateVec::from_vec(vec![1.0, 0.5]),
        f,
        g,
        ControlSet::Box {
            lower: ControlVec::from_element(2, -3.0),
            upper: ControlVec::from_element(2, 3.0),
        },
    )
    .unwrap()
}

fn bilinear_driver() -> MartingaleDriver {
    MartingaleDriver::rank_one(
        StateVec::from_vec(vec![0.7, -0.2]),
        ScalarIntensity::affine(1.0, 0.5, 1.0),
        1.0,
    )
    .unwrap()
}

#[test]
fn null_coefficients_keep_the_state_fixed() {
    let problem = scalar_lq(0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let grid = PathGrid::new(1.0, 50).unwrap();
    let bundle = sample_increments(&scalar_driver(1.0), &grid, 20, 1).unwrap();
    let x0 = StateVec::from_element(1, 0.75);
    let traj = integrate_forward(
        &problem,
        &ControlPolicy::constant(ControlVec::from_element(1, 2.0), 50),
        &bundle,
        &x0,
    )
    .unwrap();
    for p in 0..20 {
        for k in 0..=50 {
            assert_eq!(traj.state(p, k)[0], 0.75);
        }
    }
}

#[test]
fn unit_drift_moves_along_the_grid() {
    let problem = scalar_lq(0.0, 0.0, 1.0, 0.0, 0.0, 0.0);
    let grid = PathGrid::new(2.0, 64).unwrap();
    let bundle = sample_increments(&scalar_driver(2.0), &grid, 3, 2).unwrap();
    let x0 = StateVec::from_element(1, -1.0);
    let traj = integrate_forward(
        &problem,
        &ControlPolicy::constant(ControlVec::zeros(1), 64),
        &bundle,
        &x0,
    )
    .unwrap();
    for k in 0..=64 {
        assert!((traj.state(1, k)[0] - (-1.0 + grid.time(k))).abs() < 1e-12);
    }
}

#[test]
fn strong_error_shrinks_under_refinement() {
    // geometric motion dX = 0.3X dt + 0.8X dM, compared with a 16x finer grid
    let problem = scalar_lq(0.3, 0.0, 0.0, 1.0, 0.8, 0.0);
    let driver = scalar_driver(1.0);
    let x0 = StateVec::from_element(1, 1.0);
    let policy = |steps| ControlPolicy::constant(ControlVec::zeros(1), steps);
    let mut errors = Vec::new();
    for coarse in [8usize, 16, 32] {
        let fine =
            sample_increments(&driver, &PathGrid::new(1.0, coarse * 16).unwrap(), 2000, 3).unwrap();
        let reference = integrate_forward(&problem, &policy(coarse * 16), &fine, &x0).unwrap();
        let bundle = fine.coarsen(16).unwrap();
        let approx = integrate_forward(&problem, &policy(coarse), &bundle, &x0).unwrap();
        let err: f64 = (0..2000)
            .map(|p| (approx.state(p, coarse)[0] - reference.state(p, coarse * 16)[0]).powi(2))
            .sum::<f64>()
            / 2000.0;
        errors.push(err);
    }
    assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
    // strong order 1/2: the mean-square error roughly halves per refinement
    assert!(errors[2] < 0.7 * errors[0], "{errors:?}");
}

#[test]
fn coarsened_bundle_sums_increments() {
    let grid = PathGrid::new(1.0, 12).unwrap();
    let fine = sample_increments(&bilinear_driver(), &grid, 4, 9).unwrap();
    let coarse = fine.coarsen(3).unwrap();
    assert_eq!(coarse.grid().steps(), 4);
    for i in 0..2 {
        let sum: f64 = (3..6).map(|k| fine.increment(2, k)[i]).sum();
        assert!((coarse.increment(2, 1)[i] - sum).abs() < 1e-15);
    }
    assert!(fine.coarsen(5).is_err());
    assert!(fine.coarsen(0).is_err());
}

#[test]
fn spike_specs_must_align_with_the_grid() {
    let grid = PathGrid::new(1.0, 100).unwrap();
    let v = ControlVec::zeros(1);
    assert_eq!(
        SpikeSpec::new(0.2, 0.05, v.clone()).window(&grid).unwrap(),
        20..25
    );
    assert!(matches!(
        SpikeSpec::new(0.2, 0.0, v.clone()).window(&grid),
        Err(Error::InvalidSpike(_))
    ));
    assert!(SpikeSpec::new(0.2, 0.005, v.clone()).window(&grid).is_err());
    assert!(SpikeSpec::new(0.2, 0.015, v.clone()).window(&grid).is_err());
    assert!(SpikeSpec::new(0.205, 0.01, v.clone())
        .window(&grid)
        .is_err());
    assert!(SpikeSpec::new(0.95, 0.1, v.clone()).window(&grid).is_err());
    assert_eq!(SpikeSpec::new(0.9, 0.1, v).window(&grid).unwrap(), 90..100);
}

#[test]
fn spike_replaces_the_control_only_on_its_window() {
    let grid = PathGrid::new(1.0, 10).unwrap();
    let base = ControlPolicy::OpenLoop(
        (0..10)
            .map(|k| ControlVec::from_element(1, k as f64))
            .collect(),
    );
    let spec = SpikeSpec::new(0.3, 0.2, ControlVec::from_element(1, -7.0));
    let spiked = apply_spike(&base, &spec, &grid).unwrap();
    let x = StateVec::zeros(1);
    for k in 0..10 {
        let expected = if (3..5).contains(&k) { -7.0 } else { k as f64 };
        assert_eq!(spiked.control(k, grid.time(k), &x)[0], expected);
    }
    let fb = ControlPolicy::feedback(|_, _, x: &StateVec| ControlVec::from_element(1, 2.0 * x[0]));
    let spiked = apply_spike(&fb, &spec, &grid).unwrap();
    let x = StateVec::from_element(1, 1.5);
    assert_eq!(spiked.control(2, 0.2, &x)[0], 3.0);
    assert_eq!(spiked.control(4, 0.4, &x)[0], -7.0);
    assert_eq!(spiked.control(5, 0.5, &x)[0], 3.0);
}

#[test]
fn reruns_and_spikes_share_noise() {
    let problem = bilinear();
    let grid = PathGrid::new(1.0, 40).unwrap();
    let bundle = sample_increments(&bilinear_driver(), &grid, 50, 11).unwrap();
    let x0 = StateVec::from_vec(vec![0.5, -1.0]);
    let u = problem.candidate_control();
    let policy = ControlPolicy::constant(u, 40);
    let a = integrate_forward(&problem, &policy, &bundle, &x0).unwrap();
    let b = integrate_forward(&problem, &policy, &bundle, &x0).unwrap();
    for p in 0..50 {
        assert_eq!(a.path_states(p), b.path_states(p));
    }
    let spec = SpikeSpec::new(0.5, 0.1, ControlVec::from_vec(vec![1.0, 1.0]));
    let spiked = integrate_forward(
        &problem,
        &apply_spike(&policy, &spec, &grid).unwrap(),
        &bundle,
        &x0,
    )
    .unwrap();
    for p in 0..50 {
        for k in 0..=20 {
            assert_eq!(spiked.state(p, k), a.state(p, k));
        }
        assert_ne!(spiked.state(p, 40), a.state(p, 40));
    }
}

#[test]
fn out_of_set_controls_and_blowups_are_errors() {
    let problem = bilinear();
    let grid = PathGrid::new(1.0, 10).unwrap();
    let bundle = sample_increments(&bilinear_driver(), &grid, 2, 1).unwrap();
    let x0 = StateVec::zeros(2);
    let outside = ControlPolicy::constant(ControlVec::from_element(2, 5.0), 10);
    assert!(matches!(
        integrate_forward(&problem, &outside, &bundle, &x0),
        Err(Error::InvalidPolicy(_))
    ));
    let feedback_outside = ControlPolicy::feedback(|_, _, _| ControlVec::from_element(2, 5.0));
    assert!(matches!(
        integrate_forward(&problem, &feedback_outside, &bundle, &x0),
        Err(Error::InvalidPolicy(_))
    ));
    let explosive = scalar_lq(1e300, 0.0, 0.0, 0.0, 0.0, 0.0);
    let grid1 = PathGrid::new(1.0, 10).unwrap();
    let b1 = sample_increments(&scalar_driver(1.0), &grid1, 2, 1).unwrap();
    let r = integrate_forward(
        &explosive,
        &ControlPolicy::constant(ControlVec::zeros(1), 10),
        &b1,
        &StateVec::from_element(1, 1e300),
    );
    assert!(matches!(r, Err(Error::BlowUp { path: 0, .. })), "{r:?}");
    let short = ControlPolicy::constant(ControlVec::zeros(2), 9);
    assert!(matches!(
        integrate_forward(&problem, &short, &bundle, &x0),
        Err(Error::InvalidPolicy(_))
    ));
}

#[test]
fn variational_process_vanishes_for_the_reference_value() {
    let problem = bilinear();
    let grid = PathGrid::new(1.0, 20).unwrap();
    let bundle = sample_increments(&bilinear_driver(), &grid, 30, 5).unwrap();
    let u = problem.candidate_control();
    let traj = integrate_forward(
        &problem,
        &ControlPolicy::constant(u.clone(), 20),
        &bundle,
        &StateVec::zeros(2),
    )
    .unwrap();
    let spec = SpikeSpec::new(0.25, 0.1, u);
    let p = integrate_variational(&problem, &traj, &bundle, &spec).unwrap();
    let z = integrate_zeta(&problem, &traj, &p, &spec).unwrap();
    for path in 0..30 {
        for k in 0..=20 {
            assert_eq!(p.at(path, k).amax(), 0.0);
            assert_eq!(z.at(path, k), 0.0);
        }
    }
}

#[test]
fn variational_process_is_constant_without_state_dependence() {
    // F = Cu + f, G = D: p(t0) = C(v - u) and nothing moves it afterwards
    let problem = scalar_lq(0.0, 2.0, 0.5, 0.0, 0.0, 0.7);
    let grid = PathGrid::new(1.0, 20).unwrap();
    let bundle = sample_increments(&scalar_driver(1.0), &grid, 10, 5).unwrap();
    let traj = integrate_forward(
        &problem,
        &ControlPolicy::constant(ControlVec::from_element(1, 0.25), 20),
        &bundle,
        &StateVec::zeros(1),
    )
    .unwrap();
    let spec = SpikeSpec::new(0.4, 0.1, ControlVec::from_element(1, 1.0));
    let p = integrate_variational(&problem, &traj, &bundle, &spec).unwrap();
    for path in 0..10 {
        for k in 0..8 {
            assert_eq!(p.at(path, k)[0], 0.0);
        }
        for k in 8..=20 {
            assert!((p.at(path, k)[0] - 1.5).abs() < 1e-15);
        }
    }
    assert_eq!(p.start(), 8);
}

#[test]
fn zeta_is_constant_when_the_running_cost_ignores_the_state() {
    let problem = bilinear();
    let grid = PathGrid::new(1.0, 20).unwrap();
    let bundle = sample_increments(&bilinear_driver(), &grid, 10, 8).unwrap();
    let u = problem.candidate_control();
    let traj = integrate_forward(
        &problem,
        &ControlPolicy::constant(u.clone(), 20),
        &bundle,
        &StateVec::zeros(2),
    )
    .unwrap();
    let v = ControlVec::from_vec(vec![1.0, -1.0]);
    let spec = SpikeSpec::new(0.5, 0.05, v.clone());
    let p = integrate_variational(&problem, &traj, &bundle, &spec).unwrap();
    let z = integrate_zeta(&problem, &traj, &p, &spec).unwrap();
    let expected = v.norm_squared() - u.norm_squared();
    for path in 0..10 {
        assert_eq!(z.at(path, 9), 0.0);
        for k in 10..=20 {
            assert!((z.at(path, k) - expected).abs() < 1e-14);
        }
        assert!((z.terminal(path) - expected).abs() < 1e-14);
    }
}

#[test]
fn variational_inputs_must_share_the_bundle() {
    let problem = bilinear();
    let grid = PathGrid::new(1.0, 20).unwrap();
    let a = sample_increments(&bilinear_driver(), &grid, 10, 1).unwrap();
    let b = sample_increments(&bilinear_driver(), &grid, 10, 2).unwrap();
    let u = problem.candidate_control();
    let traj = integrate_forward(
        &problem,
        &ControlPolicy::constant(u.clone(), 20),
        &a,
        &StateVec::zeros(2),
    )
    .unwrap();
    let spec = SpikeSpec::new(0.5, 0.05, u);
    assert!(matches!(
        integrate_variational(&problem, &traj, &b, &spec),
        Err(Error::BundleMismatch(_))
    ));
}

#[test]
fn deterministic_cost_matches_hand_computation() {
    // X_k = k·dt (f = 1), u ≡ 1, ℓ = ½u², h = ½X(T)²
    let problem = scalar_lq(0.0, 0.0, 1.0, 0.0, 0.0, 0.0);
    let grid = PathGrid::new(1.0, 10).unwrap();
    let bundle = sample_increments(&scalar_driver(1.0), &grid, 4, 1).unwrap();
    let traj = integrate_forward(
        &problem,
        &ControlPolicy::constant(ControlVec::from_element(1, 1.0), 10),
        &bundle,
        &StateVec::zeros(1),
    )
    .unwrap();
    let cost = evaluate_cost(&problem, &traj);
    assert!((cost.estimate.mean - 1.0).abs() < 1e-12);
    assert_eq!(cost.estimate.std_err, 0.0);
    assert_eq!(cost.per_path.len(), 4);
}

fn probes(n: usize, m: usize) -> Vec<DerivativeProbe> {
    (0..6)
        .map(|i| DerivativeProbe {
            t: 0.1 * i as f64,
            x: StateVec::from_fn(n, |j, _| ((i * 3 + j) as f64 * 0.37).sin() * 2.0),
            u: ControlVec::from_fn(m, |j, _| ((i + 2 * j) as f64 * 0.53).cos()),
        })
        .collect()
}

#[test]
fn packaged_derivatives_agree_with_finite_differences() {
    let bil = bilinear();
    let r = finite_diff_check(&bil, &probes(2, 2)).unwrap();
    assert!(r.passed(), "{r:?}");
    let nonlinear = bilinear().with_nonlinearity(0.8);
    let r = finite_diff_check(&nonlinear, &probes(2, 2)).unwrap();
    assert!(r.passed(), "{r:?}");
    // diag(κ sech²): Hilbert–Schmidt norm at most κ√2
    assert!(r.drift_x_bound > 0.0 && r.drift_x_bound <= 0.8 * 2f64.sqrt() + 1e-12);
    let lq = LqProblem::new(
        Operator::from_row_slice(2, 2, &[0.1, 0.3, -0.2, 0.4]),
        Operator::from_row_slice(2, 1, &[1.0, 0.5]),
        StateVec::from_vec(vec![0.2, 0.0]),
        StateVec::from_vec(vec![0.3, -0.1]),
        Operator::from_row_slice(2, 2, &[0.2, 0.0, 0.1, 0.3]),
        Operator::identity(2, 2) * 0.5,
        Operator::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
        Operator::from_element(1, 1, 2.0),
        Operator::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]),
    )
    .unwrap();
    let r = finite_diff_check(&lq, &probes(2, 1)).unwrap();
    assert!(r.passed(), "{r:?}");
    assert!(r.error_of("h_x").unwrap() < 1e-6);
}

#[test]
fn every_corrupted_derivative_is_detected() {
    let targets = [
        (FaultTarget::DriftX, "F_x"),
        (FaultTarget::DriftU, "F_u"),
        (FaultTarget::DiffusionX, "G_x"),
        (FaultTarget::RunningCostX, "l_x"),
        (FaultTarget::RunningCostU, "l_u"),
        (FaultTarget::TerminalCostX, "h_x"),
    ];
    for (target, name) in targets {
        let faulty = FaultyDerivative {
            inner: Arc::new(bilinear()),
            target,
            offset: 0.01,
        };
        let r = finite_diff_check(&faulty, &probes(2, 2)).unwrap();
        assert_eq!(r.faults, vec![name], "{name}: {r:?}");
        assert!(r.error_of(name).unwrap() > 1e-3);
    }
}

#[test]
fn derivative_probes_are_validated() {
    let bad = vec![DerivativeProbe {
        t: 0.0,
        x: StateVec::zeros(3),
        u: ControlVec::zeros(2),
    }];
    assert!(finite_diff_check(&bilinear(), &bad).is_err());
    let nan = vec![DerivativeProbe {
        t: 0.0,
        x: StateVec::from_vec(vec![f64::NAN, 0.0]),
        u: ControlVec::zeros(2),
    }];
    assert!(finite_diff_check(&bilinear(), &nan).is_err());
}

#[test]
fn control_sets_report_membership_and_probes() {
    let bx = ControlSet::Box {
        lower: ControlVec::from_vec(vec![-1.0, 0.0]),
        upper: ControlVec::from_vec(vec![1.0, 2.0]),
    };
    assert!(bx.is_convex());
    assert!(bx.contains(&ControlVec::from_vec(vec![1.0, 0.0])));
    assert!(!bx.contains(&ControlVec::from_vec(vec![1.1, 0.0])));
    let probes = bx.probe_grid(11, 10_000).unwrap();
    assert_eq!(probes.len(), 121);
    assert!(probes.iter().all(|p| bx.contains(p)));
    let ball = ControlSet::Ball {
        center: ControlVec::zeros(2),
        radius: 1.0,
    };
    let probes = ball.probe_grid(11, 10_000).unwrap();
    assert!(!probes.is_empty() && probes.iter().all(|p| ball.contains(p)));
    let finite = ControlSet::Finite(vec![ControlVec::zeros(1), ControlVec::from_element(1, 1.0)]);
    assert!(!finite.is_convex());
    assert_eq!(finite.probe_grid(11, 10).unwrap().len(), 2);
    assert_eq!(finite.dim(), 1);
    assert!(problem_dims_match());
}

fn problem_dims_match() -> bool {
    let p = bilinear();
    p.state_dim() == 2 && p.control_dim() == 2
}
