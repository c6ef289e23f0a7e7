use symabs::certificates::{self, KLBound};
use symabs::examples::*;
use symabs::hierarchy::{self, check_closeness, cosimulate, pair_initial, ControlInterface, PairedRun, TrialBudget};
use symabs::planner::{self, Refinement};
use symabs::systems::{sample_disturbance, InputSet, Signal, DEFAULT_HOLD};
use symabs::{Aabb, Matrix};

fn example1_run(dt: f64, zero_gain: bool) -> PairedRun {
    let (sys, abs, iface, _) = example1_setup(EX1_ETA).unwrap();
    let iface = if zero_gain {
        ControlInterface::affine(Matrix::zeros(2, 2))
    } else {
        iface
    };
    let x0 = example1_x0();
    let x2 = pair_initial(&abs, &x0).unwrap();
    cosimulate(&sys, &abs, &iface, &x0, &x2, &example1_input(), &Signal::zero(2), (0.0, EX1_HORIZON), dt).unwrap()
}

#[test]
fn example1_meets_precision() {
    let run = example1_run(1e-3, false);
    let c = check_closeness(&run, EX1_EPSILON);
    assert!(c.within, "max error {}", c.max_err);
    assert!(!check_closeness(&run, 0.1).within);
    assert!(run.output_errors()[0] <= EX1_ETA);
}

#[test]
fn example1_without_interface_drifts_apart() {
    let run = example1_run(1e-3, true);
    assert!(run.max_output_error() > EX1_EPSILON);
    for (u, v) in run.u.iter().zip(&run.v) {
        assert_eq!(u, v);
    }
}

#[test]
fn example1_is_step_converged() {
    let a = example1_run(1e-3, false).max_output_error();
    let b = example1_run(5e-4, false).max_output_error();
    assert!((a - b).abs() < 1e-4, "{a} vs {b}");
}

#[test]
fn example1_envelope_dominates() {
    let (_, _, _, cert) = example1_setup(EX1_ETA).unwrap();
    let run = example1_run(1e-3, false);
    let kl = KLBound::new(&cert, EX1_ETA, 0.0);
    let errs = run.companion_errors();
    for (t, e) in run.times.iter().zip(&errs) {
        assert!(*e <= kl.envelope(errs[0], *t) + 1e-9, "t = {t}");
    }
}

#[test]
fn example2_unforced_run_respects_input_bounds() {
    let (sys, abs, iface, cert) = example2_setup(EX2_ETA).unwrap();
    let x0 = example2_x0();
    let x2 = pair_initial(&abs, &x0).unwrap();
    let v = Signal::Constant(symabs::Vector::from_vec(vec![1.0, -0.5]));
    let run = cosimulate(&sys, &abs, &iface, &x0, &x2, &v, &Signal::zero(2), (0.0, 20.0), EX2_DT).unwrap();
    assert!(run.max_output_error() <= EX2_EPSILON);
    assert!(run.u.iter().all(|u| u.amax() <= EX2_INPUT_BOUND));
    let margin = certificates::interface_margin(&cert, EX2_ETA, 0.0);
    assert!(run.max_interface_deviation() <= margin + 1e-9);
}

#[test]
fn example2_planned_closed_loop() {
    let (sys, abs, iface, cert) = example2_setup(EX2_ETA).unwrap();
    let ws = example2_workspace();
    let q = abs.quantizer();
    let graph = planner::build_grid(&ws, q).unwrap();
    let start = pair_initial(&abs, &example2_x0()).unwrap();
    let plan = planner::plan_recurrence(&graph, &start).unwrap();
    planner::validate_plan(&plan, &ws, q).unwrap();
    assert_eq!(plan, planner::plan_recurrence(&graph, &start).unwrap());
    let opts = Refinement {
        dt: EX2_DT,
        ..Refinement::default()
    };
    let refined = planner::waypoints_to_input(&plan, &abs, &example2_input_map(), &opts).unwrap();
    assert!(refined.max_tube_distance() <= EX2_ETA / 2.0 + q.spacing());

    let w_set = example2_disturbance_set();
    let w_bar = w_set.max_norm();
    let kl = KLBound::new(&cert, EX2_ETA, w_bar);
    let margin = certificates::interface_margin(&cert, EX2_ETA, w_bar);
    for seed in 0..3 {
        let w = sample_disturbance(&w_set, seed, DEFAULT_HOLD, (0.0, refined.horizon)).unwrap();
        let run = cosimulate(&sys, &abs, &iface, &example2_x0(), &start, &refined.signal, &w, (0.0, refined.horizon), EX2_DT)
            .unwrap();
        assert!(run.max_output_error() <= EX2_EPSILON);
        assert!(run.max_interface_deviation() <= margin + 1e-9);
        let errs = run.companion_errors();
        for (t, e) in run.times.iter().zip(&errs) {
            assert!(*e <= kl.envelope(errs[0], *t) + 1e-9);
        }
        // Every target is reached by the concrete output.
        for target in &ws.targets {
            assert!(run.y1.iter().any(|y| target.contains(y, 0.0)));
        }
        for obstacle in &ws.obstacles {
            assert!(run.y1.iter().all(|y| !obstacle.contains(y, 0.0)));
        }
    }
}

#[test]
fn robust_simulation_negative_control() {
    let (sys, abs, iface, cert) = example2_setup(EX2_ETA).unwrap();
    let eps_tilde = certificates::disturbance_bound(&cert, &sys_c(), EX2_EPSILON).unwrap();
    let inputs = Aabb::symmetric(2, 1.0).unwrap();
    let states = Aabb::symmetric(2, 2.0).unwrap();
    let mut budget = TrialBudget::sampled(&states, &inputs, 7, (0.0, 5.0), 0.01);
    budget.seeds.truncate(2);
    budget.initial_states.truncate(2);

    let ok = hierarchy::check_robust_simulation(&sys, &abs, &iface, EX2_EPSILON, eps_tilde, &budget);
    assert!(ok.passed(), "{:?}", ok.verdict);

    let big = sys.with_disturbance_set(Aabb::symmetric(2, 50.0 * EX2_DISTURBANCE_BOUND).unwrap());
    let bad = hierarchy::check_robust_simulation(&big, &abs, &iface, EX2_EPSILON, eps_tilde, &budget);
    assert!(!bad.passed());
    assert!(!bad.disturbance_hypothesis);
}

fn sys_c() -> Matrix {
    example2_system().c
}

#[test]
fn runs_are_reproducible() {
    let (sys, abs, iface, _) = example2_setup(EX2_ETA).unwrap();
    let x0 = example2_x0();
    let x2 = pair_initial(&abs, &x0).unwrap();
    let csv = |seed| {
        let w = sample_disturbance(sys.disturbance_set(), seed, DEFAULT_HOLD, (0.0, 5.0)).unwrap();
        let run = cosimulate(&sys, &abs, &iface, &x0, &x2, &Signal::zero(2), &w, (0.0, 5.0), EX2_DT).unwrap();
        let mut buf = Vec::new();
        run.write_csv(&mut buf).unwrap();
        buf
    };
    assert_eq!(csv(3), csv(3));
    assert_ne!(csv(3), csv(4));
}

#[test]
fn pass_through_interface_on_unbounded_inputs() {
    let (sys, abs, _, _) = example1_setup(EX1_ETA).unwrap();
    let iface = ControlInterface::pass_through(2, 2);
    let x0 = abs.quantizer().coordinates(&pair_initial(&abs, &example1_x0()).unwrap());
    let x2 = pair_initial(&abs, &x0).unwrap();
    let run = cosimulate(&sys, &abs, &iface, &x0, &x2, &example1_input(), &Signal::zero(2), (0.0, 2.0), 1e-3).unwrap();
    // Identical dynamics from a lattice point: only quantization separates them.
    assert!(run.max_output_error() <= EX1_ETA + 1e-12);
    assert!(matches!(sys.input_set(), InputSet::Unbounded(2)));
}
