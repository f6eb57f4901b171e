mod common;

use common::{control_cotangent, fd_loss_grad, implicit_loss_grad, instance, rel, rel_vec, tight_opts};
use diff_ilqr::baselines::{finite_diff_gradient, record_tape, propagate_tape, unrolled_sensitivities};
use diff_ilqr::ilqr::{IlqrOptions, Trajectory};
use diff_ilqr::implicit_diff::{implicit_backward, vjp, DiffMode, DiffOptions};
use diff_ilqr::models::ParamTarget;
use diff_ilqr::Error;

#[test]
fn long_unrolling_agrees_with_implicit_sensitivities() {
    for (model, target) in [
        ("pendulum", ParamTarget::Dynamics),
        ("cartpole", ParamTarget::Dynamics),
        ("pendulum", ParamTarget::Cost),
    ] {
        let inst = instance(model, 10, 4, target);
        let (res, sens) = unrolled_sensitivities(&inst.learner, &inst.x_init, 80).unwrap();
        assert!(res.converged);
        let implicit = implicit_backward(&inst.learner, &res, &DiffOptions::default()).unwrap();
        assert!(rel(&sens.du, &implicit.du) <= 1e-5, "{model}: {:e}", rel(&sens.du, &implicit.du));
        assert!(rel(&sens.dx, &implicit.dx) <= 1e-5, "{model}: {:e}", rel(&sens.dx, &implicit.dx));
    }
}

#[test]
fn short_unrolling_differs_from_the_fixed_point() {
    let inst = instance("pendulum", 10, 4, ParamTarget::Dynamics);
    let (_, full) = unrolled_sensitivities(&inst.learner, &inst.x_init, 80).unwrap();
    let (_, short) = unrolled_sensitivities(&inst.learner, &inst.x_init, 1).unwrap();
    assert!(rel(&short.du, &full.du) > 1e-3);
}

#[test]
fn tape_propagation_is_repeatable() {
    let inst = instance("cartpole", 10, 1, ParamTarget::Dynamics);
    let (_, tape) = record_tape(&inst.learner, &inst.x_init, 30, true).unwrap();
    assert_eq!(tape.iterations(), 30);
    assert_eq!(propagate_tape(&tape).unwrap(), propagate_tape(&tape).unwrap());
}

/// Central differences have an `O(h²)` error: halving the step cuts the gap
/// to the exact gradient by about four.
#[test]
fn finite_difference_error_shrinks_quadratically() {
    let inst = instance("pendulum", 8, 3, ParamTarget::Dynamics);
    let (res, exact) = implicit_loss_grad(&inst, DiffMode::Full);
    let coarse = rel_vec(&fd_loss_grad(&inst, &res, 2e-2), &exact);
    let fine = rel_vec(&fd_loss_grad(&inst, &res, 1e-2), &exact);
    let ratio = coarse / fine;
    assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn finite_differences_of_loss_match_vjp() {
    let inst = instance("cartpole", 10, 2, ParamTarget::Cost);
    let (res, g) = implicit_loss_grad(&inst, DiffMode::Full);
    let sens = implicit_backward(&inst.learner, &res, &DiffOptions::default()).unwrap();
    assert_eq!(vjp(&control_cotangent(&res, &inst.target), &sens).unwrap(), g);
    assert!(rel_vec(&g, &fd_loss_grad(&inst, &res, 1e-5)) <= 1e-4);
}

#[test]
fn failed_perturbed_solve_names_the_parameter() {
    let inst = instance("cartpole", 20, 0, ParamTarget::Dynamics);
    let opts = IlqrOptions {
        max_iter: 1,
        ..tight_opts()
    };
    let loss = |_: &Trajectory| 0.0;
    let err = finite_diff_gradient(&inst.learner, &inst.x_init, &loss, 1e-5, &opts, None).unwrap_err();
    assert!(matches!(err, Error::Perturbed { .. }), "{err}");
}

#[test]
fn zero_iterations_are_rejected() {
    let inst = instance("pendulum", 5, 0, ParamTarget::Dynamics);
    assert!(matches!(record_tape(&inst.learner, &inst.x_init, 0, true), Err(Error::Config(_))));
}
