mod common;

use common::checks::{micro_model_error, module_errors, primitive_op_errors, GRAD_TOL};

#[test]
fn every_primitive_op() {
    for (name, err) in primitive_op_errors() {
        assert!(err < GRAD_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn blocks_and_expert_families() {
    for (name, err) in module_errors() {
        assert!(err < GRAD_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn micro_model_joint_loss() {
    let err = micro_model_error();
    assert!(err < GRAD_TOL, "micro model: {err:e}");
}
