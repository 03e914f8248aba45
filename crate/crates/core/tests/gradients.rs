mod common;

use common::{FD_TOLERANCE, SHAPES_PER_OP};

fn assert_op(r: common::OpResult) {
    assert!(r.shapes.len() >= SHAPES_PER_OP, "{}: only {} shapes", r.op, r.shapes.len());
    assert!(
        r.max_rel_err < FD_TOLERANCE,
        "{}: max relative error {:.3e} over {:?}",
        r.op,
        r.max_rel_err,
        r.shapes
    );
}

#[test]
fn conv2d_matches_finite_differences() {
    assert_op(common::conv2d(11));
}

#[test]
fn relu_matches_finite_differences() {
    assert_op(common::relu_op(12));
}

#[test]
fn sigmoid_matches_finite_differences() {
    assert_op(common::sigmoid_op(13));
}

#[test]
fn bilinear_resize_matches_finite_differences() {
    assert_op(common::resize_op(14));
}

#[test]
fn bilinear_upsample_matches_finite_differences() {
    assert_op(common::upsample_op(15));
}

#[test]
fn mse_matches_finite_differences() {
    assert_op(common::mse_op(16));
}

#[test]
fn autoencoder_matches_finite_differences() {
    assert_op(common::autoencoder(17));
}

#[test]
fn rel_err_floor_is_absolute_near_zero() {
    assert!(common::rel_err(1e-12, 0.0) < 1e-5);
    assert!(common::rel_err(1.0, 1.001) > 1e-4);
}
