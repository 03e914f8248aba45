use super::{Scalar, Tensor};
use crate::error::Result;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// Passes the gradient where `input >= 0` and zeroes it where `input < 0`.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_same_shape(input, "relu_backward")?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x < T::zero() { T::zero() } else { g })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Gradient through a sigmoid, expressed in terms of its forward `output`.
pub fn sigmoid_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_same_shape(output, "sigmoid_backward")?;
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &y)| g * y * (T::one() - y))
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}
