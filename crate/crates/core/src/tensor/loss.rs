use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Mean of squared elementwise differences.
pub fn mse_loss<T: Scalar>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    prediction.expect_same_shape(target, "mse_loss")?;
    if prediction.is_empty() {
        return Err(Error::Shape("mse_loss of empty tensors".into()));
    }
    let sum: T = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    let loss = sum / T::from_f64(prediction.len() as f64);
    if !loss.is_finite() {
        return Err(Error::Numeric("mse_loss is not finite".into()));
    }
    Ok(loss)
}

/// Gradient of [`mse_loss`] with respect to `prediction`: `2 (pred - target) / N`.
pub fn mse_loss_grad<T: Scalar>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    prediction.expect_same_shape(target, "mse_loss_grad")?;
    let scale = T::from_f64(2.0 / prediction.len() as f64);
    let data = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| scale * (p - t))
        .collect();
    Tensor::new(prediction.shape().to_vec(), data)
}
