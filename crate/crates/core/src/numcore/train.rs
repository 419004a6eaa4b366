//! Minibatch regression loop shared by the supervised learners.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::error::{NumError, NumResult};
use super::loss::mse_with_grad;
use super::matrix::Matrix;
use super::mlp::Mlp;
use super::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// Fits `net` to `(x, y)` with Adam on the row-mean squared error, sampling
/// minibatches with replacement. Returns the loss of every step.
pub fn fit_mse<T: Scalar, R: Rng + ?Sized>(
    net: &mut Mlp<T>,
    x: &Matrix<T>,
    y: &Matrix<T>,
    settings: FitSettings,
    rng: &mut R,
) -> NumResult<Vec<T>> {
    if x.rows() == 0 {
        return Err(NumError::EmptyBatch("fit_mse"));
    }
    if x.rows() != y.rows() {
        return Err(NumError::ShapeMismatch {
            op: "fit_mse",
            left: x.shape(),
            right: y.shape(),
        });
    }
    if settings.batch_size == 0 {
        return Err(NumError::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut opt = Adam::new(settings.lr);
    let mut losses = Vec::with_capacity(settings.steps);
    let mut idx = vec![0; settings.batch_size];
    for _ in 0..settings.steps {
        idx.iter_mut().for_each(|i| *i = rng.gen_range(0..x.rows()));
        let xb = x.select_rows(&idx);
        let yb = y.select_rows(&idx);
        let (out, trace) = net.forward_trace(&xb)?;
        let (loss, d_out) = mse_with_grad(&out, &yb)?;
        if !loss.is_finite() {
            return Err(NumError::NonFinite("fit_mse loss"));
        }
        let (grads, _) = net.backward(&trace, &d_out)?;
        opt.step(net, &grads)?;
        if net.spectral_norm() {
            net.power_iterate()?;
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// Epoch-based variant of [`fit_mse`]: every epoch visits each row once in a
/// fresh random order. Returns the mean minibatch loss of every epoch.
pub fn fit_mse_epochs<T: Scalar, R: Rng + ?Sized>(
    net: &mut Mlp<T>,
    x: &Matrix<T>,
    y: &Matrix<T>,
    epochs: usize,
    settings: FitSettings,
    rng: &mut R,
) -> NumResult<Vec<T>> {
    if x.rows() == 0 {
        return Err(NumError::EmptyBatch("fit_mse_epochs"));
    }
    if x.rows() != y.rows() {
        return Err(NumError::ShapeMismatch {
            op: "fit_mse_epochs",
            left: x.shape(),
            right: y.shape(),
        });
    }
    if settings.batch_size == 0 {
        return Err(NumError::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut opt = Adam::new(settings.lr);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut sum = T::zero();
        let mut batches = 0usize;
        for idx in order.chunks(settings.batch_size) {
            let xb = x.select_rows(idx);
            let yb = y.select_rows(idx);
            let (out, trace) = net.forward_trace(&xb)?;
            let (loss, d_out) = mse_with_grad(&out, &yb)?;
            if !loss.is_finite() {
                return Err(NumError::NonFinite("fit_mse_epochs loss"));
            }
            let (grads, _) = net.backward(&trace, &d_out)?;
            opt.step(net, &grads)?;
            if net.spectral_norm() {
                net.power_iterate()?;
            }
            sum = sum + loss;
            batches += 1;
        }
        history.push(sum / T::lit(batches as f64));
    }
    Ok(history)
}
