//! Small differentiable-computation core: dense feedforward networks with
//! exact reverse-mode gradients, Adam, spectral normalization and the loss
//! primitives the training loops compose. Generic over [`Scalar`].

pub mod activation;
pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod loss;
pub mod matrix;
pub mod mlp;
pub mod scalar;
pub mod spectral;
pub mod train;

pub use activation::Activation;
pub use adam::Adam;
pub use checkpoint::ModelFile;
pub use error::{NumError, NumResult};
pub use loss::{bce, bce_with_grad, lsq_adv_losses, mse, mse_with_grad, LsqAdv};
pub use matrix::Matrix;
pub use mlp::{Dense, Gradients, Mlp, Trace};
pub use scalar::Scalar;
pub use spectral::spectral_normalize;
pub use train::{fit_mse, fit_mse_epochs, FitSettings};
