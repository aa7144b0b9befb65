//! Unsupervised anomaly detection for multivariate sensor streams.
//!
//! A generator/discriminator pair with self-attention is trained on normal
//! windows only. Test windows are inverted into the latent space and scored
//! by a blend of reconstruction and discrimination error. PCA and k-NN
//! baselines share the same windowing and evaluation path.

pub mod baselines;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{GanDims, GanModel};
pub use par::Exec;
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;
