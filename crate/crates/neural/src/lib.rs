//! Small differentiable-computation layer: `f32` tensors, a recording tape
//! for reverse-mode gradients, strided 1-D (transposed) convolutions, dense
//! layers, Adam, and diagonal-Gaussian latent helpers.

pub mod kernels;
pub mod latent;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use kernels::ConvSpec;
pub use latent::{kl_diag_gaussian, LatentDistribution};
pub use optim::Adam;
pub use params::{init_uniform, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite gradient in layer `{layer}`")]
    NonFinite { layer: String },
}
