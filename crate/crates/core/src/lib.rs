//! Audiovisual sequence-to-sequence fusion on a small reverse-mode autodiff
//! engine: tensors and gradients, transformer blocks, the fusion model
//! variants, synthetic data and babble noise, training, decoding and
//! word error rate evaluation.

pub mod autograd;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod noise;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod wer;

pub use autograd::{grad_check, Gradients, Graph, Mask, Var};
pub use error::{Error, Result};
pub use fusion::{build_model, FusionDesign, Model, ModelConfig, ModelVariant, VariantKind};
pub use params::ParamStore;
pub use tensor::Tensor;
