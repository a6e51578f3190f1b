//! Complementary masked autoencoder pre-training with the DyViT hierarchical
//! encoder and dynamic multi-window self-attention, on a small dense tensor
//! library with reverse-mode differentiation.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom fix the common choices.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dmmsa;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod masking;
pub mod model;
pub mod optim;
pub mod params;
pub mod posembed;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use autograd::{Graph, Gradients, Var};
pub use config::{FusionMode, KvConv, ModelConfig, OptimConfig, RunConfig, TrainOptions, WindowFlags};
pub use error::{ComaError, Result};
pub use masking::{Branch, MaskPair, PatchGrid, TokenSet};
pub use model::DyVit;
pub use params::{ParamSpec, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
pub use trainer::TrainState;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type TrainState32 = TrainState<f32>;
pub type TrainState64 = TrainState<f64>;
