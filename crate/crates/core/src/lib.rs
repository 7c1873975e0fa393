//! Activation-painting engine: tensors, a small reverse-mode tape, model
//! bundles with layer hooks, activation interventions and the analyses built
//! on them.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). The engine runs in
//! `f32`; `f64` instantiations serve as numerical references.

pub mod analysis;
pub mod autodiff;
pub mod bundle;
pub mod error;
pub mod image;
pub mod intervention;
pub mod ops;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use bundle::{BundleBuilder, ExecutionTrace, Hook, HookAction, LayerRef, ModelBundle, Role};
pub use error::{Error, Result};
pub use intervention::{ActivationVector, GridSpec, InterventionMask, LabelGrid, VectorLibrary};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ModelBundle32 = ModelBundle<f32>;
pub type ModelBundle64 = ModelBundle<f64>;
pub type GradTape32 = autodiff::GradTape<f32>;
pub type GradTape64 = autodiff::GradTape<f64>;
