//! Joint appearance and memory video segmentation.
//!
//! A dilated ConvNet labels single frames, a Conv-LSTM carries semantic
//! features across time, and two per-pixel sigmoid gates blend the two
//! predictions. The crate also contains the reverse-mode autodiff core the
//! networks are built on, a synthetic driving-scene generator, staged
//! training, checkpoints and IoU metrics.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the usual 32-bit storage.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod params;
pub mod pnm;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use kernels::ConvOpts;
pub use nets::{GatedPrediction, MemoryState, ModelConfig, SegModel};
pub use params::ParamSet;
pub use rng::Rng64;
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type ParamSet64 = ParamSet<f64>;
pub type Model32 = SegModel<f32>;
pub type Model64 = SegModel<f64>;
