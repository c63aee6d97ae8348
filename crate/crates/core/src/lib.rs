//! RWKV language model: the WKV recurrence in time-parallel and
//! time-sequential form, hand-written gradients, training, decoding and
//! benchmarks. Everything is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod bench;
pub mod blocks;
pub mod error;
pub mod infer;
pub mod init;
pub mod model;
pub mod scalar;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod weights;
pub mod wkv;

pub use error::{Error, Result};
pub use infer::{forward_step, generate, InferenceState, SamplerConfig};
pub use init::{init_model, InitSpec};
pub use model::{flops_per_token, param_count, Model, ModelConfig, Parameters};
pub use scalar::Scalar;
pub use train::{train_run, TrainConfig};
pub use weights::{load_weights, save_weights};

pub type Matrix64 = tensor::Matrix<f64>;
pub type Vector64 = tensor::Vector<f64>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type Parameters64 = Parameters<f64>;
pub type InferenceState64 = InferenceState<f64>;
pub type WkvParams64 = wkv::WkvParams<f64>;
pub type WkvState64 = wkv::WkvState<f64>;
