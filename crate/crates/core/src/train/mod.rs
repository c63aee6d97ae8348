//! Training: loss, hand-derived reverse pass, Adam and the step loop.

pub mod backward;
pub mod config;
pub mod loss;
pub mod optim;
pub mod run;

pub use backward::{backward, backward_sequence, Gradients};
pub use config::{EmbeddingInit, TrainConfig};
pub use loss::{loss, LossBreakdown};
pub use optim::{adam_step, clip_grad_norm, grad_norm, lr_at, AdamConfig, AdamState};
pub use run::{checkpoint_path, smoothed, train_run, Corpus, LogRecord, RunOptions, TrainOutcome, Trainer};
