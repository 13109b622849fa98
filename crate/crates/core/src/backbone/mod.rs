//! Causal transformer backbone with explicit position IDs, rotary
//! embeddings, incremental KV caching, and gradient-based training.

mod buffer;
mod cache;
mod checkpoint;
mod config;
mod grad;
mod model;
mod ops;
mod optim;
mod params;

pub use buffer::TokenBuffer;
pub use cache::KvCache;
pub use checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{ModelConfig, TokenId};
pub use grad::{batch_logits, batch_loss, loss_and_grad, weighted_nll, BatchGrad, LossFn, LossReport, NllTerm, TokenNll};
pub use model::{log_softmax, softmax, ForwardOutput, Logits, Model};
pub use optim::{train_step, AdamW, OptimizerState, StepOutcome};
pub use params::{Parameters, Tensor};
