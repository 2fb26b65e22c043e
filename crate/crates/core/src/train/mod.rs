//! Byte-level data, AdamW, the training loop, evaluation and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod optim;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::RunConfig;
pub use data::{byte_tokenize, make_batches, synthetic_corpus};
pub use eval::{evaluate_perplexity, EvalResult};
pub use optim::{cosine_lr, AdamW, OptimizerState, StepOutcome};
pub use trainer::{train, MetricsRecord, RunFiles, TrainOutcome};
