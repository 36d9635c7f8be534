//! Multitask pretraining on a synthetic multilingual corpus: machine
//! translation plus denoising auto-encoding, one batch per task per step,
//! losses added before a single backward pass.

pub mod corpus;
mod eval;
mod noise;
mod trainer;

pub use corpus::{sample_language, temperature_probs, CorpusConfig, SyntheticCorpus, Task, TaskBatch};
pub use eval::{corpus_bleu, evaluate, EvalMetrics};
pub use noise::{infill_mask, noise_dae, DaeNoiseConfig};
pub use trainer::{
    add_drop_positions, multitask_loss, write_metrics_header, write_metrics_row, LossParts, StepMetrics, TrainConfig,
    Trainer, DROP_BUCKETS,
};
