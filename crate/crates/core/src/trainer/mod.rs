//! Two-stage orchestration: joint pretraining of experts and prompts, then
//! prompt-only adaptation with frozen experts, plus the checkpoint container
//! that hands state from one stage to the next.

mod checkpoint;
mod config;
mod run;
mod state;
mod task;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use config::{default_prompt_dim, ModelConfig, ModelSpec, RouterConfig, TaskConfig, TaskKind, TrainConfig};
pub use run::{finetune, pretrain, select_best, FinetuneOutcome};
pub use state::{align_collection, MetricRecord, ModelState, PreparedDataset, Provenance, RunLog};
pub use task::{EvalSplit, TaskSetup};
