//! Run configuration, checkpoint and metrics formats, and the training,
//! evaluation, gradient-check and summary drivers behind the CLI.

mod checkpoint;
mod config;
mod gradcheck;
mod metrics;
mod summary;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, peek_header, save_checkpoint,
    CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{ArchPreset, RunConfig, SyntheticConfig};
pub use gradcheck::{
    gradcheck, gradcheck_fixture, GradcheckReport, TensorCheck, GRADCHECK_FLOOR, GRADCHECK_STEP,
    GRADCHECK_TOLERANCE,
};
pub use metrics::{
    label_rank, read_metrics, topk_hits, write_metrics, MetricsRow, MetricsWriter, METRICS_HEADER,
};
pub use summary::{summarize, Summary, VariantSummary, REFERENCE_SCALE};
pub use train::{
    derive_seed, evaluate, initialized_model, load_split, run_eval, run_train, train_model,
    EvalResult, RunArtifacts, TrainOutcome, CHECKPOINT_FILE, CONFIG_FILE, LSUV_FILE, METRICS_FILE,
};
