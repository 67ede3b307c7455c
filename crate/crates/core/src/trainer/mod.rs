//! Task heads, losses, optimization, evaluation and checkpoints.

mod checkpoint;
mod gradcheck;
mod metrics;
mod model;
mod optim;
mod train;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CheckpointHeader, LoadedModel, ParamMeta,
    ENTITY_VOCAB_FILE, MAGIC, VERSION,
};
pub use gradcheck::{check_gradients, grad_check, GradCheckConfig, GradCheckReport, GroupReport};
pub use metrics::{
    bio_chunks, exact_match, gold_prediction, normalize_tokens, score_predictions, token_f1, EvalReport, Metrics,
    Prediction, Subset,
};
pub use model::{
    context_representations, decode_span, span_loss, tag_loss, Forward, KalaModel, MemoryInit, ModelConfig, Streams,
    Variant, Vocabularies,
};
pub use optim::{clip_grad_norm, is_knowledge_param, linear_schedule, param_group, AdamW};
pub use train::{
    evaluate, predict, predict_all, total_loss, train, EpochRecord, TrainConfig, TrainOutcome, CHECKPOINT_FILE,
    METRICS_FILE,
};
