//! Optimization, checkpoints, pretraining and fine-tuning.

mod checkpoint;
mod finetune;
mod optim;
mod pretrain;

pub use checkpoint::{checkpoint_name, list_checkpoints, Checkpoint, Payload, MD3C_MAGIC, MD3C_VERSION};
pub use optim::{clip_grad_norm, decays, grad_norm, AdamState, AdamW, LrSchedule};
pub use pretrain::{
    avg_pool2, ema_update, gram_teacher_features, rng_bytes, rng_from_bytes, run_stage, run_stage_from_manifest,
    snapshot_gram_teacher, PretrainConfig, StageRun, TraceRow, TrainState, REFERENCE_BUDGETS, REFERENCE_LRS, TRACE_HEADER,
};
pub use finetune::{
    encoder_from_checkpoint, evaluate, finetune, finetune_from_manifest, init_params, load_model, model_checkpoint,
    pooled_dsc, predict, predict_all, predict_batch, EpochRow, FinetuneConfig, FinetuneRun, REFERENCE_FINETUNE_LR,
};
