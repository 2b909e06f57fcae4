pub mod optim;
pub mod trainer;

pub use optim::{clip_gradients, lr_at, AdamW, OptimSettings};
pub use trainer::{
    checkpoint_name, final_checkpoint, is_complete, list_checkpoints, resume, run_all_unfrozen, run_schedule,
    run_stage, EpochRecord, StageSchedule, StageSpec, TrainData, TrainPlan, TrainState, UpdateRecord, FINAL_MARKER,
    LOG_FILE,
};
