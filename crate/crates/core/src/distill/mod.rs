//! Online distillation: masking, losses, schedules, the EMA teacher and the
//! pre-training loop.

pub mod ema;
pub mod loss;
pub mod mask;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use ema::ema_update;
pub use loss::{
    loss_frame, loss_utterance, total_loss, utterance_pool, FrameLoss, LossBreakdown, LossWeights,
    UttVariant,
};
pub use mask::{sample_mask, MaskSpec};
pub use schedule::{lr_at_step, tau_at_step, EmaSchedule};
pub use trainer::{pretrain, PretrainOptions, PretrainOutcome, StepRecord, TrainConfig, Trainer};
