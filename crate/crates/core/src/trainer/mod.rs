//! Joint optimization of target and auxiliary losses.

mod checkpoint;
mod config;
mod engine;
mod eval;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{DataConfig, Mode, SslConfig, TrainConfig};
pub use engine::{
    build_joint_batch, build_model, labeled_indices, plan_phases, run_training, stream, AuxBatch, Datasets,
    EvalRecord, IterRecord, JointSampler, Phase, PhaseKind, StepReport, TargetBatch, TrainHistory, TrainOutput,
    TrainState, Trainer,
};
pub use eval::{evaluate, evaluate_refs, predict, stack_images};
pub use optim::{poly_lr, sgd_step, OptimizerState, SgdHyper};
