//! Training loops for feature alignment, teacher fine-tuning and
//! semi-supervised distillation.

mod adam;
mod cfa;
mod driver;
mod log;
mod schedule;
mod skd;

pub use adam::{collect_params, Adam};
pub use cfa::{cfa_fingerprint, run_cfa, CfaConfig, CfaInputs, CfaOutcome, TeacherFeatures, TeacherSource};
pub use driver::{epoch_seed, fingerprint, Position};
pub use log::{epoch_means, read_log, RunDir, StepRecord, TrainControl, LOG_FILE, STATE_DIR};
pub use schedule::{lr_at, OptimConfig};
pub use skd::{
    evaluate, evaluate_pairs, finetune_teacher, generate_pseudo_labels, run_skd, EvalReport, ScoreSetup,
    SkdConfig, SupervisedConfig, TrainOutcome,
};
