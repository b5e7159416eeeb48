//! Experiment configuration, trial protocol, metrics and the experiment
//! drivers behind the command line.

mod config;
mod experiments;
mod metrics;
mod protocol;

pub use config::{
    CriticSection, DataSection, EvalSection, ExperimentConfig, NoiseSection, ShapeSection, DATA_ENV,
};
pub use experiments::{
    ablate_views, domain_shift, eval_policy, eval_shape_data, grasp_dataset, is_noisy, train_critic_model,
    train_shape_model, training_episodes, training_shape_data, AblationReport, DomainShiftReport, RegimeResult,
    Report, CODE_VERSION,
};
pub use metrics::{wilson_interval, GraspMetrics, PairedShift};
pub use protocol::{eval_grasp_protocol, plan_scenes, Policy, TrialConfig, TrialRecord};
