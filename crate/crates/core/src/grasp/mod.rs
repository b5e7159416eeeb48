//! Top-down parallel-jaw grasps: sampling, the geometric success oracle,
//! the grasp critic and its data pipeline.

mod critic;
mod data;
mod oracle;
mod sample;
mod train;

pub use critic::{
    critic_gradcheck, critic_input, critic_loss, resample_points, tiny_critic_config, BnRunning, CriticConfig,
    CriticModel, InputMode,
};
pub use data::{
    choose_view, gen_grasp_dataset, read_grasp_dataset, view_order, write_grasp_dataset, GraspDataConfig, GraspDataset,
    GraspEpisodeRecord, ObjectClouds, GRASP_SCHEMA, GRASP_VERSION,
};
pub use oracle::{grasp_oracle, grasp_oracle_outcome, GraspWorld, OracleOutcome};
pub use sample::{
    base_to_grasp, centroid, heuristic_sample, shuffle_points, to_grasp_frame, to_grasp_frame_ordered, GraspSample,
    GripperModel,
};
pub use train::{auc, critic_scores, mode_clouds, train_critic, CriticEpochLog, CriticTrainConfig, CriticTrainLog};
