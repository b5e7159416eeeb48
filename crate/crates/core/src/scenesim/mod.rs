//! Procedural table-top scenes, analytic RGBD + instance-mask rendering,
//! self-supervision labels, crops and the on-disk episode format.

mod crop;
mod dataset;
mod episode;
mod labels;
mod primitives;
mod render;
mod scene;

pub use crop::{crop, crop_window, Crop, CropConfig, CropWindow, CROP_CHANNELS};
pub use dataset::{
    read_episodes, write_episodes, BlobRef, DatasetReader, DatasetWriter, BLOB_FILE, EPISODE_SCHEMA, EPISODE_VERSION,
    INDEX_FILE,
};
pub use episode::{generate_episode, generate_episodes, Episode, EpisodeConfig, GroundTruthCloud};
pub use labels::{label_view, make_labels, ObjectLabels, ViewLabel};
pub use primitives::{Axis, Hit, PrimitiveObject, ShapeKind, Solid};
pub use render::{render, render_noisy, CameraConfig, ObjectVisibility, SensorNoiseModel, Snapshot};
pub use scene::{generate_scene, Scene, SceneConfig, Surface};
