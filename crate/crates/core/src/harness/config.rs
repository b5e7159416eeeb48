use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::protocol::TrialConfig;
use crate::cem::CemConfig;
use crate::error::{Error, Result};
use crate::grasp::{CriticConfig, CriticTrainConfig, GraspDataConfig, GripperModel, InputMode};
use crate::scenesim::{CameraConfig, CropConfig, EpisodeConfig, SceneConfig, SensorNoiseModel};
use crate::shapepred::{ShapeDataConfig, ShapeLossWeights, ShapeNetConfig, ShapeTrainConfig, ViewRegime};
use crate::tensor::AdamConfig;

/// Environment variable naming the default artifact directory.
pub const DATA_ENV: &str = "SHAPEGRASP_DATA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Artifact directory; falls back to `$SHAPEGRASP_DATA`, then `data`.
    pub root: Option<PathBuf>,
    pub train_episodes: usize,
    /// Share of training episodes rendered with sensor noise.
    pub noisy_fraction: f64,
    pub eval_episodes: usize,
    pub grasp_episodes: usize,
    pub gt_points: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            train_episodes: 200,
            noisy_fraction: 0.0,
            eval_episodes: 40,
            grasp_episodes: 300,
            gt_points: 2048,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub sigma: f64,
    pub hole_probability: f64,
    pub quantization: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            sigma: 0.005,
            hole_probability: 0.02,
            quantization: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeSection {
    pub regime: ViewRegime,
    pub points: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub bbox_weight: f64,
    pub mask_weight: f64,
    pub reg: f64,
    pub min_visibility: f64,
    pub eval_min_visibility: f64,
}

impl Default for ShapeSection {
    fn default() -> Self {
        let t = ShapeTrainConfig::default();
        let l = ShapeLossWeights::default();
        Self {
            regime: t.regime,
            points: t.model.points,
            steps: t.steps,
            batch_size: t.batch_size,
            steps_per_epoch: t.steps_per_epoch,
            lr: t.adam.lr,
            bbox_weight: l.bbox,
            mask_weight: l.mask,
            reg: l.reg,
            min_visibility: ShapeDataConfig::default().min_visibility,
            eval_min_visibility: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticSection {
    pub points: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub samples_per_object: usize,
    /// Position noise of the data-collection heuristic, meters.
    pub sigma: f64,
}

impl Default for CriticSection {
    fn default() -> Self {
        let t = CriticTrainConfig::default();
        let d = GraspDataConfig::default();
        Self {
            points: t.critic.points,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            samples_per_object: d.samples_per_object,
            sigma: d.sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub trials: usize,
    pub input_mode: InputMode,
    /// Depth noise of the trial views; 0 means clean.
    pub noise_sigma: f64,
    pub hole_probability: f64,
    pub min_pixels: usize,
    pub clearance: f64,
    pub reach: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            trials: 100,
            input_mode: InputMode::FullCloud,
            noise_sigma: 0.0,
            hole_probability: 0.0,
            min_pixels: 20,
            clearance: 0.005,
            reach: 0.25,
        }
    }
}

/// Every knob of every command. Missing keys take their defaults; unknown
/// keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    /// Noise of the noisy training share and of domain-shift trials.
    pub noise: NoiseSection,
    pub crop: CropConfig,
    pub shape: ShapeSection,
    pub critic: CriticSection,
    pub gripper: GripperModel,
    pub cem: CemConfig,
    pub eval: EvalSection,
}

/// Seed offsets of the independent episode pools.
const TRAIN_SEED_BASE: u64 = 1_000;
const GRASP_SEED_BASE: u64 = 2_000_000;
const EVAL_SEED_BASE: u64 = 9_000_000;

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| {
            let field = e.span().map(|sp| s[sp].trim().to_string()).unwrap_or_default();
            Error::config(if field.is_empty() { "config".to_string() } else { field }, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.data.noisy_fraction) {
            return Err(Error::config("data.noisy_fraction", "must lie in [0, 1]"));
        }
        if self.data.train_episodes == 0 || self.data.eval_episodes == 0 || self.data.grasp_episodes == 0 {
            return Err(Error::config("data.train_episodes", "episode counts must be >= 1"));
        }
        if self.eval.trials == 0 {
            return Err(Error::config("eval.trials", "must be >= 1"));
        }
        if !(self.eval.clearance >= 0.0 && self.eval.clearance < self.eval.reach) {
            return Err(Error::config("eval.clearance", "need 0 <= clearance < reach"));
        }
        self.noise_model()?;
        self.trial_noise()?;
        self.episode_config(false).validate()?;
        self.shape_train_config(self.shape.regime).validate()?;
        self.critic_train_config().validate()?;
        self.grasp_data_config(false).validate()?;
        self.cem.validate()?;
        self.gripper.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn data_root(&self) -> PathBuf {
        self.data
            .root
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn noise_model(&self) -> Result<SensorNoiseModel> {
        SensorNoiseModel::new(self.noise.sigma, self.noise.hole_probability, self.noise.quantization)
    }

    /// Noise of the trial views, `None` when clean.
    pub fn trial_noise(&self) -> Result<Option<SensorNoiseModel>> {
        let m = SensorNoiseModel::new(self.eval.noise_sigma, self.eval.hole_probability, 0.0)?;
        Ok((!m.is_zero()).then_some(m))
    }

    pub fn episode_config(&self, noisy: bool) -> EpisodeConfig {
        EpisodeConfig {
            scene: self.scene.clone(),
            camera: self.camera.clone(),
            noise: if noisy { self.noise_model().ok() } else { None },
            gt_points: self.data.gt_points,
        }
    }

    pub fn train_seed_base(&self) -> u64 {
        crate::seeds::derive_seed(self.seed, TRAIN_SEED_BASE)
    }

    pub fn grasp_seed_base(&self) -> u64 {
        crate::seeds::derive_seed(self.seed, GRASP_SEED_BASE)
    }

    pub fn eval_seed_base(&self) -> u64 {
        crate::seeds::derive_seed(self.seed, EVAL_SEED_BASE)
    }

    pub fn shape_data_config(&self, eval: bool) -> ShapeDataConfig {
        ShapeDataConfig {
            crop: self.crop,
            min_visibility: if eval {
                self.shape.eval_min_visibility
            } else {
                self.shape.min_visibility
            },
            ..ShapeDataConfig::default()
        }
    }

    pub fn shape_train_config(&self, regime: ViewRegime) -> ShapeTrainConfig {
        let d = ShapeTrainConfig::default();
        ShapeTrainConfig {
            seed: self.seed,
            regime,
            steps: self.shape.steps,
            batch_size: self.shape.batch_size,
            steps_per_epoch: self.shape.steps_per_epoch,
            adam: AdamConfig {
                lr: self.shape.lr,
                ..AdamConfig::default()
            },
            loss: ShapeLossWeights {
                bbox: self.shape.bbox_weight,
                mask: self.shape.mask_weight,
                reg: self.shape.reg,
                ..ShapeLossWeights::default()
            },
            model: ShapeNetConfig {
                in_height: self.crop.out_height,
                in_width: self.crop.out_width,
                points: self.shape.points,
                ..ShapeNetConfig::default()
            },
            ..d
        }
    }

    pub fn shape_net_config(&self) -> ShapeNetConfig {
        self.shape_train_config(self.shape.regime).model
    }

    pub fn grasp_data_config(&self, oracle_cloud: bool) -> GraspDataConfig {
        GraspDataConfig {
            samples_per_object: self.critic.samples_per_object,
            sigma: self.critic.sigma,
            gripper: self.gripper,
            crop: self.crop,
            ring_views: self.camera.ring_views,
            min_pixels: self.eval.min_pixels,
            oracle_cloud,
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        CriticConfig {
            points: self.critic.points,
            ..CriticConfig::default()
        }
    }

    pub fn critic_train_config(&self) -> CriticTrainConfig {
        CriticTrainConfig {
            seed: self.seed,
            epochs: self.critic.epochs,
            batch_size: self.critic.batch_size,
            adam: AdamConfig {
                lr: self.critic.lr,
                ..AdamConfig::default()
            },
            critic: self.critic_config(),
        }
    }

    pub fn trial_config(&self) -> Result<TrialConfig> {
        Ok(TrialConfig {
            trials: self.eval.trials,
            seed: self.eval_seed_base(),
            episode: self.episode_config(false),
            noise: self.trial_noise()?,
            gripper: self.gripper,
            cem: self.cem.clone(),
            crop: self.crop,
            min_pixels: self.eval.min_pixels,
            clearance: self.eval.clearance,
            reach: self.eval.reach,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn serialized_defaults_parse_back() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_sections_override_single_fields() {
        let c = ExperimentConfig::from_toml_str("seed = 4\n[eval]\ntrials = 7\ninput_mode = \"partial-2.5d\"\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.eval.trials, 7);
        assert_eq!(c.eval.input_mode, InputMode::Partial25D);
        assert_eq!(c.eval.reach, EvalSection::default().reach);
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn violations_name_the_field() {
        let e = ExperimentConfig::from_toml_str("[cem]\nn_elite = 200\n").unwrap_err();
        assert!(matches!(&e, Error::Config { field, .. } if field == "cem.n_elite"), "{e}");
        let e = ExperimentConfig::from_toml_str("[eval]\ntrails = 3\n").unwrap_err();
        assert!(e.to_string().contains("trails"), "{e}");
        assert_eq!(e.category(), "validation");
        assert!(matches!(
            ExperimentConfig::load(Path::new("/nonexistent/cfg.toml")),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn shipped_default_file_matches_the_built_in_defaults() {
        let text = include_str!("../../../../configs/default.toml");
        assert_eq!(ExperimentConfig::from_toml_str(text).unwrap(), ExperimentConfig::default());
    }
}
