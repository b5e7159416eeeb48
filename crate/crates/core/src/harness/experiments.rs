use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::{GraspMetrics, PairedShift};
use super::protocol::{eval_grasp_protocol, Policy, TrialRecord};
use crate::error::Result;
use crate::grasp::{gen_grasp_dataset, train_critic, CriticModel, CriticTrainLog, GraspDataset, InputMode};
use crate::scenesim::{generate_episodes, Episode};
use crate::shapepred::{eval_shape_iou, train_shape, ShapeDataset, ShapeEval, ShapeNetModel, ShapeTrainLog, ViewRegime};

/// Episodes are generated and digested this many at a time.
const CHUNK: usize = 50;

/// Version string embedded in every report.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Common envelope of every command's JSON report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub config: ExperimentConfig,
    pub metrics: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(command: &str, cfg: &ExperimentConfig, metrics: T) -> Self {
        Self {
            command: command.into(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            code_version: CODE_VERSION.into(),
            config: cfg.clone(),
            metrics,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Whether training episode `i` of `n` is rendered with sensor noise.
pub fn is_noisy(i: usize, n: usize, fraction: f64) -> bool {
    (i as f64) < (n as f64 * fraction).round()
}

/// Training episodes `[start, start + count)` of the configured pool.
pub fn training_episodes(cfg: &ExperimentConfig, start: usize, count: usize) -> Result<Vec<Episode>> {
    let n = cfg.data.train_episodes;
    let mut out = Vec::with_capacity(count);
    let mut i = start;
    while i < start + count {
        let noisy = is_noisy(i, n, cfg.data.noisy_fraction);
        let mut j = i;
        while j < start + count && is_noisy(j, n, cfg.data.noisy_fraction) == noisy {
            j += 1;
        }
        out.extend(generate_episodes(cfg.train_seed_base() + i as u64, j - i, &cfg.episode_config(noisy))?);
        i = j;
    }
    Ok(out)
}

/// Training episodes digested into shape-training records.
pub fn training_shape_data(cfg: &ExperimentConfig) -> Result<ShapeDataset> {
    let dc = cfg.shape_data_config(false);
    let mut data = ShapeDataset::default();
    let n = cfg.data.train_episodes;
    for start in (0..n).step_by(CHUNK) {
        let eps = training_episodes(cfg, start, CHUNK.min(n - start))?;
        data.extend(ShapeDataset::build(&eps, &dc)?);
    }
    Ok(data)
}

/// Held-out episodes with fresh objects, digested for evaluation.
pub fn eval_shape_data(cfg: &ExperimentConfig) -> Result<ShapeDataset> {
    let dc = cfg.shape_data_config(true);
    let mut data = ShapeDataset::default();
    let n = cfg.data.eval_episodes;
    for start in (0..n).step_by(CHUNK) {
        let eps = generate_episodes(cfg.eval_seed_base() + start as u64, CHUNK.min(n - start), &cfg.episode_config(false))?;
        data.extend(ShapeDataset::build(&eps, &dc)?);
    }
    Ok(data)
}

pub fn train_shape_model(
    cfg: &ExperimentConfig,
    data: &ShapeDataset,
    regime: ViewRegime,
) -> Result<(ShapeNetModel, ShapeTrainLog)> {
    train_shape(data, None, &cfg.shape_train_config(regime))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeResult {
    pub regime: ViewRegime,
    pub samples: usize,
    pub final_loss: f64,
    pub eval: ShapeEval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub train_objects: usize,
    pub eval_objects: usize,
    pub eval_pairs: usize,
    pub regimes: Vec<RegimeResult>,
}

impl AblationReport {
    pub fn iou(&self, regime: ViewRegime) -> Option<f64> {
        self.regimes.iter().find(|r| r.regime == regime).map(|r| r.eval.bbox_iou)
    }
}

/// Trains one model per view regime with equal step budgets and scores
/// each on the same held-out objects.
pub fn ablate_views(cfg: &ExperimentConfig, regimes: &[ViewRegime]) -> Result<AblationReport> {
    let train = training_shape_data(cfg)?;
    let eval = eval_shape_data(cfg)?;
    let mut out = Vec::new();
    for &regime in regimes {
        let (model, log) = train_shape_model(cfg, &train, regime)?;
        let e = eval_shape_iou(&model, &eval)?;
        log::info!("regime {regime}: bbox IOU {:.4}", e.bbox_iou);
        out.push(RegimeResult {
            regime,
            samples: log.samples,
            final_loss: log.epochs.last().map_or(f64::NAN, |e| e.loss),
            eval: e,
        });
    }
    Ok(AblationReport {
        train_objects: train.len(),
        eval_objects: eval.len(),
        eval_pairs: out.first().map_or(0, |r| r.eval.pairs),
        regimes: out,
    })
}

/// Heuristic grasp records on the grasp episode pool.
pub fn grasp_dataset(cfg: &ExperimentConfig, shape: Option<&ShapeNetModel>) -> Result<GraspDataset> {
    let gc = cfg.grasp_data_config(shape.is_none());
    let n = cfg.data.grasp_episodes;
    let mut data = GraspDataset::default();
    for start in (0..n).step_by(CHUNK) {
        let eps = generate_episodes(cfg.grasp_seed_base() + start as u64, CHUNK.min(n - start), &cfg.episode_config(false))?;
        let part = gen_grasp_dataset(&eps, shape, &gc, cfg.seed)?;
        let offset = data.clouds.len();
        data.clouds.extend(part.clouds);
        data.records.extend(part.records.into_iter().map(|mut r| {
            r.object += offset;
            r
        }));
    }
    Ok(data)
}

pub fn train_critic_model(cfg: &ExperimentConfig, data: &GraspDataset, mode: InputMode) -> Result<(CriticModel, CriticTrainLog)> {
    train_critic(data, mode, &cfg.critic_train_config())
}

/// Trials of `policy` under the configured trial noise.
pub fn eval_policy(cfg: &ExperimentConfig, policy: Policy<'_>) -> Result<(GraspMetrics, Vec<TrialRecord>)> {
    let records = eval_grasp_protocol(policy, &cfg.trial_config()?)?;
    Ok((GraspMetrics::from_trials(policy.name(), &records), records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShiftReport {
    pub noise_sigma: f64,
    pub hole_probability: f64,
    pub full_cloud: PairedShift,
    pub partial: PairedShift,
    /// Partial-view degradation minus full-cloud degradation.
    pub robustness_gap: f64,
}

/// Both critics on identical scenes and seeds, clean then with the
/// configured sensor noise on the trial views.
pub fn domain_shift(
    cfg: &ExperimentConfig,
    shape: &ShapeNetModel,
    full: &CriticModel,
    partial: &CriticModel,
) -> Result<DomainShiftReport> {
    let mut clean_cfg = cfg.clone();
    clean_cfg.eval.noise_sigma = 0.0;
    clean_cfg.eval.hole_probability = 0.0;
    let mut noisy_cfg = cfg.clone();
    noisy_cfg.eval.noise_sigma = cfg.noise.sigma;
    noisy_cfg.eval.hole_probability = cfg.noise.hole_probability;
    let run = |c: &ExperimentConfig, critic: &CriticModel| {
        eval_grasp_protocol(
            Policy::Critic {
                critic,
                shape: Some(shape),
            },
            &c.trial_config()?,
        )
    };
    let f = PairedShift::new("critic-full-cloud", &run(&clean_cfg, full)?, &run(&noisy_cfg, full)?);
    let p = PairedShift::new("critic-partial-2.5d", &run(&clean_cfg, partial)?, &run(&noisy_cfg, partial)?);
    Ok(DomainShiftReport {
        noise_sigma: cfg.noise.sigma,
        hole_probability: cfg.noise.hole_probability,
        robustness_gap: p.degradation - f.degradation,
        full_cloud: f,
        partial: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noisy_share_is_a_prefix() {
        let flags: Vec<bool> = (0..8).map(|i| is_noisy(i, 8, 0.25)).collect();
        assert_eq!(flags, [true, true, false, false, false, false, false, false]);
        assert!(!(0..8).any(|i| is_noisy(i, 8, 0.0)));
    }

    #[test]
    fn chunked_generation_matches_one_call() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.train_episodes = 4;
        cfg.data.noisy_fraction = 0.5;
        let all = training_episodes(&cfg, 0, 4).unwrap();
        let tail = training_episodes(&cfg, 1, 3).unwrap();
        assert_eq!(&all[1..], &tail[..]);
        assert!(all[0].noise.is_some() && all[1].noise.is_some() && all[2].noise.is_none());
    }
}
