use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::critic::{critic_input, CriticConfig, CriticModel, InputMode};
use super::data::GraspDataset;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::seeds::{derive_seed, rng_for};
use crate::tensor::{AdamConfig, BatchNormMode, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticTrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub critic: CriticConfig,
}

impl Default for CriticTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig::default(),
            critic: CriticConfig::default(),
        }
    }
}

impl CriticTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("critic_train.batch_size", "batch norm needs >= 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("critic_train.epochs", "must be >= 1"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config("critic_train.lr", "must be > 0"));
        }
        self.critic.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticEpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Training accuracy at threshold 0.5, training-mode batch norm.
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticTrainLog {
    pub records: usize,
    pub positive_rate: f64,
    pub epochs: Vec<CriticEpochLog>,
}

/// Base-frame cloud of every object as the given mode sees it.
pub fn mode_clouds(data: &GraspDataset, mode: InputMode) -> Vec<Vec<Vec3>> {
    data.clouds
        .iter()
        .map(|c| match mode {
            InputMode::FullCloud => c.full_base(),
            InputMode::Partial25D => c.partial_base(),
        })
        .collect()
}

/// Minimizes binary cross-entropy over the records with Adam.
pub fn train_critic(data: &GraspDataset, mode: InputMode, cfg: &CriticTrainConfig) -> Result<(CriticModel, CriticTrainLog)> {
    cfg.validate()?;
    let positives = data.records.iter().filter(|r| r.success).count();
    if positives == 0 || positives == data.len() {
        return Err(Error::Data(format!(
            "critic training needs both classes, found {positives} successes in {} records",
            data.len()
        )));
    }
    let clouds = mode_clouds(data, mode);
    let mut model = CriticModel::new(cfg.critic.clone(), mode, cfg.seed)?;
    let mut rng = rng_for(cfg.seed, 0xC71);
    let mut log = CriticTrainLog {
        records: data.len(),
        positive_rate: positives as f64 / data.len() as f64,
        epochs: Vec::new(),
    };
    let steps = data.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = Vec::new();
    let mut draw = 0u64;
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for _ in 0..steps {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size {
                if order.is_empty() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut rng);
                }
                batch.push(order.pop().expect("refilled above"));
            }
            let mut inputs = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in &batch {
                let r = &data.records[i];
                draw += 1;
                let mut prng = rng_for(derive_seed(cfg.seed, draw), 0x5F);
                inputs.push(critic_input(&clouds[r.object], &r.sample, cfg.critic.points, &mut prng)?);
                labels.push(if r.success { 1.0 } else { 0.0 });
            }
            let (grads, stats, loss, probs) = {
                let mut tape = Tape::new();
                let bound = model.params.bind(&mut tape);
                let (p, stats) = model.forward(&mut tape, &bound, &inputs, BatchNormMode::Train)?;
                let probs = tape.value(p).data().to_vec();
                let l = tape.bce(p, &labels)?;
                let loss = tape.value(l).item()?;
                let mut g = tape.backward(l)?;
                (model.params.collect_grads(&bound, &mut g), stats, loss, probs)
            };
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: epoch * steps,
                    loss,
                });
            }
            model.params.set_grads(grads, 1.0)?;
            model.params.adam_step(&cfg.adam)?;
            model.update_running(&stats)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            correct += probs.iter().zip(&labels).filter(|(p, y)| (**p >= 0.5) == (**y > 0.5)).count();
        }
        log.epochs.push(CriticEpochLog {
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
        });
        log::debug!("critic epoch {epoch} loss {:.4}", loss_sum / seen as f64);
    }
    Ok((model, log))
}

/// Inference-mode scores of every record, in record order.
pub fn critic_scores(model: &CriticModel, data: &GraspDataset, seed: u64) -> Result<Vec<f64>> {
    let clouds = mode_clouds(data, model.mode);
    let mut out = Vec::with_capacity(data.len());
    for (chunk_idx, chunk) in data.records.chunks(64).enumerate() {
        let inputs = chunk
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut rng = rng_for(derive_seed(seed, chunk_idx as u64), i as u64);
                critic_input(&clouds[r.object], &r.sample, model.config.points, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        out.extend(model.predict(&inputs)?);
    }
    Ok(out)
}

/// Area under the ROC curve, ties counted half.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut rank_sum, mut i) = (0.0, 0);
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|l| **l).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return 0.5;
    }
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grasp::data::{gen_grasp_dataset, GraspDataConfig};
    use crate::scenesim::{generate_episodes, EpisodeConfig};

    #[test]
    fn auc_hand_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), 0.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]), 0.5);
        // one inversion out of four pairs
        assert_eq!(auc(&[0.1, 0.6, 0.5, 0.9], &[false, false, true, true]), 0.75);
    }

    fn small_data() -> GraspDataset {
        let eps = generate_episodes(70, 6, &EpisodeConfig::default()).unwrap();
        let cfg = GraspDataConfig {
            oracle_cloud: true,
            samples_per_object: 5,
            ..GraspDataConfig::default()
        };
        gen_grasp_dataset(&eps, None, &cfg, 2).unwrap()
    }

    fn small_cfg() -> CriticTrainConfig {
        CriticTrainConfig {
            epochs: 40,
            batch_size: 20,
            critic: CriticConfig {
                points: 64,
                ..CriticConfig::default()
            },
            ..CriticTrainConfig::default()
        }
    }

    #[test]
    fn overfits_a_hundred_records() {
        let mut data = small_data();
        data.records.truncate(100);
        assert!(data.records.iter().any(|r| r.success));
        let (model, log) = train_critic(&data, InputMode::FullCloud, &small_cfg()).unwrap();
        let scores = critic_scores(&model, &data, 0).unwrap();
        let acc = scores
            .iter()
            .zip(&data.records)
            .filter(|(s, r)| (**s >= 0.5) == r.success)
            .count() as f64
            / data.len() as f64;
        assert!(acc >= 0.95, "accuracy {acc}, log {:?}", log.epochs.last());
    }

    #[test]
    fn modes_give_different_models_and_one_class_is_rejected() {
        let mut data = small_data();
        data.records.truncate(60);
        let cfg = CriticTrainConfig {
            epochs: 1,
            ..small_cfg()
        };
        let (a, _) = train_critic(&data, InputMode::FullCloud, &cfg).unwrap();
        let (b, _) = train_critic(&data, InputMode::Partial25D, &cfg).unwrap();
        assert!(a.params.distance(&b.params).unwrap() > 0.0);
        let (a2, _) = train_critic(&data, InputMode::FullCloud, &cfg).unwrap();
        assert_eq!(a, a2);
        data.records.iter_mut().for_each(|r| r.success = false);
        assert!(matches!(train_critic(&data, InputMode::FullCloud, &cfg), Err(Error::Data(_))));
    }
}
