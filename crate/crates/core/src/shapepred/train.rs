use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{regime_samples, ShapeDataset, ShapeSample, ViewRegime};
use super::eval::{eval_shape_iou, ShapeEval};
use super::loss::{shape_loss, ShapeLossWeights};
use super::model::{ShapeNetConfig, ShapeNetModel};
use crate::error::{Error, Result};
use crate::seeds::rng_for;
use crate::tensor::{write_checkpoint, AdamConfig, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeTrainConfig {
    pub seed: u64,
    pub regime: ViewRegime,
    /// Optimizer steps; identical across regimes so they see equal compute.
    pub steps: usize,
    pub batch_size: usize,
    /// Steps per logged epoch.
    pub steps_per_epoch: usize,
    pub adam: AdamConfig,
    pub loss: ShapeLossWeights,
    pub model: ShapeNetConfig,
    /// Where the last finite parameters go if training diverges.
    pub checkpoint_on_divergence: Option<PathBuf>,
}

impl Default for ShapeTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            regime: ViewRegime::Full,
            steps: 1500,
            batch_size: 8,
            steps_per_epoch: 100,
            adam: AdamConfig::default(),
            loss: ShapeLossWeights::default(),
            model: ShapeNetConfig::default(),
            checkpoint_on_divergence: None,
        }
    }
}

impl ShapeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::config("shape_train.batch_size", "must be >= 1"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config("shape_train.lr", "must be > 0"));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeEpochLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub bbox: f64,
    pub mask: f64,
    pub clamp: f64,
    pub reg: f64,
    pub val: Option<ShapeEval>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapeTrainLog {
    pub samples: usize,
    pub epochs: Vec<ShapeEpochLog>,
}

impl ShapeTrainLog {
    /// JSON lines, one epoch per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

struct SampleResult {
    grads: Vec<Vec<f64>>,
    terms: [f64; 4],
    loss: f64,
}

fn sample_grads(model: &ShapeNetModel, data: &ShapeDataset, s: &ShapeSample, w: &ShapeLossWeights) -> Result<SampleResult> {
    let obj = &data.objects[s.object];
    let views = obj.supervision(s.source, &s.targets, w.max_targets)?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let pred = model.forward(&mut tape, &bound, &obj.views[s.source].input)?;
    let l = shape_loss(&mut tape, pred, &views, w, &[])?;
    let loss = tape.value(l.total).item()?;
    let mut g = tape.backward(l.total)?;
    Ok(SampleResult {
        grads: model.params.collect_grads(&bound, &mut g),
        terms: [l.bbox, l.mask, l.clamp, 0.0],
        loss,
    })
}

/// Minimizes the reprojection objective over the regime's samples with Adam.
pub fn train_shape(
    data: &ShapeDataset,
    val: Option<&ShapeDataset>,
    cfg: &ShapeTrainConfig,
) -> Result<(ShapeNetModel, ShapeTrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("shape training set has no usable object views".into()));
    }
    let samples = regime_samples(data, cfg.regime, cfg.seed);
    let mut model = ShapeNetModel::new(cfg.model.clone(), cfg.seed)?;
    let mut last_good = model.params.clone();
    let mut rng = rng_for(cfg.seed, 0x7A1);
    let mut order: Vec<usize> = Vec::new();
    let mut log = ShapeTrainLog {
        samples: samples.len(),
        epochs: Vec::new(),
    };
    let mut acc = [0.0f64; 5];
    let mut acc_n = 0usize;
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let results: Vec<SampleResult> = batch
            .par_iter()
            .map(|&i| sample_grads(&model, data, &samples[i], &cfg.loss))
            .collect::<Result<Vec<_>>>()?;
        let mut sum: Vec<Vec<f64>> = model.params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let mut batch_loss = 0.0;
        for r in &results {
            for (s, g) in sum.iter_mut().zip(&r.grads) {
                s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            batch_loss += r.loss;
            for k in 0..3 {
                acc[k + 1] += r.terms[k];
            }
        }
        let n = cfg.batch_size as f64;
        // the regularizer is added once per step in closed form
        let reg = model.params.sum_squares();
        for (s, (_, t)) in sum.iter_mut().zip(model.params.iter()) {
            s.iter_mut()
                .zip(t.data())
                .for_each(|(g, x)| *g += n * 2.0 * cfg.loss.reg * x);
        }
        let total = batch_loss / n + cfg.loss.reg * reg;
        if !total.is_finite() || sum.iter().flatten().any(|g| !g.is_finite()) {
            if let Some(path) = &cfg.checkpoint_on_divergence {
                write_checkpoint(&last_good, BufWriter::new(File::create(path)?))?;
            }
            return Err(Error::Divergence { step, loss: total });
        }
        acc[0] += total;
        acc[4] += reg;
        acc_n += 1;
        model.params.set_grads(sum, 1.0 / n)?;
        model.params.adam_step(&cfg.adam)?;
        if !model.params.is_finite() {
            if let Some(path) = &cfg.checkpoint_on_divergence {
                write_checkpoint(&last_good, BufWriter::new(File::create(path)?))?;
            }
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        if (step + 1) % cfg.steps_per_epoch == 0 || step + 1 == cfg.steps {
            last_good = model.params.clone();
            let m = acc_n as f64;
            let per_sample = m * n;
            log.epochs.push(ShapeEpochLog {
                epoch: log.epochs.len(),
                step: step + 1,
                loss: acc[0] / m,
                bbox: acc[1] / per_sample,
                mask: acc[2] / per_sample,
                clamp: acc[3] / per_sample,
                reg: acc[4] / m,
                val: val.map(|v| eval_shape_iou(&model, v)).transpose()?,
            });
            log::debug!("shape epoch {} loss {:.4}", log.epochs.len() - 1, acc[0] / m);
            acc = [0.0; 5];
            acc_n = 0;
        }
    }
    Ok((model, log))
}
