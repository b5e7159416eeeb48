use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sample::{base_to_grasp, shuffle_points, GraspSample};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::seeds::rng_for;
use crate::tensor::gradcheck::{check, GradCheckReport, FD_EPS};
use crate::tensor::{BatchNormMode, BatchStats, BoundParams, ParamSet, Tape, Tensor, Var};

/// What the critic sees of the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputMode {
    /// Predicted full object cloud.
    #[serde(rename = "full-cloud")]
    FullCloud,
    /// Single-view masked depth backprojection.
    #[serde(rename = "partial-2.5d")]
    Partial25D,
}

impl InputMode {
    pub const ALL: [InputMode; 2] = [InputMode::FullCloud, InputMode::Partial25D];

    pub fn name(self) -> &'static str {
        match self {
            InputMode::FullCloud => "full-cloud",
            InputMode::Partial25D => "partial-2.5d",
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-cloud" | "full" => Ok(InputMode::FullCloud),
            "partial-2.5d" | "partial" | "2.5d" => Ok(InputMode::Partial25D),
            other => Err(Error::config("input_mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    /// Points per input cloud `K`.
    pub points: usize,
    /// Grasp-frame coordinates are multiplied by this before the network.
    pub point_scale: f64,
    pub point_widths: [usize; 2],
    pub head_widths: [usize; 4],
    /// Weight of the old value in the running batch-norm averages.
    pub bn_momentum: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            points: 128,
            point_scale: 10.0,
            point_widths: [64, 128],
            head_widths: [128, 64, 32, 16],
            bn_momentum: 0.9,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 {
            return Err(Error::config("critic.points", "must be >= 1"));
        }
        if self.point_widths.contains(&0) || self.head_widths.contains(&0) {
            return Err(Error::config("critic.widths", "layer widths must be >= 1"));
        }
        if !(self.point_scale > 0.0 && self.point_scale.is_finite()) {
            return Err(Error::config("critic.point_scale", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::config("critic.bn_momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Running batch-norm statistics of one head layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Shared per-point layers, max-pool, four FC + batch-norm + ReLU layers,
/// then a linear unit and a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticModel {
    pub config: CriticConfig,
    pub mode: InputMode,
    pub params: ParamSet,
    pub running: Vec<BnRunning>,
}

fn he(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / rows as f64).sqrt()).expect("positive std");
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| normal.sample(rng)).collect()).expect("matching length")
}

/// Cyclic padding or evenly spaced subsampling to exactly `k` points.
pub fn resample_points(points: &[Vec3], k: usize) -> Result<Vec<Vec3>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("critic cloud"));
    }
    let n = points.len();
    Ok(if n >= k {
        (0..k).map(|i| points[i * n / k]).collect()
    } else {
        (0..k).map(|i| points[i % n]).collect()
    })
}

/// Critic input for grasp `s`: the base-frame cloud resampled to `k`
/// points, moved into the grasp frame and shuffled.
pub fn critic_input(base_points: &[Vec3], s: &GraspSample, k: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    let mut pts = base_to_grasp(&resample_points(base_points, k)?, s);
    shuffle_points(&mut pts, rng);
    Ok(pts)
}

impl CriticModel {
    pub fn new(config: CriticConfig, mode: InputMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, 0xC417);
        let mut p = ParamSet::new();
        let mut fan = 3;
        for (i, &w) in config.point_widths.iter().enumerate() {
            p.insert(format!("point.fc{}.w", i + 1), he(&mut rng, fan, w))?;
            p.insert(format!("point.fc{}.b", i + 1), Tensor::zeros(&[w]))?;
            fan = w;
        }
        let mut running = Vec::new();
        for (i, &w) in config.head_widths.iter().enumerate() {
            // no bias: batch norm's beta takes its place
            p.insert(format!("head.fc{}.w", i + 1), he(&mut rng, fan, w))?;
            p.insert(format!("head.bn{}.gamma", i + 1), Tensor::full(&[w], 1.0))?;
            p.insert(format!("head.bn{}.beta", i + 1), Tensor::zeros(&[w]))?;
            running.push(BnRunning {
                mean: vec![0.0; w],
                var: vec![1.0; w],
            });
            fan = w;
        }
        p.insert("head.out.w", he(&mut rng, fan, 1).reshaped(vec![fan, 1])?)?;
        p.insert("head.out.b", Tensor::zeros(&[1]))?;
        Ok(Self {
            config,
            mode,
            params: p,
            running,
        })
    }

    /// Success probabilities `[B, 1]` for a batch of grasp-frame clouds of
    /// `K` points each. `Train` mode also returns the batch statistics of
    /// every batch-norm layer.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundParams,
        clouds: &[Vec<Vec3>],
        bn: BatchNormMode,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let k = self.config.points;
        if clouds.is_empty() {
            return Err(Error::EmptyInput("critic batch"));
        }
        let mut data = Vec::with_capacity(clouds.len() * k * 3);
        for c in clouds {
            if c.is_empty() {
                return Err(Error::EmptyInput("critic cloud"));
            }
            if c.len() != k {
                return Err(Error::Shape {
                    op: "critic input",
                    left: vec![c.len(), 3],
                    right: vec![k, 3],
                });
            }
            for p in c {
                data.extend([p.x, p.y, p.z].map(|v| v * self.config.point_scale));
            }
        }
        let b = clouds.len();
        let mut x = tape.constant(Tensor::new(vec![b * k, 3], data)?);
        for i in 1..=self.config.point_widths.len() {
            x = tape.dense(x, bound.get(&format!("point.fc{i}.w"))?, bound.get(&format!("point.fc{i}.b"))?)?;
            x = tape.relu(x);
        }
        let f = self.config.point_widths[1];
        x = tape.reshape(x, &[b, k, f])?;
        x = tape.maxpool_points(x)?;
        let zero_bias: Vec<Var> = self
            .config
            .head_widths
            .iter()
            .map(|&w| tape.constant(Tensor::zeros(&[w])))
            .collect();
        let mut stats = Vec::new();
        for (i, run) in self.running.iter().enumerate() {
            let n = i + 1;
            x = tape.dense(x, bound.get(&format!("head.fc{n}.w"))?, zero_bias[i])?;
            let (y, s) = tape.batchnorm(
                x,
                bound.get(&format!("head.bn{n}.gamma"))?,
                bound.get(&format!("head.bn{n}.beta"))?,
                bn,
                Some((&run.mean, &run.var)),
            )?;
            stats.extend(s);
            x = tape.relu(y);
        }
        x = tape.dense(x, bound.get("head.out.w")?, bound.get("head.out.b")?)?;
        Ok((tape.sigmoid(x), stats))
    }

    /// Inference-mode probabilities, one per cloud.
    pub fn predict(&self, clouds: &[Vec<Vec3>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (p, _) = self.forward(&mut tape, &bound, clouds, BatchNormMode::Infer)?;
        Ok(tape.value(p).data().to_vec())
    }

    /// Folds training batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(Error::Shape {
                op: "critic running stats",
                left: vec![stats.len()],
                right: vec![self.running.len()],
            });
        }
        let m = self.config.bn_momentum;
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.mean.iter_mut().zip(&s.mean).for_each(|(a, b)| *a = m * *a + (1.0 - m) * b);
            r.var.iter_mut().zip(&s.var).for_each(|(a, b)| *a = m * *a + (1.0 - m) * b);
        }
        Ok(())
    }

    /// Running statistics flattened into named tensors, for checkpoints.
    pub fn running_tensors(&self) -> Vec<(String, Tensor)> {
        self.running
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                [
                    (format!("running.bn{}.mean", i + 1), Tensor::vector(r.mean.clone())),
                    (format!("running.bn{}.var", i + 1), Tensor::vector(r.var.clone())),
                ]
            })
            .collect()
    }

    /// Splits a checkpoint written with [`CriticModel::to_checkpoint_params`].
    pub fn from_checkpoint_params(config: CriticConfig, mode: InputMode, all: ParamSet) -> Result<Self> {
        let template = Self::new(config.clone(), mode, 0)?;
        let mut params = ParamSet::new();
        for name in template.params.names() {
            let t = all.get(name)?;
            if t.shape() != template.params.get(name)?.shape() {
                return Err(Error::Shape {
                    op: "critic checkpoint",
                    left: t.shape().to_vec(),
                    right: template.params.get(name)?.shape().to_vec(),
                });
            }
            params.insert(name, t.clone())?;
        }
        let mut running = template.running;
        for (i, r) in running.iter_mut().enumerate() {
            r.mean = all.get(&format!("running.bn{}.mean", i + 1))?.data().to_vec();
            r.var = all.get(&format!("running.bn{}.var", i + 1))?.data().to_vec();
        }
        Ok(Self {
            config,
            mode,
            params,
            running,
        })
    }

    /// Parameters plus running statistics as one set.
    pub fn to_checkpoint_params(&self) -> Result<ParamSet> {
        ParamSet::from_tensors(
            self.params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .chain(self.running_tensors()),
        )
    }
}

/// Binary cross-entropy of the critic on a batch, training-mode batch norm.
pub fn critic_loss(
    model: &CriticModel,
    tape: &mut Tape<'_>,
    bound: &BoundParams,
    clouds: &[Vec<Vec3>],
    labels: &[f64],
) -> Result<(Var, Vec<BatchStats>)> {
    let (p, stats) = model.forward(tape, bound, clouds, BatchNormMode::Train)?;
    Ok((tape.bce(p, labels)?, stats))
}

/// Small critic used by the gradient check.
pub fn tiny_critic_config() -> CriticConfig {
    CriticConfig {
        points: 6,
        point_scale: 10.0,
        point_widths: [4, 5],
        head_widths: [5, 4, 3, 3],
        bn_momentum: 0.9,
    }
}

/// Gradient of the batch cross-entropy with respect to every critic
/// parameter, against central differences.
pub fn critic_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 0xC6C);
    let mut model = CriticModel::new(tiny_critic_config(), InputMode::FullCloud, seed)?;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in &names {
        let t = model.params.get_mut(name)?;
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let clouds: Vec<Vec<Vec3>> = (0..5)
        .map(|_| {
            (0..model.config.points)
                .map(|_| Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)))
                .collect()
        })
        .collect();
    let labels = [1.0, 0.0, 1.0, 1.0, 0.0];
    let tensors: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let model = &model;
    check(&tensors, FD_EPS, |tape, vars: &[Var]| {
        let bound = BoundParams::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        Ok(critic_loss(model, tape, &bound, &clouds, &labels)?.0)
    })
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small() -> CriticConfig {
        CriticConfig {
            points: 32,
            ..CriticConfig::default()
        }
    }

    fn random_cloud(rng: &mut impl Rng, k: usize) -> Vec<Vec3> {
        (0..k)
            .map(|_| Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.02..0.08)))
            .collect()
    }

    fn with_stats(mut m: CriticModel, rng: &mut impl Rng) -> CriticModel {
        let clouds: Vec<Vec<Vec3>> = (0..16).map(|_| random_cloud(rng, m.config.points)).collect();
        let stats = {
            let mut tape = Tape::new();
            let bound = m.params.bind(&mut tape);
            m.forward(&mut tape, &bound, &clouds, BatchNormMode::Train).unwrap().1
        };
        m.update_running(&stats).unwrap();
        m
    }

    #[test]
    fn output_is_a_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = with_stats(CriticModel::new(small(), InputMode::FullCloud, 3).unwrap(), &mut rng);
        let clouds: Vec<Vec<Vec3>> = (0..20).map(|_| random_cloud(&mut rng, 32)).collect();
        for p in m.predict(&clouds).unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn point_order_does_not_change_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = with_stats(CriticModel::new(small(), InputMode::FullCloud, 4).unwrap(), &mut rng);
        for _ in 0..10 {
            let c = random_cloud(&mut rng, 32);
            let base = m.predict(std::slice::from_ref(&c)).unwrap()[0];
            for _ in 0..5 {
                let mut q = c.clone();
                q.shuffle(&mut rng);
                assert_eq!(m.predict(&[q]).unwrap()[0].to_bits(), base.to_bits());
            }
        }
    }

    #[test]
    fn wrong_sizes_are_rejected() {
        let m = CriticModel::new(small(), InputMode::FullCloud, 0).unwrap();
        assert!(matches!(m.predict(&[vec![]]), Err(Error::EmptyInput(_))));
        assert!(matches!(m.predict(&[vec![Vec3::zeros(); 5]]), Err(Error::Shape { .. })));
        assert!(matches!(resample_points(&[], 4), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn resampling_pads_and_thins() {
        let pts: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let up = resample_points(&pts, 12).unwrap();
        assert_eq!(up.iter().map(|p| p.x as usize).collect::<Vec<_>>(), [0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1]);
        let down = resample_points(&pts, 2).unwrap();
        assert_eq!(down.iter().map(|p| p.x as usize).collect::<Vec<_>>(), [0, 2]);
    }

    #[test]
    fn checkpoint_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = with_stats(CriticModel::new(small(), InputMode::Partial25D, 5).unwrap(), &mut rng);
        let all = m.to_checkpoint_params().unwrap();
        let back = CriticModel::from_checkpoint_params(small(), InputMode::Partial25D, all).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        for seed in 0..20 {
            let r = critic_gradcheck(seed).unwrap();
            assert!(r.passes(crate::tensor::gradcheck::FD_TOL), "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn mode_names_parse() {
        for m in InputMode::ALL {
            assert_eq!(m.name().parse::<InputMode>().unwrap(), m);
        }
        assert!("depth".parse::<InputMode>().is_err());
    }
}
