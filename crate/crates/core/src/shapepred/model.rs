use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Frame, PointCloud, Vec3};
use crate::scenesim::{Crop, CROP_CHANNELS};
use crate::seeds::rng_for;
use crate::tensor::{BoundParams, ParamSet, Tape, Tensor, Var};

/// Number of conditioning features derived from the adapted intrinsics.
pub const COND_FEATURES: usize = 9;

/// Depth normalization scale for the depth channel, meters.
const DEPTH_SCALE: f64 = 0.05;
const DEPTH_CLIP: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeNetConfig {
    pub in_height: usize,
    pub in_width: usize,
    pub channels: [usize; 3],
    pub latent: usize,
    pub cond_hidden: usize,
    pub hidden: usize,
    /// Number of predicted points `K`.
    pub points: usize,
    /// Depth of the initial lattice center, meters.
    pub seed_depth: f64,
    pub seed_spacing: f64,
    /// Raw decoder outputs are multiplied by this to give meters.
    pub output_scale: f64,
}

impl Default for ShapeNetConfig {
    fn default() -> Self {
        Self {
            in_height: 48,
            in_width: 64,
            channels: [8, 16, 32],
            latent: 128,
            cond_hidden: 32,
            hidden: 256,
            points: 256,
            seed_depth: 0.6,
            seed_spacing: 0.01,
            output_scale: 0.1,
        }
    }
}

impl ShapeNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 {
            return Err(Error::config("shape.points", "must be >= 1"));
        }
        if self.in_height % 8 != 0 || self.in_width % 8 != 0 || self.in_height == 0 || self.in_width == 0 {
            return Err(Error::config("shape.in_height", "crop size must be a non-zero multiple of 8"));
        }
        if self.channels.contains(&0) || self.latent == 0 || self.cond_hidden == 0 || self.hidden == 0 {
            return Err(Error::config("shape.channels", "layer widths must be >= 1"));
        }
        if !(self.output_scale > 0.0) || !(self.seed_depth > 0.0) || !(self.seed_spacing > 0.0) {
            return Err(Error::config("shape.output_scale", "must be > 0"));
        }
        Ok(())
    }

    fn flat_features(&self) -> usize {
        self.channels[2] * (self.in_height / 8) * (self.in_width / 8)
    }

    /// The initial cloud: a lattice centered `seed_depth` in front of the
    /// camera, in camera coordinates.
    pub fn seed_grid(&self) -> Vec<[f64; 3]> {
        let n = (self.points as f64).cbrt().ceil() as usize;
        let nz = self.points.div_ceil(n * n).max(1);
        let mut pts = Vec::with_capacity(self.points);
        'outer: for k in 0..nz {
            for i in 0..n {
                for j in 0..n {
                    if pts.len() == self.points {
                        break 'outer;
                    }
                    pts.push([j as f64, i as f64, k as f64]);
                }
            }
        }
        let mut mean = [0.0; 3];
        for p in &pts {
            for c in 0..3 {
                mean[c] += p[c] / pts.len() as f64;
            }
        }
        pts.iter()
            .map(|p| {
                [
                    (p[0] - mean[0]) * self.seed_spacing,
                    (p[1] - mean[1]) * self.seed_spacing,
                    (p[2] - mean[2]) * self.seed_spacing + self.seed_depth,
                ]
            })
            .collect()
    }
}

/// Network input built from one crop: the normalized 5-channel image and
/// the conditioning vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeInput {
    pub height: usize,
    pub width: usize,
    /// Channel-major `5 x height x width`.
    pub image: Vec<f32>,
    pub cond: [f64; COND_FEATURES],
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[v.len() / 2])
}

impl ShapeInput {
    /// Colors are centered, depth is expressed relative to the median depth
    /// under the mask, and the conditioning vector describes the viewing ray
    /// and metric size of the crop window.
    pub fn from_crop(crop: &Crop) -> Result<Self> {
        let n = crop.height * crop.width;
        if crop.data.len() != CROP_CHANNELS * n {
            return Err(Error::Shape {
                op: "shape input",
                left: vec![crop.data.len()],
                right: vec![CROP_CHANNELS, crop.height, crop.width],
            });
        }
        let depth = crop.channel(3);
        let mask = crop.channel(4);
        let d_ref = median(
            depth
                .iter()
                .zip(mask)
                .filter(|(d, m)| **d > 0.0 && **m > 0.5)
                .map(|(d, _)| *d as f64)
                .collect(),
        )
        .or_else(|| median(depth.iter().filter(|d| **d > 0.0).map(|d| *d as f64).collect()))
        .unwrap_or(0.6);
        let mut image = Vec::with_capacity(CROP_CHANNELS * n);
        for c in 0..3 {
            image.extend(crop.channel(c).iter().map(|v| v - 0.5));
        }
        image.extend(depth.iter().map(|&d| {
            if d > 0.0 {
                ((d as f64 - d_ref) / DEPTH_SCALE).clamp(-DEPTH_CLIP, DEPTH_CLIP) as f32
            } else {
                0.0
            }
        }));
        image.extend_from_slice(mask);
        let k = &crop.intrinsics;
        let (w, h) = (crop.width as f64, crop.height as f64);
        let rx = (0.5 * (w - 1.0) - k.cx) / k.fx;
        let ry = (0.5 * (h - 1.0) - k.cy) / k.fy;
        let ax = w / k.fx;
        let ay = h / k.fy;
        let cond = [
            4.0 * rx,
            4.0 * ry,
            5.0 * ax,
            5.0 * ay,
            5.0 * (d_ref - 0.7),
            5.0 * rx * d_ref,
            5.0 * ry * d_ref,
            5.0 * ax * d_ref,
            5.0 * ay * d_ref,
        ];
        Ok(Self {
            height: crop.height,
            width: crop.width,
            image,
            cond,
        })
    }
}

/// Encoder, intrinsics conditioning and decoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeNetModel {
    pub config: ShapeNetConfig,
    pub params: ParamSet,
}

fn he(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("matching length")
}

impl ShapeNetModel {
    /// Random encoder weights; the output layer has zero weights and the
    /// seed lattice as bias.
    pub fn new(config: ShapeNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, 0x5A9E);
        let mut p = ParamSet::new();
        let mut in_ch = CROP_CHANNELS;
        for (i, &c) in config.channels.iter().enumerate() {
            p.insert(format!("enc.conv{}.k", i + 1), he(&mut rng, &[c, in_ch, 3, 3], in_ch * 9))?;
            p.insert(format!("enc.conv{}.b", i + 1), Tensor::zeros(&[c]))?;
            in_ch = c;
        }
        let flat = config.flat_features();
        p.insert("enc.fc.w", he(&mut rng, &[flat, config.latent], flat))?;
        p.insert("enc.fc.b", Tensor::zeros(&[config.latent]))?;
        p.insert("cond.fc.w", he(&mut rng, &[COND_FEATURES, config.cond_hidden], COND_FEATURES))?;
        p.insert("cond.fc.b", Tensor::zeros(&[config.cond_hidden]))?;
        let dec_in = config.latent + config.cond_hidden + COND_FEATURES;
        p.insert("dec.fc1.w", he(&mut rng, &[dec_in, config.hidden], dec_in))?;
        p.insert("dec.fc1.b", Tensor::zeros(&[config.hidden]))?;
        p.insert("dec.out.w", Tensor::zeros(&[config.hidden, 3 * config.points]))?;
        let bias: Vec<f64> = config
            .seed_grid()
            .iter()
            .flatten()
            .map(|v| v / config.output_scale)
            .collect();
        p.insert("dec.out.b", Tensor::vector(bias))?;
        Ok(Self { config, params: p })
    }

    /// Wraps loaded parameters, checking their layout against `config`.
    pub fn from_params(config: ShapeNetConfig, params: ParamSet) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        let same = reference.params.len() == params.len()
            && reference
                .params
                .iter()
                .zip(params.iter())
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape());
        if !same {
            return Err(Error::config("shape.checkpoint", "parameter layout does not match the model config"));
        }
        if !params.is_finite() {
            return Err(Error::config("shape.checkpoint", "non-finite parameter"));
        }
        Ok(Self { config, params })
    }

    pub fn check_input(&self, input: &ShapeInput) -> Result<()> {
        if input.height != self.config.in_height || input.width != self.config.in_width {
            return Err(Error::Shape {
                op: "shape input size",
                left: vec![input.height, input.width],
                right: vec![self.config.in_height, self.config.in_width],
            });
        }
        Ok(())
    }

    /// Predicted cloud `[K, 3]` in meters, source camera frame.
    pub fn forward<'p>(&self, tape: &mut Tape<'p>, bound: &BoundParams, input: &ShapeInput) -> Result<Var> {
        self.check_input(input)?;
        let c = &self.config;
        let img = Tensor::new(
            vec![1, CROP_CHANNELS, c.in_height, c.in_width],
            input.image.iter().map(|&v| v as f64).collect(),
        )?;
        let mut h = tape.constant(img);
        for i in 1..=3 {
            let k = bound.get(&format!("enc.conv{i}.k"))?;
            let b = bound.get(&format!("enc.conv{i}.b"))?;
            let y = tape.conv2d(h, k, b, 2, 1)?;
            h = tape.relu(y);
        }
        let flat = tape.reshape(h, &[1, c.flat_features()])?;
        let e = tape.dense(flat, bound.get("enc.fc.w")?, bound.get("enc.fc.b")?)?;
        let e = tape.relu(e);
        let cond = tape.constant(Tensor::new(vec![1, COND_FEATURES], input.cond.to_vec())?);
        let g = tape.dense(cond, bound.get("cond.fc.w")?, bound.get("cond.fc.b")?)?;
        let g = tape.relu(g);
        let z = tape.concat(&[e, g, cond])?;
        let z = tape.dense(z, bound.get("dec.fc1.w")?, bound.get("dec.fc1.b")?)?;
        let z = tape.relu(z);
        let out = tape.dense(z, bound.get("dec.out.w")?, bound.get("dec.out.b")?)?;
        let out = tape.reshape(out, &[c.points, 3])?;
        Ok(tape.scale(out, c.output_scale))
    }

    /// Points `[K][3]` in the source camera frame.
    pub fn predict_points(&self, input: &ShapeInput) -> Result<Vec<[f64; 3]>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, input)?;
        Ok(tape.value(out).data().chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect())
    }

    /// Full cloud of the cropped object in the camera frame of `view`.
    pub fn predict_cloud(&self, crop: &Crop, view: u16) -> Result<PointCloud> {
        let input = ShapeInput::from_crop(crop)?;
        let pts = self.predict_points(&input)?;
        PointCloud::new(pts.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect(), Frame::Camera(view))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::scenesim::CropWindow;

    fn dummy_crop(seed: u64) -> Crop {
        let cfg = ShapeNetConfig::default();
        let n = cfg.in_height * cfg.in_width;
        let mut rng = rng_for(seed, 1);
        let mut data: Vec<f32> = (0..CROP_CHANNELS * n).map(|_| rng.random::<f32>()).collect();
        for v in &mut data[3 * n..4 * n] {
            *v = 0.5 + 0.1 * *v;
        }
        for v in &mut data[4 * n..] {
            *v = if *v > 0.5 { 1.0 } else { 0.0 };
        }
        Crop {
            data,
            height: cfg.in_height,
            width: cfg.in_width,
            intrinsics: CameraIntrinsics::new(400.0, 400.0, 20.0, 30.0, 64, 48).unwrap(),
            window: CropWindow {
                u0: 10.0,
                u1: 50.0,
                v0: 10.0,
                v1: 40.0,
            },
            scale_u: 1.6,
            scale_v: 1.6,
        }
    }

    #[test]
    fn untrained_model_outputs_the_seed_grid() {
        let model = ShapeNetModel::new(ShapeNetConfig::default(), 3).unwrap();
        let cloud = model.predict_cloud(&dummy_crop(0), 2).unwrap();
        let grid = model.config.seed_grid();
        assert_eq!(cloud.len(), 256);
        assert_eq!(cloud.frame(), Frame::Camera(2));
        for (p, g) in cloud.points().iter().zip(&grid) {
            assert!((p.x - g[0]).abs() < 1e-12 && (p.y - g[1]).abs() < 1e-12 && (p.z - g[2]).abs() < 1e-12);
        }
        let c = cloud.centroid();
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && (c.z - 0.6).abs() < 1e-12);
    }

    #[test]
    fn prediction_is_deterministic_and_sized() {
        let mut model = ShapeNetModel::new(ShapeNetConfig::default(), 4).unwrap();
        // give the output layer weight so the input matters
        let w = model.params.get_mut("dec.out.w").unwrap();
        w.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 7) as f64 - 3.0) * 1e-3);
        let crop = dummy_crop(5);
        let a = model.predict_points(&ShapeInput::from_crop(&crop).unwrap()).unwrap();
        let b = model.predict_points(&ShapeInput::from_crop(&crop.clone()).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = model.predict_points(&ShapeInput::from_crop(&dummy_crop(6)).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn wrong_crop_size_is_a_shape_error() {
        let model = ShapeNetModel::new(ShapeNetConfig::default(), 0).unwrap();
        let mut crop = dummy_crop(0);
        crop.height = 24;
        crop.data.truncate(CROP_CHANNELS * 24 * 64);
        assert!(matches!(model.predict_cloud(&crop, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn seed_grid_has_k_distinct_points() {
        for k in [1, 7, 64, 100, 256] {
            let cfg = ShapeNetConfig {
                points: k,
                ..ShapeNetConfig::default()
            };
            let g = cfg.seed_grid();
            assert_eq!(g.len(), k);
            let mut keys: Vec<_> = g.iter().map(|p| p.map(|v| (v * 1e6).round() as i64)).collect();
            keys.sort_unstable();
            keys.dedup();
            assert_eq!(keys.len(), k);
        }
    }
}
