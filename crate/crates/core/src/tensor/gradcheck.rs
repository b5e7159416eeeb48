//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BatchNormMode, Tape, Tensor, Var};
use crate::error::Result;

/// Perturbation used by the suite.
pub const FD_EPS: f64 = 1e-5;
/// Relative error accepted by the suite.
pub const FD_TOL: f64 = 1e-4;

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` with the largest error.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `eps`, for every element of every input.
pub fn check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].len()];
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = analytic[j];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Weights that make the scalar reduction of a layer output non-trivial.
fn probe_sum<'a>(tape: &mut Tape<'a>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(random(&mut rng, &shape, 1.0));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

/// Runs the finite-difference check for every tape layer on small random
/// instances drawn from `seed`. Returns `(layer, report)` pairs.
pub fn layer_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let eps = FD_EPS;

    let x = random(&mut rng, &[3, 4], 1.0);
    let w = random(&mut rng, &[4, 5], 1.0);
    let b = random(&mut rng, &[5], 1.0);
    out.push((
        "dense",
        check(&[x, w, b], eps, |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            probe_sum(t, y, seed)
        })?,
    ));

    let x = random(&mut rng, &[2, 2, 5, 6], 1.0);
    let k = random(&mut rng, &[3, 2, 3, 3], 1.0);
    let b = random(&mut rng, &[3], 1.0);
    out.push((
        "conv2d",
        check(&[x, k, b], eps, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            probe_sum(t, y, seed)
        })?,
    ));

    let x = random(&mut rng, &[4, 6], 1.0);
    out.push((
        "relu",
        check(&[x], eps, |t, v| {
            let y = t.relu(v[0]);
            probe_sum(t, y, seed)
        })?,
    ));

    let x = random(&mut rng, &[4, 6], 3.0);
    out.push((
        "sigmoid",
        check(&[x], eps, |t, v| {
            let y = t.sigmoid(v[0]);
            probe_sum(t, y, seed)
        })?,
    ));

    let x = random(&mut rng, &[5, 3], 1.0);
    let g = random(&mut rng, &[3], 1.0);
    let be = random(&mut rng, &[3], 1.0);
    out.push((
        "batchnorm_train",
        check(&[x.clone(), g.clone(), be.clone()], eps, |t, v| {
            let (y, _) = t.batchnorm(v[0], v[1], v[2], BatchNormMode::Train, None)?;
            probe_sum(t, y, seed)
        })?,
    ));
    let rm: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
    let rv: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
    out.push((
        "batchnorm_infer",
        check(&[x, g, be], eps, |t, v| {
            let (y, _) = t.batchnorm(v[0], v[1], v[2], BatchNormMode::Infer, Some((&rm, &rv)))?;
            probe_sum(t, y, seed)
        })?,
    ));

    let x = random(&mut rng, &[2, 6, 4], 1.0);
    out.push((
        "maxpool_points",
        check(&[x], eps, |t, v| {
            let y = t.maxpool_points(v[0])?;
            probe_sum(t, y, seed)
        })?,
    ));

    let x = random(&mut rng, &[8], 3.0);
    let target: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
    out.push(("huber", check(&[x], eps, |t, v| t.huber(v[0], &target, 1.0))?));

    let a = random(&mut rng, &[3, 2], 1.0);
    let c = random(&mut rng, &[3, 3], 1.0);
    out.push((
        "add_mul_concat_reshape",
        check(&[a, c], eps, |t, v| {
            let cat = t.concat(&[v[0], v[1]])?;
            let sq = t.mul(cat, cat)?;
            let s = t.add(sq, cat)?;
            let r = t.reshape(s, &[5, 3])?;
            let d = t.sub(r, r)?;
            let m = t.scale(r, 0.5);
            let e = t.add(d, m)?;
            probe_sum(t, e, seed)
        })?,
    ));

    let x = random(&mut rng, &[6], 2.0);
    out.push((
        "sum_squares_mean",
        check(&[x], eps, |t, v| {
            let a = t.sum_squares(v[0]);
            let m = t.mean(v[0]);
            let m2 = t.mul(m, m)?;
            t.add(a, m2)
        })?,
    ));

    let logits = random(&mut rng, &[6, 1], 2.0);
    let labels: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    out.push((
        "bce",
        check(&[logits], eps, |t, v| {
            let p = t.sigmoid(v[0]);
            t.bce(p, &labels)
        })?,
    ));

    let mut pts = random(&mut rng, &[5, 3], 0.2);
    for p in pts.data_mut().chunks_exact_mut(3) {
        p[2] += 0.8;
    }
    let rot = random_rotation(&mut rng);
    let trans = [0.05, -0.02, 0.1];
    out.push((
        "rigid_project_bbox",
        check(&[pts.clone()], eps, |t, v| {
            let y = t.rigid_apply(v[0], &rot, &trans)?;
            let uv = t.project(y, 120.0, 110.0, 64.0, 48.0, 0.05)?;
            let bb = t.tight_bbox(uv)?;
            t.huber(bb, &[60.0, 50.0, 10.0, 20.0], 1.0)
        })?,
    ));

    let mut near = pts.clone();
    near.data_mut()[2] = 0.02;
    out.push((
        "project_clamped_depth_penalty",
        check(&[near], eps, |t, v| {
            let uv = t.project(v[0], 120.0, 110.0, 64.0, 48.0, 0.05)?;
            let s = probe_sum(t, uv, seed)?;
            let p = t.depth_penalty(v[0], 0.05)?;
            let p = t.scale(p, 10.0);
            t.add(s, p)
        })?,
    ));

    let target: Vec<[f64; 2]> = (0..7)
        .map(|_| [rng.random_range(40.0..80.0), rng.random_range(30.0..60.0)])
        .collect();
    out.push((
        "chamfer2d",
        check(&[pts.clone()], eps, |t, v| {
            let uv = t.project(v[0], 120.0, 110.0, 64.0, 48.0, 0.05)?;
            t.chamfer2d(uv, &target)
        })?,
    ));

    let label: Vec<[f64; 3]> = (0..6)
        .map(|_| {
            [
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(0.6..1.0),
            ]
        })
        .collect();
    out.push(("chamfer3d", check(&[pts], eps, |t, v| t.chamfer3d_from_labels(v[0], &label, 0.01))?));

    Ok(out)
}

/// Uniformly random rotation from a random unit quaternion, row-major.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> [f64; 9] {
    let q = loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f64>();
        if n > 1e-3 && n <= 1.0 {
            let n = n.sqrt();
            break q.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_matches_finite_differences() {
        for seed in 0..3 {
            for (name, r) in layer_suite(seed).unwrap() {
                assert!(r.passes(FD_TOL), "seed {seed} layer {name}: {r:?}");
                assert!(r.checked > 0);
            }
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu's gradient at a kink is one-sided; a check straddling it disagrees.
        let x = Tensor::vector(vec![0.0]);
        let r = check(&[x], 1e-5, |t, v| {
            let y = t.relu(v[0]);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(!r.passes(FD_TOL));
    }
}
