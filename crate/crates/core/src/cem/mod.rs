//! Cross-entropy-method search over top-down grasp poses.

mod infer;

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grasp::GraspSample;

pub use infer::{infer_grasp, observe_target, plan_grasp, CloudSource, Observation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    pub n_cem: usize,
    pub n_elite: usize,
    /// Early-stop threshold on any candidate's score.
    pub alpha: f64,
    pub max_iters: usize,
    /// Initial standard deviations of (x, y, z, psi).
    pub init_sigma: [f64; 4],
    pub sigma_min: [f64; 4],
    /// Draws allowed per population slot before giving up.
    pub retry_factor: usize,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            n_cem: 100,
            n_elite: 10,
            alpha: 0.9,
            max_iters: 3,
            init_sigma: [0.02, 0.02, 0.02, 1.0],
            sigma_min: [0.001, 0.001, 0.001, 0.01],
            retry_factor: 10,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_elite == 0 || self.n_elite >= self.n_cem {
            return Err(Error::config("cem.n_elite", "must satisfy 1 <= n_elite < n_cem"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("cem.alpha", "must lie in (0, 1)"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("cem.max_iters", "must be >= 1"));
        }
        if self.retry_factor == 0 {
            return Err(Error::config("cem.retry_factor", "must be >= 1"));
        }
        for (s, m) in self.init_sigma.iter().zip(&self.sigma_min) {
            if !(*s >= 0.0 && *m > 0.0 && s.is_finite() && m.is_finite()) {
                return Err(Error::config("cem.sigma", "sigmas must be finite, floors > 0"));
            }
        }
        Ok(())
    }
}

/// Accept/reject rule on candidate grasps.
pub trait Constraint: Sync {
    fn name(&self) -> &str;
    fn accepts(&self, s: &GraspSample) -> bool;
}

/// Axis-aligned box the gripper position must stay in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl WorkspaceBox {
    /// The table top extended upward: fingertips between `clearance` and
    /// `reach` above the surface.
    pub fn above_table(center: [f64; 2], half: [f64; 2], table_height: f64, clearance: f64, reach: f64) -> Self {
        Self {
            lo: [center[0] - half[0], center[1] - half[1], table_height + clearance],
            hi: [center[0] + half[0], center[1] + half[1], table_height + reach],
        }
    }
}

impl Constraint for WorkspaceBox {
    fn name(&self) -> &str {
        "workspace box"
    }

    fn accepts(&self, s: &GraspSample) -> bool {
        (0..3).all(|k| s.p[k] >= self.lo[k] && s.p[k] <= self.hi[k])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CemResult {
    pub best: GraspSample,
    pub score: f64,
    pub iterations: usize,
    /// Best-ever score after each iteration.
    pub history: Vec<f64>,
}

fn draw(mean: &[f64; 4], sigma: &[f64; 4], rng: &mut impl Rng) -> GraspSample {
    let mut v = [0.0; 4];
    for k in 0..4 {
        let z: f64 = StandardNormal.sample(rng);
        v[k] = mean[k] + sigma[k] * z;
    }
    GraspSample {
        p: [v[0], v[1], v[2]],
        psi: v[3].clamp(-FRAC_PI_2, FRAC_PI_2),
    }
}

/// Maximizes `scorer` over grasp samples. `scorer` receives a whole
/// population and returns one score per candidate.
pub fn cem_optimize<S>(
    mut scorer: S,
    init: &GraspSample,
    cfg: &CemConfig,
    constraints: &[&dyn Constraint],
    rng: &mut impl Rng,
) -> Result<CemResult>
where
    S: FnMut(&[GraspSample]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut mean = [init.p[0], init.p[1], init.p[2], init.psi];
    let mut sigma = cfg.init_sigma;
    for k in 0..4 {
        sigma[k] = sigma[k].max(cfg.sigma_min[k]);
    }
    let mut best: Option<(GraspSample, f64)> = None;
    let mut history = Vec::new();
    for iter in 0..cfg.max_iters {
        let budget = cfg.n_cem * cfg.retry_factor;
        let mut pop = Vec::with_capacity(cfg.n_cem);
        let mut draws = 0;
        let mut last_reject = "";
        while pop.len() < cfg.n_cem {
            if draws == budget {
                return Err(Error::Infeasible {
                    reason: last_reject.to_string(),
                    attempts: draws,
                });
            }
            draws += 1;
            let s = draw(&mean, &sigma, rng);
            match constraints.iter().find(|c| !c.accepts(&s)) {
                Some(c) => last_reject = c.name(),
                None => pop.push(s),
            }
        }
        let scores = scorer(&pop)?;
        if scores.len() != pop.len() {
            return Err(Error::Shape {
                op: "cem scorer",
                left: vec![scores.len()],
                right: vec![pop.len()],
            });
        }
        if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
            return Err(Error::Scorer(*bad));
        }
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let top = order[0];
        if best.as_ref().is_none_or(|(_, v)| scores[top] > *v) {
            best = Some((pop[top], scores[top]));
        }
        let best_score = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.1);
        history.push(best_score);
        if scores[top] >= cfg.alpha || iter + 1 == cfg.max_iters {
            break;
        }
        let elites = &order[..cfg.n_elite];
        let n = elites.len() as f64;
        for k in 0..4 {
            let val = |i: usize| if k < 3 { pop[i].p[k] } else { pop[i].psi };
            let m = elites.iter().map(|&i| val(i)).sum::<f64>() / n;
            let var = elites.iter().map(|&i| (val(i) - m).powi(2)).sum::<f64>() / n;
            mean[k] = m;
            sigma[k] = var.sqrt().max(cfg.sigma_min[k]);
        }
    }
    let (best, score) = best.expect("at least one iteration ran");
    Ok(CemResult {
        best,
        score,
        iterations: history.len(),
        history,
    })
}

/// Peak of `exp(-|p - p*|^2 / (2 l^2))`, the analytic test scorer.
pub fn gaussian_bump(p_star: [f64; 3], length: f64) -> impl Fn(&[GraspSample]) -> Result<Vec<f64>> {
    move |pop| {
        Ok(pop
            .iter()
            .map(|s| {
                let d2: f64 = (0..3).map(|k| (s.p[k] - p_star[k]).powi(2)).sum();
                (-d2 / (2.0 * length * length)).exp()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::seeds::rng_for;

    fn start() -> GraspSample {
        GraspSample::new([0.6, 0.0, 0.45], 0.0).unwrap()
    }

    fn bump_cfg() -> CemConfig {
        CemConfig {
            init_sigma: [0.05, 0.05, 0.05, 1.0],
            ..CemConfig::default()
        }
    }

    #[test]
    fn finds_the_bump_peak() {
        let target = [0.64, -0.03, 0.47];
        for seed in 0..20 {
            let mut rng = rng_for(seed, 1);
            let r = cem_optimize(gaussian_bump(target, 0.04), &start(), &bump_cfg(), &[], &mut rng).unwrap();
            let d = (0..3).map(|k| (r.best.p[k] - target[k]).powi(2)).sum::<f64>().sqrt();
            assert!(d < 0.02 && r.iterations <= 3, "seed {seed}: {d} after {}", r.iterations);
        }
    }

    #[test]
    fn constant_scores_control_the_iteration_count() {
        let mut rng = rng_for(0, 0);
        let one = cem_optimize(|p: &[GraspSample]| Ok(vec![1.0; p.len()]), &start(), &CemConfig::default(), &[], &mut rng).unwrap();
        assert_eq!(one.iterations, 1);
        let ws = WorkspaceBox {
            lo: [0.55, -0.05, 0.44],
            hi: [0.65, 0.05, 0.5],
        };
        let zero = cem_optimize(|p: &[GraspSample]| Ok(vec![0.0; p.len()]), &start(), &CemConfig::default(), &[&ws], &mut rng).unwrap();
        assert_eq!(zero.iterations, 3);
        assert!(ws.accepts(&zero.best));
    }

    #[test]
    fn impossible_constraints_and_bad_scores_are_errors() {
        let ws = WorkspaceBox {
            lo: [5.0; 3],
            hi: [6.0; 3],
        };
        let mut rng = rng_for(1, 0);
        let r = cem_optimize(|p: &[GraspSample]| Ok(vec![0.5; p.len()]), &start(), &CemConfig::default(), &[&ws], &mut rng);
        assert!(matches!(r, Err(Error::Infeasible { attempts: 1000, .. })));
        let r = cem_optimize(|p: &[GraspSample]| Ok(vec![f64::NAN; p.len()]), &start(), &CemConfig::default(), &[], &mut rng);
        assert!(matches!(r, Err(Error::Scorer(_))));
        let bad = CemConfig {
            n_elite: 100,
            ..CemConfig::default()
        };
        assert!(cem_optimize(|p: &[GraspSample]| Ok(vec![0.5; p.len()]), &start(), &bad, &[], &mut rng).is_err());
    }

    #[test]
    fn single_elite_collapses_to_the_floor() {
        let cfg = CemConfig {
            n_cem: 20,
            n_elite: 1,
            max_iters: 2,
            ..CemConfig::default()
        };
        // after one refit every draw sits within a few floors of the elite
        let mut seen = Vec::new();
        let mut rng = rng_for(4, 0);
        cem_optimize(
            |p: &[GraspSample]| {
                seen.push(p.to_vec());
                Ok(p.iter().map(|s| -s.p[0]).collect())
            },
            &start(),
            &cfg,
            &[],
            &mut rng,
        )
        .unwrap();
        let elite = seen[0].iter().min_by(|a, b| a.p[0].total_cmp(&b.p[0])).unwrap();
        for s in &seen[1] {
            assert!((s.p[0] - elite.p[0]).abs() < 6.0 * cfg.sigma_min[0]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn best_score_never_drops_and_samples_stay_legal(seed in 0u64..1000, cx in 0.5f64..0.7) {
            let ws = WorkspaceBox::above_table([0.6, 0.0], [0.2, 0.2], 0.4, 0.005, 0.25);
            let mut rng = rng_for(seed, 2);
            let scorer = gaussian_bump([cx, 0.05, 0.5], 0.03);
            let cfg = CemConfig { alpha: 0.999, ..bump_cfg() };
            let r = cem_optimize(
                |p: &[GraspSample]| {
                    for s in p {
                        assert!(ws.accepts(s) && s.psi.abs() <= FRAC_PI_2);
                    }
                    scorer(p)
                },
                &start(),
                &cfg,
                &[&ws],
                &mut rng,
            )
            .unwrap();
            prop_assert!(r.history.windows(2).all(|w| w[1] >= w[0]));
            prop_assert!(ws.accepts(&r.best));
        }

        #[test]
        fn scaling_scores_keeps_the_winner(seed in 0u64..1000, c in 0.05f64..0.8) {
            let bump = gaussian_bump([0.62, 0.02, 0.46], 0.04);
            let a = cem_optimize(|p: &[GraspSample]| Ok(bump(p)?.iter().map(|v| v * 0.85).collect()), &start(), &bump_cfg(), &[], &mut rng_for(seed, 3)).unwrap();
            let b = cem_optimize(|p: &[GraspSample]| Ok(bump(p)?.iter().map(|v| v * 0.85 * c).collect()), &start(), &bump_cfg(), &[], &mut rng_for(seed, 3)).unwrap();
            prop_assert_eq!(a.best, b.best);
        }
    }
}
