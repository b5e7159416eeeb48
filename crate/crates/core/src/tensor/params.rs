use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A trainable tensor with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let n = value.len();
        Self {
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters in sorted name order, plus the optimizer step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
    step: u64,
}

/// Tape handles for every parameter of a [`ParamSet`], in name order.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds names to arbitrary tape nodes, e.g. perturbed copies of a
    /// parameter set.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.params.values().map(|p| p.value.sum_squares()).sum()
    }

    /// Registers every parameter on `tape` by reference.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.param(&p.value)))
            .collect();
        BoundParams { vars }
    }

    /// Extracts per-parameter gradients (zeros where the loss does not
    /// depend on a parameter), in name order.
    pub fn collect_grads(&self, bound: &BoundParams, grads: &mut Gradients) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|(name, p)| {
                bound
                    .vars
                    .get(name)
                    .and_then(|&v| grads.take(v))
                    .unwrap_or_else(|| vec![0.0; p.value.len()])
            })
            .collect()
    }

    /// Stores gradients produced by [`ParamSet::collect_grads`] (or a sum of
    /// them), scaled by `scale`.
    pub fn set_grads(&mut self, grads: Vec<Vec<f64>>, scale: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape {
                op: "set_grads",
                left: vec![grads.len()],
                right: vec![self.params.len()],
            });
        }
        for (p, mut g) in self.params.values_mut().zip(grads) {
            if g.len() != p.value.len() {
                return Err(Error::Shape {
                    op: "set_grads",
                    left: vec![g.len()],
                    right: p.value.shape().to_vec(),
                });
            }
            if scale != 1.0 {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            p.grad = Some(Tensor::new(p.value.shape().to_vec(), g)?);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// One Adam step with bias correction. Every parameter must carry a
    /// gradient. Consumes the gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::MissingGradient(name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in self.params.values_mut() {
            let g = p.grad.take().expect("checked above");
            for (((x, m), v), gi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.m.iter_mut())
                .zip(p.v.iter_mut())
                .zip(g.data())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *x -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Values only; optimizer state is reset.
    pub fn from_tensors(tensors: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self> {
        let mut set = Self::new();
        for (name, t) in tensors {
            set.insert(name, t)?;
        }
        Ok(set)
    }

    /// Euclidean distance between two sets with identical layout.
    pub fn distance(&self, other: &ParamSet) -> Result<f64> {
        let mut acc = 0.0;
        for ((na, a), (nb, b)) in self.iter().zip(other.iter()) {
            if na != nb || a.shape() != b.shape() {
                return Err(Error::config(na, "parameter layouts differ"));
            }
            acc += a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        }
        Ok(acc.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: Vec<f64>) -> ParamSet {
        let mut set = ParamSet::new();
        set.insert("w", Tensor::vector(value)).unwrap();
        set
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut set = single(vec![1.0, -2.0]);
        set.set_grads(vec![vec![0.0, 0.0]], 1.0).unwrap();
        set.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(set.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut set = single(vec![0.5, 0.5]);
        set.set_grads(vec![vec![3.0, -0.2]], 1.0).unwrap();
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        set.adam_step(&cfg).unwrap();
        let w = set.get("w").unwrap().data();
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((w[0] - (0.5 - 0.01)).abs() < 1e-9);
        assert!((w[1] - (0.5 + 0.01)).abs() < 1e-9);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut set = single(vec![1.0]);
        assert!(matches!(
            set.adam_step(&AdamConfig::default()),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn quadratic_bowl_decreases_monotonically() {
        let mut set = single(vec![2.0, -1.5, 1.2]);
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let loss = set.sum_squares();
            assert!(loss < last, "loss went up: {loss} >= {last}");
            last = loss;
            let g = set.get("w").unwrap().data().iter().map(|v| 2.0 * v).collect();
            set.set_grads(vec![g], 1.0).unwrap();
            set.adam_step(&cfg).unwrap();
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut set = single(vec![1.0]);
        assert!(set.insert("w", Tensor::scalar(0.0)).is_err());
    }
}
