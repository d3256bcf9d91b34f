//! Parameter gradients and the plain SGD update.

use std::collections::BTreeMap;

use crate::backbone::WeightsBundle;
use crate::error::{Error, Result};
use crate::tape::Tensor;

/// Weight decay used by training.
pub const WEIGHT_DECAY: f64 = 1e-6;

/// Parameter name → gradient with the parameter's element count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor) {
        self.grads.insert(name.into(), g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub(crate) fn accumulate(&mut self, name: &str, g: &Tensor) {
        match self.grads.get_mut(name) {
            Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
            None => {
                self.grads.insert(name.to_string(), g.clone());
            }
        }
    }

    /// Sums another map into this one.
    pub fn merge(&mut self, other: &GradientMap) {
        for (name, g) in &other.grads {
            self.accumulate(name, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|g| g.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.grads.values().flat_map(|g| g.data.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `θ ← θ − lr · (g + wd · θ)` for every parameter. Parameters without a
/// gradient still decay. The update is computed in `f64` and stored as `f32`.
pub fn sgd_step(weights: &mut WeightsBundle, grads: &GradientMap, lr: f64, weight_decay: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidInput(format!("learning rate must be non-negative, got {lr}")));
    }
    for (name, g) in grads.iter() {
        let p =
            weights.get(name).ok_or_else(|| Error::InvalidInput(format!("gradient for unknown parameter `{name}`")))?;
        if p.data.len() != g.len() {
            return Err(Error::InvalidInput(format!(
                "gradient for `{name}` has {} entries, parameter has {}",
                g.len(),
                p.data.len()
            )));
        }
    }
    if lr == 0.0 {
        return Ok(());
    }
    for (name, p) in weights.iter_mut() {
        let g = grads.get(name);
        for (i, v) in p.data.iter_mut().enumerate() {
            let theta = *v as f64;
            let gi = g.map_or(0.0, |g| g.data[i]);
            *v = (theta - lr * (gi + weight_decay * theta)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ParamTensor;

    fn one(v: f32) -> WeightsBundle {
        let mut w = WeightsBundle::default();
        w.insert("p", ParamTensor { shape: vec![1], data: vec![v] });
        w
    }

    fn grad(v: f64) -> GradientMap {
        let mut g = GradientMap::default();
        g.insert("p", Tensor::scalar(v));
        g
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut w = one(0.7);
        sgd_step(&mut w, &grad(0.0), 0.5, 0.0).unwrap();
        assert_eq!(w.get("p").unwrap().data, vec![0.7]);
    }

    #[test]
    fn single_step_arithmetic() {
        let mut w = one(1.0);
        sgd_step(&mut w, &grad(1.0), 0.1, 0.0).unwrap();
        assert!((w.get("p").unwrap().data[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn two_steps_equal_one_summed_step() {
        let mut a = one(0.25);
        sgd_step(&mut a, &grad(0.5), 0.25, 0.0).unwrap();
        sgd_step(&mut a, &grad(0.5), 0.25, 0.0).unwrap();
        let mut b = one(0.25);
        sgd_step(&mut b, &grad(1.0), 0.25, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut w = one(2.0);
        sgd_step(&mut w, &grad(0.0), 0.5, 0.5).unwrap();
        assert!((w.get("p").unwrap().data[0] - 1.5).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_and_negative_lr() {
        let mut w = one(1.0);
        let mut g = GradientMap::default();
        g.insert("p", Tensor::zeros(1, 2));
        assert!(sgd_step(&mut w, &g, 0.1, 0.0).is_err());
        assert!(sgd_step(&mut w, &grad(1.0), -0.1, 0.0).is_err());
        let mut g = GradientMap::default();
        g.insert("q", Tensor::scalar(1.0));
        assert!(sgd_step(&mut w, &g, 0.1, 0.0).is_err());
    }
}
