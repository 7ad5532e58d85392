//! Named parameters and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{AwbError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub gradient: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            gradient: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
        }
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(AwbError::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds `scale * grad` into each parameter's gradient buffer.
    pub fn accumulate(&mut self, grads: &[Option<Tensor<T>>], scale: T) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                for (a, &b) in p.gradient.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.fill(T::zero());
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(AwbError::InvalidArgument(format!(
                "invalid Adam config {self:?}"
            )))
        }
    }
}

/// One bias-corrected Adam update over every parameter, then zeroes the
/// gradients. Nothing is modified if any gradient is non-finite.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, cfg: &mut AdamConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(bad) = params.iter().find(|p| !p.gradient.all_finite()) {
        return Err(AwbError::NonFinite(format!("gradient of `{}`", bad.name)));
    }
    cfg.step_count += 1;
    let t = cfg.step_count as i32;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
    let lr = T::lit(cfg.learning_rate);
    let eps = T::lit(cfg.epsilon);

    for p in params.iter_mut() {
        let g = p.gradient.data();
        let m = p.adam_m.data_mut();
        for (m, &g) in m.iter_mut().zip(g) {
            *m = b1 * *m + (one - b1) * g;
        }
        let v = p.adam_v.data_mut();
        for (v, &g) in v.iter_mut().zip(p.gradient.data()) {
            *v = b2 * *v + (one - b2) * g * g;
        }
        let (m, v) = (p.adam_m.data(), p.adam_v.data());
        for ((x, &m), &v) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.gradient.fill(T::zero());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(v)).unwrap();
        s.get_mut(id).gradient = Tensor::scalar(g);
        s
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let mut s = store(1.5, 0.0);
        let mut cfg = AdamConfig::default();
        for _ in 0..5 {
            adam_step(&mut s, &mut cfg).unwrap();
        }
        let p = s.get(ParamId(0));
        assert_eq!(p.value.data()[0], 1.5);
        assert_eq!(p.adam_m.data()[0], 0.0);
        assert_eq!(p.adam_v.data()[0], 0.0);
        assert_eq!(cfg.step_count, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(0.0, 1.0);
        let mut cfg = AdamConfig::with_learning_rate(1e-3);
        adam_step(&mut s, &mut cfg).unwrap();
        // m_hat = 1, v_hat = 1
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((s.get(ParamId(0)).value.data()[0] - expected).abs() < 1e-15);
        assert_eq!(s.get(ParamId(0)).gradient.data()[0], 0.0);
    }

    #[test]
    fn identical_params_identical_trajectories() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", Tensor::from_slice(&[0.3, -0.2])).unwrap();
        let b = s.add("b", Tensor::from_slice(&[0.3, -0.2])).unwrap();
        let mut cfg = AdamConfig::default();
        for k in 0..20 {
            let g = Tensor::from_slice(&[(k as f32).sin(), 0.5]);
            s.get_mut(a).gradient = g.clone();
            s.get_mut(b).gradient = g;
            adam_step(&mut s, &mut cfg).unwrap();
        }
        assert_eq!(s.value(a), s.value(b));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store(1.0, f64::NAN);
        let err = adam_step(&mut s, &mut AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");
        assert_eq!(s.get(ParamId(0)).value.data()[0], 1.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::scalar(0.0)).unwrap();
        assert!(s.add("w", Tensor::scalar(0.0)).is_err());
    }
}
