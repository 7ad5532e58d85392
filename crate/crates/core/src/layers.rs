//! Parameterized convolution and dense layers.

use rand::Rng;

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::error::Result;
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// He normal initialization, `N(0, 2 / fan_in)`.
pub fn he_normal<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl ConvLayer {
    /// Square `k x k` convolution registered as `{name}.weight` / `{name}.bias`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        spec: Conv2dSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&[c_out, c_in, k, k], c_in * k * k, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(ConvLayer { weight, bias, spec })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        tape.conv2d(x, w, b, self.spec)
    }

    pub fn param_count(c_in: usize, c_out: usize, k: usize) -> usize {
        c_out * c_in * k * k + c_out
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(&[d_out, d_in], d_in, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Dense { weight, bias })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        tape.dense(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_normal_has_expected_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = he_normal(&[200, 50], 50, &mut rng);
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.004, "{var}");
    }

    #[test]
    fn layers_register_named_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        ConvLayer::new(&mut store, "c", 3, 4, 3, Conv2dSpec::new(1, 1), &mut rng).unwrap();
        Dense::new(&mut store, "d", 4, 2, &mut rng).unwrap();
        assert!(store.find("c.weight").is_some() && store.find("d.bias").is_some());
        assert_eq!(store.count(), ConvLayer::param_count(3, 4, 3) + 4 * 2 + 2);
    }
}
