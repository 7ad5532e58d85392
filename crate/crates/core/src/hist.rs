//! Differentiable log-chroma histogram branch.
//!
//! Each pixel's `(u, v)` coordinates vote into learnable triangular bins on
//! each axis; the 2D histogram is the pixel-averaged outer product of the two
//! vote vectors. A multi-scale average pyramid of the histogram is flattened
//! and mapped to a 512-vector by a dense layer with ReLU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{spp_output_len, Tape, Var};
use crate::error::{AwbError, Result};
use crate::layers::Dense;
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Pixels below this are floored before taking logs.
pub const PIXEL_FLOOR: f64 = 1e-6;
/// Lower bound applied to bin widths after each optimizer step.
pub const MIN_WIDTH: f64 = 1e-3;

/// Learnable bin centers and widths for one axis.
#[derive(Clone, Debug)]
pub struct HistBins {
    pub centers: ParamId,
    pub widths: ParamId,
}

impl HistBins {
    /// `bins` centers evenly spaced over `[lo, hi]`, widths `1 / spacing` so the
    /// votes form a partition of unity inside the grid.
    pub fn uniform<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        bins: usize,
        lo: f64,
        hi: f64,
    ) -> Result<Self> {
        let (centers, widths) = uniform_grid(bins, lo, hi)?;
        Ok(HistBins {
            centers: store.add(format!("{name}.centers"), centers.cast())?,
            widths: store.add(format!("{name}.widths"), widths.cast())?,
        })
    }

    /// Per-element votes of `x`, shape `x.shape() ++ [B]`.
    pub fn vote<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let (c, w) = (tape.param(self.centers), tape.param(self.widths));
        tape.vote(x, c, w)
    }

    pub fn clamp_widths<T: Real>(&self, store: &mut ParamStore<T>) {
        let min = T::lit(MIN_WIDTH);
        store
            .get_mut(self.widths)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = w.max(min));
    }
}

/// Centers and widths of a uniform grid of `bins` bins over `[lo, hi]`.
pub fn uniform_grid(bins: usize, lo: f64, hi: f64) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if bins < 2 || !(hi > lo) {
        return Err(AwbError::InvalidArgument(format!(
            "histogram grid needs >= 2 bins over a non-empty range, got {bins} over [{lo}, {hi}]"
        )));
    }
    let step = (hi - lo) / (bins - 1) as f64;
    let centers = (0..bins).map(|i| lo + step * i as f64).collect::<Vec<_>>();
    Ok((
        Tensor::from_slice(&centers),
        Tensor::full(&[bins], 1.0 / step),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistHeadConfig {
    pub bins_per_axis: usize,
    pub spp_strides: Vec<usize>,
    pub out_channels: usize,
    /// Range of the initial bin centers in log-chroma units.
    pub uv_range: (f64, f64),
}

impl Default for HistHeadConfig {
    fn default() -> Self {
        HistHeadConfig {
            bins_per_axis: 32,
            spp_strides: vec![1, 2, 4, 8],
            out_channels: 512,
            uv_range: (-2.5, 2.5),
        }
    }
}

impl HistHeadConfig {
    /// Length of the pooled pyramid fed to the dense head.
    pub fn n_hist_channels(&self) -> usize {
        spp_output_len(self.bins_per_axis, &self.spp_strides)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.spp_strides;
        if self.bins_per_axis < 2
            || s.is_empty()
            || s[0] < 1
            || !s.windows(2).all(|w| w[0] < w[1])
            || self.out_channels == 0
            || !(self.uv_range.1 > self.uv_range.0)
        {
            return Err(AwbError::InvalidArgument(format!(
                "invalid histogram config {self:?}"
            )));
        }
        Ok(())
    }
}

/// uv histogram, pyramid pooling and the dense head.
#[derive(Clone, Debug)]
pub struct HistLayer {
    pub config: HistHeadConfig,
    pub bins_u: HistBins,
    pub bins_v: HistBins,
    pub head: Dense,
}

impl HistLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: HistHeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (lo, hi) = config.uv_range;
        let b = config.bins_per_axis;
        let bins_u = HistBins::uniform(store, &format!("{name}.bins_u"), b, lo, hi)?;
        let bins_v = HistBins::uniform(store, &format!("{name}.bins_v"), b, lo, hi)?;
        let head = Dense::new(
            store,
            &format!("{name}.head"),
            config.n_hist_channels(),
            config.out_channels,
            rng,
        )?;
        Ok(HistLayer {
            config,
            bins_u,
            bins_v,
            head,
        })
    }

    /// `[1, B, B]` normalized uv histogram of a `[3, H, W]` image.
    pub fn histogram<T: Real>(&self, tape: &mut Tape<'_, T>, image: Var) -> Result<Var> {
        let cu = tape.param(self.bins_u.centers);
        let wu = tape.param(self.bins_u.widths);
        let cv = tape.param(self.bins_v.centers);
        let wv = tape.param(self.bins_v.widths);
        tape.uv_histogram(image, cu, wu, cv, wv, T::lit(PIXEL_FLOOR))
    }

    /// Dense + ReLU on a pooled pyramid vector.
    pub fn head<T: Real>(&self, tape: &mut Tape<'_, T>, pooled: Var) -> Result<Var> {
        let y = self.head.forward(tape, pooled)?;
        Ok(tape.relu(y))
    }

    /// Full branch: image to the `out_channels` feature vector.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, image: Var) -> Result<Var> {
        let h = self.histogram(tape, image)?;
        let pooled = tape.spp(h, &self.config.spp_strides)?;
        self.head(tape, pooled)
    }

    pub fn clamp_widths<T: Real>(&self, store: &mut ParamStore<T>) {
        self.bins_u.clamp_widths(store);
        self.bins_v.clamp_widths(store);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::triangle;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> HistHeadConfig {
        HistHeadConfig {
            bins_per_axis: 8,
            spp_strides: vec![1, 2, 4, 8],
            out_channels: 512,
            uv_range: (-1.5, 1.5),
        }
    }

    #[test]
    fn vote_examples() {
        assert_eq!(triangle(0.3f64, 0.3, 2.0), 1.0);
        assert_eq!(triangle(0.8f64, 0.3, 2.0), 0.0);
        assert!((triangle(0.5f64, 0.3, 2.0) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn n_hist_sizes() {
        assert_eq!(small_config().n_hist_channels(), 64 + 16 + 4 + 1);
        assert_eq!(
            HistHeadConfig::default().n_hist_channels(),
            1024 + 256 + 64 + 16
        );
    }

    /// Per-pixel double loop over all bin pairs, no sparsity.
    fn hist_oracle(img: &Tensor<f64>, c: &[f64], w: &[f64]) -> Vec<f64> {
        let (_, h, wd) = img.chw().unwrap();
        let n = h * wd;
        let b = c.len();
        let mut out = vec![0.0; b * b];
        for p in 0..n {
            let (r, g, bl) = (img.data()[p], img.data()[n + p], img.data()[2 * n + p]);
            let (r, g, bl) = (r.max(PIXEL_FLOOR), g.max(PIXEL_FLOOR), bl.max(PIXEL_FLOOR));
            let u = (g / r).ln();
            let v = (g / bl).ln();
            for i in 0..b {
                for j in 0..b {
                    let a = (1.0 - (u - c[i]).abs() * w[i]).max(0.0);
                    let bb = (1.0 - (v - c[j]).abs() * w[j]).max(0.0);
                    out[i * b + j] += a * bb / n as f64;
                }
            }
        }
        out
    }

    #[test]
    fn uv_histogram_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let layer = HistLayer::new(&mut store, "h", small_config(), &mut rng).unwrap();
        let img = Tensor::<f64>::rand_uniform(&[3, 8, 8], 0.05, 1.0, &mut rng);
        let mut tape = Tape::new(&store);
        let x = tape.input(img.clone());
        let h = layer.histogram(&mut tape, x).unwrap();
        let c = store.value(layer.bins_u.centers).data().to_vec();
        let w = store.value(layer.bins_u.widths).data().to_vec();
        let oracle = hist_oracle(&img, &c, &w);
        for (a, b) in tape.value(h).data().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn gray_image_lands_on_origin_bin() {
        let mut store = ParamStore::<f64>::new();
        // 5 bins over [-1, 1]: a bin sits exactly at 0
        let cfg = HistHeadConfig {
            bins_per_axis: 5,
            uv_range: (-1.0, 1.0),
            ..small_config()
        };
        let layer =
            HistLayer::new(&mut store, "h", cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::full(&[3, 4, 4], 0.5));
        let h = layer.histogram(&mut tape, x).unwrap();
        let d = tape.value(h).data();
        assert!((d[2 * 5 + 2] - 1.0).abs() < 1e-12);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_pixel_is_outer_product() {
        let mut store = ParamStore::<f64>::new();
        let layer = HistLayer::new(
            &mut store,
            "h",
            small_config(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let px = [0.3, 0.5, 0.2];
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::new(&[3, 1, 1], px.to_vec()).unwrap());
        let h = layer.histogram(&mut tape, x).unwrap();
        let c = store.value(layer.bins_u.centers).data();
        let w = store.value(layer.bins_u.widths).data();
        let (u, v) = ((px[1] / px[0]).ln(), (px[1] / px[2]).ln());
        for i in 0..8 {
            for j in 0..8 {
                let e = triangle(u, c[i], w[i]) * triangle(v, c[j], w[j]);
                assert!((tape.value(h).data()[i * 8 + j] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn spp_of_constant_is_constant() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::full(&[1, 8, 8], 0.25));
        let y = tape.spp(x, &[1, 2, 4, 8]).unwrap();
        assert_eq!(tape.value(y).len(), 85);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
        let y1 = tape.spp(x, &[1]).unwrap();
        assert_eq!(tape.value(y1).data(), tape.value(x).data());
    }

    #[test]
    fn head_of_zero_is_relu_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let layer = HistLayer::new(&mut store, "h", small_config(), &mut rng).unwrap();
        store.get_mut(layer.head.bias).value = Tensor::randn(&[512], 1.0, &mut rng);
        let bias = store.value(layer.head.bias).clone();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(&[85]));
        let y = layer.head(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).len(), 512);
        for (a, b) in tape.value(y).data().iter().zip(bias.data()) {
            assert_eq!(*a, b.max(0.0));
        }
    }

    #[test]
    fn clamp_keeps_widths_positive() {
        let mut store = ParamStore::<f32>::new();
        let bins = HistBins::uniform(&mut store, "b", 4, 0.0, 1.0).unwrap();
        store.get_mut(bins.widths).value = Tensor::from_slice(&[-1.0, 0.0, 1e-4, 2.0]);
        bins.clamp_widths(&mut store);
        assert_eq!(store.value(bins.widths).data(), &[1e-3, 1e-3, 1e-3, 2.0]);
    }

    #[test]
    fn vote_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let bins = HistBins::uniform(&mut store, "b", 6, -1.0, 1.0).unwrap();
        let mut inputs = vec![Tensor::rand_uniform(&[2, 3, 3], -1.0, 1.0, &mut rng)];
        let weights = Tensor::<f64>::randn(&[2 * 3 * 3 * 6], 1.0, &mut rng);
        let opts = GradCheckOptions {
            max_coords_per_tensor: 100,
            ..Default::default()
        };
        let report = grad_check(&mut store, &mut inputs, &opts, |tape, x| {
            let v = bins.vote(tape, x[0])?;
            let v = tape.flatten(v)?;
            let wv = tape.input(weights.clone());
            let p = tape.mul(v, wv)?;
            Ok(tape.sum_all(p))
        })
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn branch_gradcheck_to_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let cfg = HistHeadConfig {
            out_channels: 16,
            ..small_config()
        };
        let layer = HistLayer::new(&mut store, "h", cfg, &mut rng).unwrap();
        let mut inputs = vec![Tensor::rand_uniform(&[3, 4, 4], 0.1, 1.0, &mut rng)];
        let report = grad_check(
            &mut store,
            &mut inputs,
            &GradCheckOptions::default(),
            |tape, x| {
                let y = layer.forward(tape, x[0])?;
                Ok(tape.sum_all(y))
            },
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    proptest! {
        #[test]
        fn partition_of_unity(x in -2.0f64..2.0, bins in 2usize..40) {
            let (c, w) = uniform_grid(bins, -2.0, 2.0).unwrap();
            let s: f64 = c.data().iter().zip(w.data()).map(|(&m, &o)| triangle(x, m, o)).sum();
            let nonzero = c.data().iter().zip(w.data()).filter(|(&m, &o)| triangle(x, m, o) > 0.0).count();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(nonzero <= 2);
        }

        #[test]
        fn votes_in_unit_interval(x in -10.0f64..10.0, mu in -3.0f64..3.0, om in 1e-3f64..50.0) {
            let v = triangle(x, mu, om);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn histogram_mass_is_one(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            // chroma of pixels in [0.2, 1] stays within |ln 5| < 1.7
            let cfg = HistHeadConfig { bins_per_axis: 12, uv_range: (-2.0, 2.0), ..small_config() };
            let layer = HistLayer::new(&mut store, "h", cfg, &mut rng).unwrap();
            let mut tape = Tape::new(&store);
            let x = tape.input(Tensor::rand_uniform(&[3, 5, 5], 0.2, 1.0, &mut rng));
            let h = layer.histogram(&mut tape, x).unwrap();
            prop_assert!((tape.value(h).sum() - 1.0).abs() < 1e-5);
        }
    }
}
