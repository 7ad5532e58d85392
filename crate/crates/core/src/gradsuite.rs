//! Fixed set of gradient checks over every layer type, the losses and the
//! full tiny models, run in 64-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::backbone::{Fire, FireConfig};
use crate::error::Result;
use crate::exif::{ExifMlp, ExifRecord};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::hist::{HistBins, HistHeadConfig, HistLayer};
use crate::layers::{ConvLayer, Dense};
use crate::metrics::{IlluminantVector, TwoIlluminantLabel};
use crate::models::{ModelConfig, ModelGraph, ModelKind};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub tolerance: f64,
    /// Scales every analytic gradient; a value other than 1 must fail.
    pub corrupt_scale: Option<f64>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            corrupt_scale: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ComponentResult {
    pub component: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst: String,
    pub passed: bool,
}

pub const COMPONENTS: [&str; 15] = [
    "vote",
    "uv_histogram",
    "spp_head",
    "hist_branch",
    "conv2d",
    "fire",
    "exif_mlp",
    "color_correct",
    "loss_single",
    "loss_two_illuminant",
    "model_b",
    "model_a",
    "model_c",
    "model_a2",
    "model_c2",
];

fn exif() -> ExifRecord {
    ExifRecord {
        aperture: 2.8,
        exposure_time: 0.01,
        iso: 400.0,
        orientation: 0,
    }
}

/// Random projection to a scalar so every output coordinate matters.
fn project(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let y = tape.flatten(y)?;
    let n = tape.value(y).len();
    let w = tape.input(Tensor::randn(
        &[n],
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    ));
    let p = tape.mul(y, w)?;
    Ok(tape.sum_all(p))
}

fn small_hist(out_channels: usize) -> HistHeadConfig {
    HistHeadConfig {
        bins_per_axis: 8,
        uv_range: (-1.5, 1.5),
        out_channels,
        ..HistHeadConfig::default()
    }
}

fn check_layer(
    opts: &GradCheckOptions,
    seed: u64,
    input_shapes: &[(&[usize], f64, f64)],
    setup: impl FnOnce(
        &mut ParamStore<f64>,
        &mut ChaCha8Rng,
    ) -> Result<Box<dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>>>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let f = setup(&mut store, &mut rng)?;
    let mut inputs: Vec<Tensor<f64>> = input_shapes
        .iter()
        .map(|&(s, lo, hi)| Tensor::rand_uniform(s, lo, hi, &mut rng))
        .collect();
    grad_check(&mut store, &mut inputs, opts, |tape, x| f(tape, x))
}

fn check_model(kind: ModelKind, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut cfg = ModelConfig::tiny(kind, seed);
    cfg.hist = small_hist(512);
    cfg.exif_channels = 16;
    let mut g = ModelGraph::<f64>::new(cfg)?;
    // a positive output bias keeps every head channel on the active side of its ReLU
    for st in &g.arch.stages {
        g.params.get_mut(st.head_out.bias).value.fill(0.05);
    }
    let gt = TwoIlluminantLabel {
        left: IlluminantVector::new(0.7, 0.6, 0.3)?,
        right: IlluminantVector::new(0.4, 0.6, 0.7)?,
    };
    let gt = if kind.two_illuminant() {
        gt
    } else {
        TwoIlluminantLabel::single(gt.left)
    };
    let mut inputs = vec![Tensor::rand_uniform(
        &[3, 64, 64],
        0.1,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )];
    let opts = GradCheckOptions {
        max_coords_per_tensor: 3,
        ..opts.clone()
    };
    let arch = g.arch.clone();
    grad_check(&mut g.params, &mut inputs, &opts, |tape, x| {
        let fwd = arch.forward(tape, x[0], Some(&exif()))?;
        arch.loss(tape, &fwd, &gt)
    })
}

/// Runs one named component.
pub fn run_component(name: &str, opts: &SuiteOptions) -> Result<ComponentResult> {
    let gc = GradCheckOptions {
        seed: opts.seed,
        corrupt_scale: opts.corrupt_scale,
        ..GradCheckOptions::default()
    };
    let wide = GradCheckOptions {
        max_coords_per_tensor: 40,
        ..gc.clone()
    };
    let s = opts.seed;
    let report = match name {
        "vote" => check_layer(&wide, s, &[(&[2, 3, 3], -1.0, 1.0)], |store, _| {
            let bins = HistBins::uniform(store, "bins", 6, -1.0, 1.0)?;
            Ok(Box::new(move |tape, x| {
                let v = bins.vote(tape, x[0])?;
                project(tape, v, s + 1)
            }))
        })?,
        "uv_histogram" => check_layer(&wide, s, &[(&[3, 5, 5], 0.1, 1.0)], |store, rng| {
            let layer = HistLayer::new(store, "hist", small_hist(4), rng)?;
            Ok(Box::new(move |tape, x| {
                let h = layer.histogram(tape, x[0])?;
                project(tape, h, s + 2)
            }))
        })?,
        "spp_head" => check_layer(&gc, s, &[(&[1, 8, 8], 0.0, 0.1)], |store, rng| {
            let cfg = small_hist(16);
            let head = Dense::new(store, "head", cfg.n_hist_channels(), cfg.out_channels, rng)?;
            store.get_mut(head.bias).value.fill(0.05);
            Ok(Box::new(move |tape, x| {
                let p = tape.spp(x[0], &cfg.spp_strides)?;
                let y = head.forward(tape, p)?;
                let y = tape.relu(y);
                project(tape, y, s + 3)
            }))
        })?,
        "hist_branch" => check_layer(&gc, s, &[(&[3, 4, 4], 0.1, 1.0)], |store, rng| {
            let layer = HistLayer::new(store, "hist", small_hist(16), rng)?;
            store.get_mut(layer.head.bias).value.fill(0.05);
            Ok(Box::new(move |tape, x| {
                let y = layer.forward(tape, x[0])?;
                project(tape, y, s + 4)
            }))
        })?,
        "conv2d" => check_layer(&gc, s, &[(&[3, 7, 6], -1.0, 1.0)], |store, rng| {
            let conv = ConvLayer::new(store, "conv", 3, 4, 3, Conv2dSpec::new(2, 1), rng)?;
            Ok(Box::new(move |tape, x| {
                let y = conv.forward(tape, x[0])?;
                project(tape, y, s + 5)
            }))
        })?,
        "fire" => check_layer(&gc, s, &[(&[4, 5, 5], -1.0, 1.0)], |store, rng| {
            let cfg = FireConfig {
                squeeze: 3,
                expand1x1: 4,
                expand3x3: 4,
            };
            let fire = Fire::new(store, "fire", 4, cfg, rng)?;
            Ok(Box::new(move |tape, x| {
                let y = fire.forward(tape, x[0])?;
                project(tape, y, s + 6)
            }))
        })?,
        "exif_mlp" => check_layer(&gc, s, &[(&[4], -1.0, 1.0)], |store, rng| {
            let mlp = ExifMlp::new(store, "exif", 8, rng)?;
            Ok(Box::new(move |tape, x| {
                let y = mlp.forward(tape, x[0])?;
                project(tape, y, s + 7)
            }))
        })?,
        "color_correct" => check_layer(
            &wide,
            s,
            &[(&[3, 3, 3], 0.1, 1.0), (&[3], 0.2, 1.0)],
            |_, _| {
                Ok(Box::new(move |tape, x| {
                    let y = tape.color_correct(x[0], x[1])?;
                    project(tape, y, s + 8)
                }))
            },
        )?,
        "loss_single" => check_layer(&gc, s, &[(&[3], 0.1, 1.0)], |_, _| {
            Ok(Box::new(|tape, x| {
                let n = tape.normalize_eps(x[0], 1e-6)?;
                tape.angular_loss(n, [0.5, 0.6, 0.3])
            }))
        })?,
        "loss_two_illuminant" => {
            check_layer(&gc, s, &[(&[3], 0.1, 1.0), (&[3], 0.1, 1.0)], |_, _| {
                Ok(Box::new(|tape, x| {
                    let l = tape.angular_loss(x[0], [0.7, 0.6, 0.3])?;
                    let r = tape.angular_loss(x[1], [0.4, 0.6, 0.7])?;
                    tape.weighted_sum(&[(l, 0.5), (r, 0.5)])
                }))
            })?
        }
        "model_b" => check_model(ModelKind::B, s, &gc)?,
        "model_a" => check_model(ModelKind::A, s, &gc)?,
        "model_c" => check_model(ModelKind::C, s, &gc)?,
        "model_a2" => check_model(ModelKind::A2, s, &gc)?,
        "model_c2" => check_model(ModelKind::C2, s, &gc)?,
        other => {
            return Err(crate::AwbError::InvalidArgument(format!(
                "unknown gradcheck component `{other}`"
            )));
        }
    };
    Ok(ComponentResult {
        component: name.to_string(),
        max_rel_error: report.max_rel_error,
        checked: report.checked,
        skipped_kinks: report.skipped_kinks,
        passed: report.passes(opts.tolerance),
        worst: report.worst,
    })
}

/// Every component in [`COMPONENTS`] order.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<ComponentResult>> {
    COMPONENTS.iter().map(|c| run_component(c, opts)).collect()
}
