//! Central finite-difference gradient checker.
//!
//! Each checked coordinate is perturbed by `±epsilon` and the loss
//! difference is compared with the analytic gradient using the relative
//! error `|a - n| / max(|a|, |n|, 1e-8)`. Coordinates whose perturbation
//! flips any piecewise branch of the graph (ReLU sign, pooling winner, vote
//! support, clamp) straddle a kink and are skipped rather than scored.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{AwbError, Result};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Tensors larger than this are checked on a random subset of coordinates.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
    /// Multiplies every analytic gradient; used to prove the checker fires.
    pub corrupt_scale: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            max_coords_per_tensor: 12,
            seed: 0,
            corrupt_scale: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Location and values of the worst coordinate.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

enum Target {
    Param(usize),
    Input(usize),
}

/// Checks gradients of the scalar built by `build` with respect to every
/// parameter in `params` and every tensor in `inputs`.
pub fn grad_check<F>(
    params: &mut ParamStore<f64>,
    inputs: &mut [Tensor<f64>],
    opts: &GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    let eval = |params: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new(params);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let v = tape.value(loss);
        if v.len() != 1 || !v.data()[0].is_finite() {
            return Err(AwbError::NonFinite("grad_check loss".into()));
        }
        Ok((v.data()[0], tape.kink_signature()))
    };

    let (analytic_params, analytic_inputs, sig0) = {
        let mut tape = Tape::new(params);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        if !tape.value(loss).all_finite() {
            return Err(AwbError::NonFinite("grad_check loss".into()));
        }
        let grads = tape.backward(loss)?;
        let ap: Vec<Tensor<f64>> = params
            .iter()
            .zip(grads.params())
            .map(|(p, g)| g.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        let ai: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs.iter())
            .map(|(&v, t)| {
                grads
                    .wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        if ap.iter().chain(&ai).any(|g| !g.all_finite()) {
            return Err(AwbError::NonFinite("analytic gradient".into()));
        }
        (ap, ai, tape.kink_signature())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut targets = Vec::new();
    for (i, g) in analytic_params.iter().enumerate() {
        targets.push((
            Target::Param(i),
            pick(g.len(), opts.max_coords_per_tensor, &mut rng),
        ));
    }
    for (i, g) in analytic_inputs.iter().enumerate() {
        targets.push((
            Target::Input(i),
            pick(g.len(), opts.max_coords_per_tensor, &mut rng),
        ));
    }

    let eps = opts.epsilon;
    let scale = opts.corrupt_scale.unwrap_or(1.0);
    let mut report = GradCheckReport::default();
    for (target, coords) in targets {
        for k in coords {
            let (analytic, label) = match target {
                Target::Param(i) => (
                    analytic_params[i].data()[k],
                    format!("param {}[{k}]", params.iter().nth(i).unwrap().name),
                ),
                Target::Input(i) => (analytic_inputs[i].data()[k], format!("input {i}[{k}]")),
            };
            let mut probe = |delta: f64| -> Result<(f64, u64)> {
                match target {
                    Target::Param(i) => {
                        let id = params.ids().nth(i).unwrap();
                        let orig = params.value(id).data()[k];
                        params.get_mut(id).value.data_mut()[k] = orig + delta;
                        let r = eval(params, inputs);
                        params.get_mut(id).value.data_mut()[k] = orig;
                        r
                    }
                    Target::Input(i) => {
                        let orig = inputs[i].data()[k];
                        inputs[i].data_mut()[k] = orig + delta;
                        let r = eval(params, inputs);
                        inputs[i].data_mut()[k] = orig;
                        r
                    }
                }
            };
            let (fp, sp) = probe(eps)?;
            let (fm, sm) = probe(-eps)?;
            if sp != sig0 || sm != sig0 {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let err = relative_error(analytic * scale, numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!(
                    "{label} (analytic {:.6e}, numeric {numeric:.6e})",
                    analytic * scale
                );
            }
        }
    }
    Ok(report)
}

fn pick(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = index::sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}
