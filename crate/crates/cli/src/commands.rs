//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};

use sdeawb_core::data::batch::split_indices;
use sdeawb_core::data::dataset::{is_two_illuminant, write_manifest};
use sdeawb_core::data::expansion::{DEFAULT_BLUR, DEFAULT_SIGMA};
use sdeawb_core::data::{
    expansion_filter, load_image, save_image, GtUvHistogram, LabeledSample, Manifest, Track,
};
use sdeawb_core::gradsuite::{run_component, SuiteOptions, COMPONENTS, DEFAULT_TOLERANCE};
use sdeawb_core::metrics::{
    angular_error, gray_world, min_squared_sum_error, reproduction_error, summarize,
    two_illum_error, IlluminantVector,
};
use sdeawb_core::models::{AnyModel, Example, ModelGraph};
use sdeawb_core::synth::{write_dataset, SynthConfig};
use sdeawb_core::tensor::{Real, Tensor};
use sdeawb_core::train::{train, EpochLog, TrainItem};

use crate::config::{ExperimentConfig, Precision};
use crate::error::{CliError, Result};
use crate::predictions::{read_predictions, write_predictions, PredictionRecord};
use crate::report::Report;

/// Prefix given to trainset2 ids in a merged set.
pub const T2_PREFIX: &str = "t2_";

/// Refuses to replace an existing file unless `force` is set.
pub fn guard_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "refusing to overwrite {} (pass --force)",
            path.display()
        )));
    }
    Ok(())
}

/// Refuses a non-empty directory unless `force` is set, then creates it.
pub fn guard_dir(path: &Path, force: bool) -> Result<()> {
    if path.is_dir() && fs::read_dir(path)?.next().is_some() && !force {
        return Err(CliError::Usage(format!(
            "refusing to write into non-empty {} (pass --force)",
            path.display()
        )));
    }
    fs::create_dir_all(path)?;
    Ok(())
}

fn open_samples(root: &Path, track: Track) -> Result<Vec<LabeledSample>> {
    let m = Manifest::open(root)?;
    let (ok, rejected) = m.samples(track)?;
    if !rejected.is_empty() {
        warn!("{}: {} samples rejected", root.display(), rejected.len());
    }
    Ok(ok)
}

fn list_ids<'a>(ids: impl IntoIterator<Item = &'a String>) -> String {
    let ids: Vec<&str> = ids.into_iter().map(String::as_str).collect();
    if ids.len() > 20 {
        format!("{} ... ({} total)", ids[..20].join(", "), ids.len())
    } else {
        ids.join(", ")
    }
}

/// Result of merging trainset1 with the accepted part of trainset2.
pub struct Expansion {
    pub merged: Vec<LabeledSample>,
    pub hist: Option<GtUvHistogram>,
    pub trainset1: usize,
    pub candidates: usize,
    pub accepted: usize,
}

/// Trainset1 samples followed by the trainset2 candidates that pass the
/// chroma coverage filter, the latter with ids prefixed by [`T2_PREFIX`].
pub fn expand(cfg: &ExperimentConfig) -> Result<Expansion> {
    let ts1 = cfg
        .data
        .trainset1
        .as_ref()
        .ok_or_else(|| CliError::Config("data.trainset1 is required".into()))?;
    let mut merged = open_samples(ts1, cfg.train.track)?;
    if merged.is_empty() {
        return Err(CliError::Data(format!(
            "trainset1 {} has no usable samples",
            ts1.display()
        )));
    }
    let trainset1 = merged.len();
    let Some(ts2) = &cfg.data.trainset2 else {
        return Ok(Expansion {
            merged,
            hist: None,
            trainset1,
            candidates: 0,
            accepted: 0,
        });
    };
    let hist = GtUvHistogram::build(&merged, cfg.data.grid_bins, DEFAULT_BLUR, DEFAULT_SIGMA)?;
    let cands = open_samples(ts2, cfg.train.track)?;
    let accepted = expansion_filter(&cands, &hist, cfg.data.expansion_threshold)?;
    info!(
        "expansion accepted {} of {} candidates",
        accepted.len(),
        cands.len()
    );
    let n_acc = accepted.len();
    merged.extend(accepted.into_iter().map(|mut s| {
        s.image_id = format!("{T2_PREFIX}{}", s.image_id);
        s
    }));
    Ok(Expansion {
        merged,
        hist: Some(hist),
        trainset1,
        candidates: cands.len(),
        accepted: n_acc,
    })
}

pub fn cmd_prepare(cfg: &ExperimentConfig, force: bool) -> Result<Report> {
    let out =
        cfg.output.prepared_dir.as_ref().ok_or_else(|| {
            CliError::Config("output.prepared_dir is required for prepare".into())
        })?;
    let exp = expand(cfg)?;
    guard_dir(out, force)?;
    let gt = exp
        .merged
        .iter()
        .map(|s| (s.image_id.clone(), s.gt))
        .collect();
    let exif = exp
        .merged
        .iter()
        .map(|s| (s.image_id.clone(), s.exif))
        .collect();
    let src: BTreeMap<&str, &Path> = exp
        .merged
        .iter()
        .map(|s| (s.image_id.as_str(), s.image_path.as_path()))
        .collect();
    write_manifest(out, &gt, &exif, |id, dst| {
        fs::copy(src[id], dst)?;
        Ok(())
    })?;
    let mut rep = Report::default();
    rep.push("trainset1", exp.trainset1 as f64);
    rep.push("trainset2_candidates", exp.candidates as f64);
    rep.push("trainset2_accepted", exp.accepted as f64);
    rep.push("merged", exp.merged.len() as f64);
    if let Some(h) = &exp.hist {
        save_image(&out.join("uv_histogram.ppm"), &h.to_image(), 255)?;
    }
    let report_path = cfg
        .output
        .report
        .clone()
        .unwrap_or_else(|| out.join("prepare_report.csv"));
    guard_file(&report_path, force)?;
    rep.write_csv(&report_path)?;
    print!("{}", rep.to_table());
    Ok(rep)
}

fn load_examples<T: Real>(samples: &[LabeledSample]) -> Result<Vec<Example<T>>> {
    samples
        .iter()
        .map(|s| {
            Ok(Example {
                image: load_image(&s.image_path)?,
                exif: Some(s.exif),
                gt: s.gt,
            })
        })
        .collect()
}

const LOG_HEADER: &str = "epoch,train_loss,val_error,skipped\n";

fn write_log(path: &Path, logs: &[EpochLog]) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(LOG_HEADER.as_bytes())?;
    for l in logs {
        let val = l.val_error.map_or(String::new(), |v| v.to_string());
        writeln!(f, "{},{},{},{}", l.epoch, l.train_loss, val, l.skipped)?;
    }
    Ok(())
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Trains the configured model; returns the per-epoch log. Writes
/// `train_log.csv`, periodic `epoch_XXXX.ckpt` files and `final.ckpt`.
pub fn cmd_train(cfg: &ExperimentConfig, force: bool) -> Result<Vec<EpochLog>> {
    let exp = expand(cfg)?;
    let kind = cfg.model.kind;
    let samples: Vec<LabeledSample> = if kind.two_illuminant() {
        exp.merged
    } else {
        let (keep, drop): (Vec<_>, Vec<_>) = exp
            .merged
            .into_iter()
            .partition(|s| s.track != Track::TwoIlluminant);
        if !drop.is_empty() {
            warn!(
                "{} two-illuminant samples skipped for single-illuminant model {kind}",
                drop.len()
            );
        }
        keep
    };
    let dir = &cfg.output.checkpoint_dir;
    let final_path = dir.join("final.ckpt");
    let log_path = dir.join("train_log.csv");
    if (final_path.exists() || log_path.exists()) && !force {
        return Err(CliError::Usage(format!(
            "{} already holds a training run (pass --force)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    match cfg.model.precision {
        Precision::F32 => train_typed::<f32>(cfg, &samples, dir),
        Precision::F64 => train_typed::<f64>(cfg, &samples, dir),
    }
}

fn train_typed<T: Real>(
    cfg: &ExperimentConfig,
    samples: &[LabeledSample],
    dir: &Path,
) -> Result<Vec<EpochLog>> {
    let (tr, va) = split_indices(samples.len(), cfg.data.val_split, cfg.model.seed)?;
    if tr.is_empty() {
        return Err(CliError::Data(
            "no training samples after the validation split".into(),
        ));
    }
    let examples = load_examples::<T>(samples)?;
    let items: Vec<TrainItem<T>> = tr
        .iter()
        .map(|&i| TrainItem {
            id: samples[i].image_id.clone(),
            example: examples[i].clone(),
            track: samples[i].track,
        })
        .collect();
    let val: Vec<Example<T>> = va.iter().map(|&i| examples[i].clone()).collect();
    info!(
        "training {} on {} samples, validating on {}",
        cfg.model.kind,
        items.len(),
        val.len()
    );
    let mut model = ModelGraph::<T>::new(cfg.model_config())?;
    let aug = cfg.train.augment.then(|| cfg.augment_config());
    let every = cfg.train.checkpoint_every;
    let log_path = dir.join("train_log.csv");
    let mut so_far = Vec::new();
    let logs = train(
        &mut model,
        &items,
        &val,
        &cfg.train_config(),
        aug.as_ref(),
        |l, m| {
            so_far.push(l.clone());
            write_log(&log_path, &so_far)?;
            if every > 0 && l.epoch % every == 0 {
                m.save(&dir.join(checkpoint_name(l.epoch)))?;
            }
            Ok(())
        },
    )?;
    model.save(&dir.join("final.ckpt"))?;
    Ok(logs)
}

/// Predicts every image in `manifest` with the checkpoint.
pub fn cmd_predict(
    checkpoint: &Path,
    manifest: &Path,
    out: &Path,
    force: bool,
) -> Result<Vec<PredictionRecord>> {
    guard_file(out, force)?;
    let model = AnyModel::load(checkpoint)?;
    let kind = model.kind();
    let m = Manifest::open(manifest)?;
    let mut two = Vec::new();
    for (id, gt) in &m.gt {
        if is_two_illuminant(gt)? {
            two.push(id.clone());
        }
    }
    if kind.two_illuminant() && two.is_empty() && !m.is_empty() {
        return Err(CliError::Usage(format!(
            "two-illuminant model {kind} needs a two-illuminant manifest; {} has none",
            manifest.display()
        )));
    }
    if !kind.two_illuminant() && !two.is_empty() {
        return Err(CliError::Usage(format!(
            "single-illuminant model {kind} cannot predict two-illuminant images: {}",
            list_ids(&two)
        )));
    }
    let missing_img: Vec<String> = m
        .ids()
        .filter(|id| !Manifest::image_path(manifest, id).is_file())
        .cloned()
        .collect();
    if !missing_img.is_empty() {
        return Err(CliError::Data(format!(
            "missing images for: {}",
            list_ids(&missing_img)
        )));
    }
    let exif_of = |id: &str| m.exif.as_ref().and_then(|e| e.get(id)).copied();
    if kind.uses_exif() {
        let missing: Vec<String> = m
            .ids()
            .filter(|id| exif_of(id).is_none())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(CliError::Data(format!(
                "model {kind} needs exif; missing for: {}",
                list_ids(&missing)
            )));
        }
    }
    let mut recs = Vec::with_capacity(m.len());
    for id in m.ids() {
        let image: Tensor<f32> = load_image(&Manifest::image_path(manifest, id))?;
        let exif = if kind.uses_exif() { exif_of(id) } else { None };
        let p = model.predict(&image, exif.as_ref())?;
        recs.push(PredictionRecord {
            image_id: id.clone(),
            left: p.illuminant,
            right: p.second_illuminant,
        });
    }
    write_predictions(out, &recs)?;
    info!("wrote {} predictions to {}", recs.len(), out.display());
    Ok(recs)
}

/// Metric report of `pred` against `gt` for one track.
pub fn evaluate(pred: &Path, gt: &Path, track: Track) -> Result<Report> {
    let preds = read_predictions(pred)?;
    let gts = sdeawb_core::data::dataset::parse_gt_csv(gt)?;
    if gts.is_empty() {
        return Err(CliError::Data(format!("{} has no rows", gt.display())));
    }
    let missing: Vec<&String> = gts.keys().filter(|id| !preds.contains_key(*id)).collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "no prediction for: {}",
            list_ids(missing)
        )));
    }
    let mut rep = Report::default();
    rep.push("count", gts.len() as f64);
    if track == Track::TwoIlluminant {
        let mut sq = Vec::new();
        let mut err = Vec::new();
        for (id, g) in &gts {
            let p = preds[id].label();
            sq.push(min_squared_sum_error(&p, g)?);
            err.push(two_illum_error(&p, g)?);
        }
        rep.push("mean_squared", sq.iter().sum::<f64>() / sq.len() as f64);
        let s = summarize(&err, false)?;
        rep.push("error_mean", s.mean);
        rep.push("error_median", s.median);
        rep.push("error_trimean", s.trimean);
    } else {
        let mut rec = Vec::new();
        let mut rep_err = Vec::new();
        for (id, g) in &gts {
            let p = preds[id].left;
            rec.push(angular_error(&p, &g.left)?);
            rep_err.push(reproduction_error(&p, &g.left)?);
        }
        rep.push_stats("recovery", &summarize(&rec, false)?);
        rep.push_stats("reproduction", &summarize(&rep_err, false)?);
    }
    Ok(rep)
}

pub fn cmd_eval(
    pred: &Path,
    gt: &Path,
    track: Track,
    out: Option<&Path>,
    force: bool,
) -> Result<Report> {
    if let Some(o) = out {
        guard_file(o, force)?;
    }
    let rep = evaluate(pred, gt, track)?;
    print!("{}", rep.to_table());
    if let Some(o) = out {
        rep.write_csv(o)?;
    }
    Ok(rep)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum BaselineMethod {
    Grayworld,
    Const,
}

/// Normalized mean of the normalized ground-truth vectors (both halves).
pub fn const_illuminant(trainset: &Path) -> Result<IlluminantVector> {
    let m = Manifest::open(trainset)?;
    if m.is_empty() {
        return Err(CliError::Data(format!(
            "trainset {} is empty",
            trainset.display()
        )));
    }
    let mut acc = [0.0; 3];
    for gt in m.gt.values() {
        for v in [gt.left, gt.right] {
            for (a, x) in acc.iter_mut().zip(v.normalized().to_array()) {
                *a += x;
            }
        }
    }
    Ok(IlluminantVector::from_array(acc)?.normalized())
}

pub fn cmd_baseline(
    method: BaselineMethod,
    manifest: &Path,
    trainset: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<Vec<PredictionRecord>> {
    guard_file(out, force)?;
    let constant = match (method, trainset) {
        (BaselineMethod::Const, None) => {
            return Err(CliError::Usage(
                "the const baseline needs --trainset".into(),
            ));
        }
        (BaselineMethod::Const, Some(t)) => Some(const_illuminant(t)?),
        (BaselineMethod::Grayworld, _) => None,
    };
    let m = Manifest::open(manifest)?;
    let mut recs = Vec::with_capacity(m.len());
    for id in m.ids() {
        let left = match constant {
            Some(c) => c,
            None => {
                let image: Tensor<f64> = load_image(&Manifest::image_path(manifest, id))?;
                gray_world(&image)?
            }
        };
        recs.push(PredictionRecord {
            image_id: id.clone(),
            left,
            right: None,
        });
    }
    write_predictions(out, &recs)?;
    Ok(recs)
}

/// Runs the selected (default: all) gradient checks. Fails with a numerical
/// error when any component exceeds the tolerance.
pub fn cmd_gradcheck(
    components: &[String],
    seed: u64,
    corrupt_scale: Option<f64>,
    out: Option<&Path>,
    force: bool,
) -> Result<Vec<sdeawb_core::gradsuite::ComponentResult>> {
    if let Some(o) = out {
        guard_file(o, force)?;
    }
    let names: Vec<String> = if components.is_empty() {
        COMPONENTS.iter().map(|s| s.to_string()).collect()
    } else {
        components.to_vec()
    };
    for n in &names {
        if !COMPONENTS.contains(&n.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown component `{n}` (one of {})",
                COMPONENTS.join(", ")
            )));
        }
    }
    let opts = SuiteOptions {
        seed,
        tolerance: DEFAULT_TOLERANCE,
        corrupt_scale,
    };
    let mut results = Vec::new();
    println!(
        "{:<20} {:>12} {:>8} {:>6}  status",
        "component", "max_rel_err", "checked", "kinks"
    );
    for n in &names {
        let r = run_component(n, &opts)?;
        println!(
            "{:<20} {:>12.3e} {:>8} {:>6}  {}",
            r.component,
            r.max_rel_error,
            r.checked,
            r.skipped_kinks,
            if r.passed { "PASS" } else { "FAIL" }
        );
        results.push(r);
    }
    if let Some(o) = out {
        let mut w = csv::Writer::from_path(o)?;
        w.write_record([
            "component",
            "max_rel_error",
            "checked",
            "skipped_kinks",
            "passed",
            "worst",
        ])?;
        for r in &results {
            w.write_record([
                r.component.clone(),
                r.max_rel_error.to_string(),
                r.checked.to_string(),
                r.skipped_kinks.to_string(),
                r.passed.to_string(),
                r.worst.clone(),
            ])?;
        }
        w.flush()?;
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.component.as_str())
        .collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::Numerical(format!(
            "gradient check above {DEFAULT_TOLERANCE:e}: {}",
            failed.join(", ")
        )))
    }
}

pub fn cmd_synth(out: &Path, cfg: &SynthConfig, force: bool) -> Result<usize> {
    guard_dir(out, force)?;
    let n = write_dataset(out, cfg)?.len();
    info!("wrote {n} synthetic scenes to {}", out.display());
    Ok(n)
}

/// Default config path for commands that accept one.
pub fn config_or_default(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}
