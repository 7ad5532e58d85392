//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Built with `harness = false` so the lines are
//! always visible: `cargo test --release -p sdeawb-cli --test acceptance`.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use sdeawb_cli::commands::{cmd_predict, cmd_train};
use sdeawb_cli::config::ExperimentConfig;
use sdeawb_cli::report::Report;
use sdeawb_core::autodiff::Tape;
use sdeawb_core::data::batch::seeded_rng;
use sdeawb_core::data::expansion::{
    GtUvHistogram, DEFAULT_BLUR, DEFAULT_GRID, DEFAULT_SIGMA, MARGIN_BINS,
};
use sdeawb_core::data::{expansion_filter, LabeledSample, Track};
use sdeawb_core::exif::ExifRecord;
use sdeawb_core::gradsuite::{run_suite, SuiteOptions, COMPONENTS};
use sdeawb_core::hist::HistBins;
use sdeawb_core::metrics::{
    angular_error, gray_world, min_squared_sum_error, reproduction_error, summarize, uv_to_rgb,
    IlluminantVector, TwoIlluminantLabel,
};
use sdeawb_core::models::{Example, ModelConfig, ModelGraph, ModelKind};
use sdeawb_core::optim::ParamStore;
use sdeawb_core::synth::{generate, write_dataset, SynthConfig};
use sdeawb_core::tensor::Tensor;
use sdeawb_core::train::{mean_error, train, TrainConfig, TrainItem};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_gradient_suite() -> Outcome {
    let t = Instant::now();
    let results = run_suite(&SuiteOptions::default()).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let names: Vec<&str> = results.iter().map(|r| r.component.as_str()).collect();
    check(
        names == COMPONENTS,
        format!("components not covered exactly once: {names:?}"),
    )?;
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    for r in &results {
        eprintln!(
            "    {:<20} {:.3e} ({} coords)",
            r.component, r.max_rel_error, r.checked
        );
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !(r.max_rel_error <= 1e-4))
        .map(|r| format!("{} {:.3e} at {}", r.component, r.max_rel_error, r.worst))
        .collect();
    check(
        failed.is_empty(),
        format!("above 1e-4: {}", failed.join("; ")),
    )?;
    check(secs <= 300.0, format!("took {secs:.1} s > 300 s"))?;
    Ok(format!(
        "max rel err {worst:.2e} over {} components in {secs:.1} s",
        results.len()
    ))
}

fn votes(centers: &[f64], widths: &[f64], xs: &[f64]) -> Vec<f64> {
    let mut store = ParamStore::<f64>::new();
    let c = store.add("c", Tensor::from_slice(centers)).unwrap();
    let w = store.add("w", Tensor::from_slice(widths)).unwrap();
    let bins = HistBins {
        centers: c,
        widths: w,
    };
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::from_slice(xs));
    let v = bins.vote(&mut tape, x).unwrap();
    tape.value(v).data().to_vec()
}

fn c2_vote_properties() -> Outcome {
    let nb = 32;
    let (lo, hi) = (-1.7, 2.3);
    let delta = (hi - lo) / (nb - 1) as f64;
    let centers: Vec<f64> = (0..nb).map(|i| lo + i as f64 * delta).collect();
    let widths = vec![1.0 / delta; nb];
    let mut rng = seeded_rng(&[2, 0xacce]);
    let xs: Vec<f64> = (0..1000).map(|_| rng.random_range(lo..hi)).collect();
    let v = votes(&centers, &widths, &xs);
    let mut worst = 0.0f64;
    for (k, row) in v.chunks(nb).enumerate() {
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        check(
            row.iter().filter(|&&p| p > 0.0).count() <= 2,
            format!("x={} has more than 2 votes", xs[k]),
        )?;
    }
    check(
        worst <= 1e-6,
        format!("partition of unity off by {worst:e}"),
    )?;
    let wide: Vec<f64> = (0..1000).map(|_| rng.random_range(-10.0..10.0)).collect();
    let v2 = votes(&centers, &widths, &wide);
    check(
        v2.iter().chain(&v).all(|p| (0.0..=1.0).contains(p)),
        "vote outside [0, 1]",
    )?;
    let peak = votes(&[0.3], &[2.0], &[0.3, 0.8, -0.2, 0.5]);
    check(peak[0] == 1.0, format!("peak vote {}", peak[0]))?;
    check(
        peak[1] == 0.0 && peak[2] == 0.0,
        format!("edge votes {} {}", peak[1], peak[2]),
    )?;
    check(
        (peak[3] - 0.6).abs() <= 1e-12,
        format!("interior vote {}", peak[3]),
    )?;
    Ok(format!(
        "max |sum - 1| = {worst:.1e}; peak 1, edge 0, interior 0.6"
    ))
}

/// Kahan's formula `2 atan2(|a/|a| - b/|b||, |a/|a| + b/|b||)`.
fn kahan_angle(a: [f64; 3], b: [f64; 3]) -> f64 {
    let n = |v: [f64; 3]| {
        let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        v.map(|x| x / l)
    };
    let (a, b) = (n(a), n(b));
    let d: f64 = (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
    let s: f64 = (0..3).map(|i| (a[i] + b[i]).powi(2)).sum::<f64>().sqrt();
    (2.0 * d.atan2(s)).to_degrees()
}

fn insertion_sorted(v: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = Vec::with_capacity(v.len());
    for &x in v {
        let pos = s.iter().position(|&y| y > x).unwrap_or(s.len());
        s.insert(pos, x);
    }
    s
}

fn brute_stats(v: &[f64]) -> [f64; 4] {
    let s = insertion_sorted(v);
    let n = s.len();
    let q = |p: f64| {
        let h = (n - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = if lo + 1 < n { lo + 1 } else { lo };
        s[lo] + (h - lo as f64) * (s[hi] - s[lo])
    };
    let mut sum = 0.0;
    for x in &s {
        sum += x;
    }
    let k = n.div_ceil(4);
    let mut top = 0.0;
    for x in &s[n - k..] {
        top += x;
    }
    [
        sum / n as f64,
        q(0.5),
        (q(0.25) + 2.0 * q(0.5) + q(0.75)) / 4.0,
        top / k as f64,
    ]
}

fn c3_metric_oracles() -> Outcome {
    let mut rng = seeded_rng(&[3, 0xacce]);
    let rv = |rng: &mut rand_chacha::ChaCha8Rng| {
        IlluminantVector::new(
            rng.random_range(0.01..1.0),
            rng.random_range(0.01..1.0),
            rng.random_range(0.01..1.0),
        )
        .unwrap()
    };
    let mut worst = 0.0f64;
    let mut errs = Vec::new();
    for k in 0..1000 {
        let a = rv(&mut rng);
        // every tenth pair is nearly parallel
        let b = if k % 10 == 0 {
            a.hadamard(&IlluminantVector::new(1.0, 1.0 + 1e-7, 1.0).unwrap())
        } else {
            rv(&mut rng)
        };
        let e = angular_error(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((e - kahan_angle(a.to_array(), b.to_array())).abs());
        errs.push(e);
    }
    check(worst <= 1e-9, format!("angular error off by {worst:e} deg"))?;
    for n in [1, 2, 3, 4, 5, 7, 8, 100, 1000] {
        let s = summarize(&errs[..n], false).map_err(|e| e.to_string())?;
        let o = brute_stats(&errs[..n]);
        check(
            [s.mean, s.median, s.trimean, s.worst25_mean] == o,
            format!("summarize n={n}: {s:?} vs {o:?}"),
        )?;
    }
    for _ in 0..1000 {
        let p = TwoIlluminantLabel {
            left: rv(&mut rng),
            right: rv(&mut rng),
        };
        let g = TwoIlluminantLabel {
            left: rv(&mut rng),
            right: rv(&mut rng),
        };
        let sq = |a: &IlluminantVector, b: &IlluminantVector| angular_error(a, b).unwrap().powi(2);
        let enumerated = [(p.left, p.right), (p.right, p.left)]
            .iter()
            .map(|(l, r)| sq(l, &g.left) + sq(r, &g.right))
            .fold(f64::INFINITY, f64::min);
        let got = min_squared_sum_error(&p, &g).map_err(|e| e.to_string())?;
        check(
            got == enumerated,
            format!("min squared sum {got} vs {enumerated}"),
        )?;
    }
    let (p, g) = (rv(&mut rng), rv(&mut rng));
    let base = reproduction_error(&p, &g).map_err(|e| e.to_string())?;
    let mut drift = 0.0f64;
    for _ in 0..100 {
        let s = 10f64.powf(rng.random_range(-6.0..6.0));
        drift = drift.max((reproduction_error(&p.scaled(s), &g).unwrap() - base).abs());
        drift = drift.max((reproduction_error(&p, &g.scaled(s)).unwrap() - base).abs());
    }
    check(
        drift <= 1e-9,
        format!("reproduction error not scale invariant: {drift:e}"),
    )?;
    Ok(format!(
        "angle vs oracle {worst:.1e} deg; summarize and min-squared exact; scale drift {drift:.1e}"
    ))
}

fn sample(id: String, gt: TwoIlluminantLabel, track: Track) -> LabeledSample {
    LabeledSample {
        image_id: id,
        image_path: Default::default(),
        gt,
        exif: ExifRecord {
            aperture: 2.0,
            exposure_time: 0.01,
            iso: 100.0,
            orientation: 0,
        },
        track,
    }
}

/// Direct 2D-convolution histogram oracle over the same padded grid.
fn oracle_accept(
    trainset: &[LabeledSample],
    cands: &[LabeledSample],
    bins: usize,
) -> (Vec<bool>, Vec<f64>) {
    let uv = |c: &IlluminantVector| ((c.g / c.r).ln(), (c.g / c.b).ln());
    let ills = |s: &LabeledSample| {
        if s.track == Track::TwoIlluminant {
            vec![s.gt.left, s.gt.right]
        } else {
            vec![s.gt.left]
        }
    };
    let pts: Vec<(f64, f64)> = trainset.iter().flat_map(ills).map(|c| uv(&c)).collect();
    let axis = |f: &dyn Fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let w = ((hi - lo) / (bins - 2 * MARGIN_BINS - 1) as f64).max(1e-3);
        (lo - (MARGIN_BINS as f64 + 0.5) * w, w)
    };
    let (u0, uw) = axis(&|p| p.0);
    let (v0, vw) = axis(&|p| p.1);
    let cell = |(u, v): (f64, f64)| {
        let i = ((u - u0) / uw).floor();
        let j = ((v - v0) / vw).floor();
        (i >= 0.0 && j >= 0.0 && i < bins as f64 && j < bins as f64)
            .then(|| (i as usize, j as usize))
    };
    let mut raw = vec![vec![0.0; bins]; bins];
    for &p in &pts {
        let (i, j) = cell(p).unwrap();
        raw[i][j] += 1.0;
    }
    let g: Vec<f64> = (-3..=3)
        .map(|x: i32| (-(x * x) as f64 / (2.0 * 1.5 * 1.5)).exp())
        .collect();
    let gs: f64 = g.iter().sum();
    let mut grid = vec![vec![0.0; bins]; bins];
    let mut total = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            for (a, ga) in g.iter().enumerate() {
                for (b, gb) in g.iter().enumerate() {
                    let (si, sj) = (i as isize + a as isize - 3, j as isize + b as isize - 3);
                    if si >= 0 && sj >= 0 && (si as usize) < bins && (sj as usize) < bins {
                        grid[i][j] += ga * gb / (gs * gs) * raw[si as usize][sj as usize];
                    }
                }
            }
            total += grid[i][j];
        }
    }
    let accept = cands
        .iter()
        .map(|c| {
            ills(c)
                .iter()
                .all(|il| cell(uv(il)).is_some_and(|(i, j)| grid[i][j] > 0.0))
        })
        .collect();
    (accept, vec![total, pts.len() as f64])
}

fn c4_expansion_oracle() -> Outcome {
    let mut worst_mass = 0.0f64;
    let mut accepted = Vec::new();
    for pool in 0..5u64 {
        let mut rng = seeded_rng(&[4, pool]);
        let (cu, cv) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let label = |rng: &mut rand_chacha::ChaCha8Rng, spread: f64| {
            let l = uv_to_rgb(
                cu + rng.random_range(-spread..spread),
                cv + rng.random_range(-spread..spread),
            );
            if rng.random_bool(0.2) {
                let r = uv_to_rgb(
                    cu + rng.random_range(-spread..spread),
                    cv + rng.random_range(-spread..spread),
                );
                TwoIlluminantLabel { left: l, right: r }
            } else {
                TwoIlluminantLabel::single(l)
            }
        };
        let mk = |i: usize, gt: TwoIlluminantLabel, pfx: &str| {
            let track = sdeawb_core::data::classify_track(&gt, Track::General).unwrap();
            sample(format!("{pfx}{i}"), gt, track)
        };
        let ts: Vec<LabeledSample> = (0..60)
            .map(|i| {
                let g = label(&mut rng, 0.3);
                mk(i, g, "t")
            })
            .collect();
        let cands: Vec<LabeledSample> = (0..200)
            .map(|i| {
                let g = label(&mut rng, 0.9);
                mk(i, g, "c")
            })
            .collect();
        let hist = GtUvHistogram::build(&ts, DEFAULT_GRID, DEFAULT_BLUR, DEFAULT_SIGMA)
            .map_err(|e| e.to_string())?;
        let got = expansion_filter(&cands, &hist, 0.0).map_err(|e| e.to_string())?;
        let got_ids: BTreeSet<&str> = got.iter().map(|s| s.image_id.as_str()).collect();
        let (want, mass) = oracle_accept(&ts, &cands, DEFAULT_GRID);
        let want_ids: BTreeSet<&str> = cands
            .iter()
            .zip(&want)
            .filter(|(_, &w)| w)
            .map(|(c, _)| c.image_id.as_str())
            .collect();
        check(
            got_ids == want_ids,
            format!(
                "pool {pool}: accept sets differ ({} vs {})",
                got_ids.len(),
                want_ids.len()
            ),
        )?;
        let own = expansion_filter(&ts, &hist, 0.0).map_err(|e| e.to_string())?;
        check(
            own.len() == ts.len(),
            format!(
                "pool {pool}: trainset rejects {} of itself",
                ts.len() - own.len()
            ),
        )?;
        let lib_mass: f64 = hist.grid.data().iter().sum();
        worst_mass = worst_mass
            .max((lib_mass - mass[1]).abs())
            .max((mass[0] - mass[1]).abs());
        accepted.push(got.len());
    }
    check(
        worst_mass <= 1e-6,
        format!("blur mass drift {worst_mass:e}"),
    )?;
    Ok(format!(
        "accept sets equal (accepted {accepted:?} of 200); mass drift {worst_mass:.1e}"
    ))
}

fn items(cfg: &SynthConfig) -> Vec<TrainItem<f32>> {
    generate(cfg)
        .unwrap()
        .iter()
        .map(|s| TrainItem {
            id: s.id.clone(),
            example: s.example(),
            track: if cfg.two_illuminant {
                Track::TwoIlluminant
            } else {
                Track::General
            },
        })
        .collect()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        learning_rate: 3e-4,
        seed: 0,
    }
}

fn c5_synthetic_learning() -> Outcome {
    let t = Instant::now();
    let train_set = items(&SynthConfig {
        count: 512,
        seed: 1,
        ..Default::default()
    });
    let held_out: Vec<Example<f32>> = items(&SynthConfig {
        count: 128,
        seed: 2,
        ..Default::default()
    })
    .into_iter()
    .map(|i| i.example)
    .collect();
    let gw = held_out
        .iter()
        .map(|e| angular_error(&gray_world(&e.image).unwrap(), &e.gt.left).unwrap())
        .sum::<f64>()
        / held_out.len() as f64;
    let run = |kind| {
        let mut m = ModelGraph::<f32>::new(ModelConfig::tiny(kind, 0)).unwrap();
        let logs = train(&mut m, &train_set, &[], &train_cfg(20), None, |_, _| Ok(())).unwrap();
        (mean_error(&m, &held_out).unwrap(), logs)
    };
    let (b_err, b_logs) = run(ModelKind::B);
    let (a_err, _) = run(ModelKind::A);
    let secs = t.elapsed().as_secs_f64();
    let (l1, l10) = (b_logs[0].train_loss, b_logs[9].train_loss);
    let detail = format!(
        "B {b_err:.3} deg, A {a_err:.3} deg, Gray World {gw:.3} deg, B loss {l1:.2} -> {l10:.2} at epoch 10, {secs:.0} s"
    );
    check(b_err < 3.0, format!("B held-out {b_err:.3} >= 3; {detail}"))?;
    check(
        b_err < gw,
        format!("B not better than Gray World; {detail}"),
    )?;
    check(
        a_err <= b_err + 0.5,
        format!("A worse than B + 0.5; {detail}"),
    )?;
    check(
        l10 < 0.5 * l1,
        format!("epoch-10 loss not below half of epoch 1; {detail}"),
    )?;
    check(secs <= 900.0, format!("over 15 min; {detail}"))?;
    Ok(detail)
}

fn c6_two_illuminant() -> Outcome {
    let data = items(&SynthConfig {
        count: 128,
        two_illuminant: true,
        seed: 6,
        ..Default::default()
    });
    let mut m = ModelGraph::<f32>::new(ModelConfig::tiny(ModelKind::A2, 0)).unwrap();
    let mut bad = Vec::new();
    let logs = train(&mut m, &data, &[], &train_cfg(15), None, |l, m| {
        for it in &data {
            let p = m.predict(&it.example.image, it.example.exif.as_ref())?;
            for v in [Some(p.illuminant), p.second_illuminant] {
                match v {
                    Some(v)
                        if (v.norm() - 1.0).abs() <= 1e-4
                            && v.to_array().iter().all(|&c| c >= 0.0) => {}
                    other => bad.push(format!("epoch {} {}: {other:?}", l.epoch, it.id)),
                }
            }
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let (l1, l15) = (logs[0].train_loss, logs[14].train_loss);
    let detail = format!(
        "loss {l1:.3} -> {l15:.3} deg ({:.0}% drop)",
        100.0 * (1.0 - l15 / l1)
    );
    check(
        bad.is_empty(),
        format!(
            "{} invalid outputs, first {}",
            bad.len(),
            bad.first().cloned().unwrap_or_default()
        ),
    )?;
    check(
        l15 <= 0.5 * l1,
        format!("loss reduced by less than 50%: {detail}"),
    )?;
    Ok(detail)
}

fn c7_determinism(dir: &Path) -> Outcome {
    let ds = dir.join("ds");
    write_dataset(
        &ds,
        &SynthConfig {
            count: 24,
            seed: 7,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let run = |name: &str| {
        let mut cfg = ExperimentConfig::default();
        cfg.model.kind = ModelKind::A;
        cfg.model.seed = 5;
        cfg.train.epochs = Some(2);
        cfg.train.batch_size = 8;
        cfg.train.augment = false;
        cfg.data.trainset1 = Some(ds.clone());
        cfg.data.val_split = 0.25;
        cfg.output.checkpoint_dir = dir.join(name);
        cfg.validate().unwrap();
        cmd_train(&cfg, false).unwrap();
        fs::read(dir.join(name).join("final.ckpt")).unwrap()
    };
    let (a, b) = (run("run1"), run("run2"));
    check(a == b, "seeded runs produced different checkpoints")?;
    let path = dir.join("run1/final.ckpt");
    let m = ModelGraph::<f32>::load(&path).map_err(|e| e.to_string())?;
    check(
        m.to_bytes().map_err(|e| e.to_string())? == a,
        "checkpoint round trip changed bytes",
    )?;
    let m64 =
        ModelGraph::<f64>::new(ModelConfig::tiny(ModelKind::C2, 9)).map_err(|e| e.to_string())?;
    let bytes = m64.to_bytes().map_err(|e| e.to_string())?;
    let back = ModelGraph::<f64>::from_bytes(&bytes).map_err(|e| e.to_string())?;
    check(
        back.to_bytes().unwrap() == bytes,
        "f64 round trip changed bytes",
    )?;
    let out = dir.join("pred.csv");
    cmd_predict(&path, &ds, &out, false).map_err(|e| e.to_string())?;
    let first = fs::read(&out).unwrap();
    cmd_predict(&path, &ds, &out, true).map_err(|e| e.to_string())?;
    check(
        fs::read(&out).unwrap() == first,
        "predict is not idempotent",
    )?;
    Ok(format!(
        "{} byte checkpoints identical; round trip exact; predict idempotent",
        a.len()
    ))
}

fn c8_report_bookkeeping(dir: &Path) -> Outcome {
    let rows: [(&str, &[(&str, f64)]); 3] = [
        (
            "general",
            &[("recovery_mean", 1.914), ("recovery_worst25", 4.979)],
        ),
        ("indoor", &[("recovery_mean", 2.541)]),
        ("two-illuminant", &[("mean_squared", 31.026)]),
    ];
    for (track, vals) in rows {
        let mut r = Report::default();
        for &(m, v) in vals {
            r.push(m, v);
        }
        let p = dir.join(format!("{track}.csv"));
        r.write_csv(&p).map_err(|e| e.to_string())?;
        let text = fs::read_to_string(&p).unwrap();
        let back = Report::read_csv(&p).map_err(|e| e.to_string())?;
        check(back == r, format!("{track}: round trip changed values"))?;
        for &(m, v) in vals {
            check(
                text.contains(&format!("{m},{v}")),
                format!("{track}: `{m},{v}` not in CSV"),
            )?;
        }
    }
    Ok("1.914 / 4.979 / 2.541 / 31.026 round-trip exactly".into())
}

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 gradient suite", Box::new(c1_gradient_suite)),
        ("2 vote properties", Box::new(c2_vote_properties)),
        ("3 metric oracles", Box::new(c3_metric_oracles)),
        ("4 expansion oracle", Box::new(c4_expansion_oracle)),
        ("5 synthetic learning", Box::new(c5_synthetic_learning)),
        ("6 two-illuminant learning", Box::new(c6_two_illuminant)),
        ("7 determinism", Box::new(|| c7_determinism(dir.path()))),
        (
            "8 report bookkeeping",
            Box::new(|| c8_report_bookkeeping(dir.path())),
        ),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, f) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let t = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match out {
            Ok(d) => println!("criterion {name}: PASS ({d}) [{secs:.1} s]"),
            Err(e) => {
                failed += 1;
                println!("criterion {name}: FAIL ({e}) [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
