//! Ground-truth CSVs, dataset manifests and track classification.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{AwbError, Result};
use crate::exif::{column_indices, parse_exif_csv, write_exif_csv, ExifRecord};
use crate::metrics::{angular_error, IlluminantVector, TwoIlluminantLabel};

pub const GT_HEADER: [&str; 7] = ["image_id", "l_r", "l_g", "l_b", "r_r", "r_g", "r_b"];

/// Angular separation at or above which an image has two illuminants.
pub const TWO_ILLUMINANT_DEG: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Track {
    General,
    Indoor,
    TwoIlluminant,
}

impl std::str::FromStr for Track {
    type Err = AwbError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Track::General),
            "indoor" => Ok(Track::Indoor),
            "two-illuminant" => Ok(Track::TwoIlluminant),
            _ => Err(AwbError::InvalidArgument(format!(
                "unknown track `{s}` (general, indoor, two-illuminant)"
            ))),
        }
    }
}

impl std::fmt::Display for Track {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Track::General => "general",
            Track::Indoor => "indoor",
            Track::TwoIlluminant => "two-illuminant",
        })
    }
}

/// `true` when the two measured illuminants are at least 2 degrees apart.
/// A 1e-9 degree slack absorbs rounding in vectors built at exactly 2 degrees.
pub fn is_two_illuminant(gt: &TwoIlluminantLabel) -> Result<bool> {
    Ok(angular_error(&gt.left, &gt.right)? >= TWO_ILLUMINANT_DEG - 1e-9)
}

/// Two-illuminant if [`is_two_illuminant`], otherwise `single_track`.
pub fn classify_track(gt: &TwoIlluminantLabel, single_track: Track) -> Result<Track> {
    Ok(if is_two_illuminant(gt)? {
        Track::TwoIlluminant
    } else {
        single_track
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image_id: String,
    pub image_path: PathBuf,
    pub gt: TwoIlluminantLabel,
    pub exif: ExifRecord,
    pub track: Track,
}

pub fn parse_gt_csv(path: &Path) -> Result<BTreeMap<String, TwoIlluminantLabel>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let cols = column_indices(path, rdr.headers()?, &GT_HEADER)?;
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let err = |msg: String| AwbError::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let mut v = [0.0; 6];
        for (k, slot) in v.iter_mut().enumerate() {
            let s = row
                .get(cols[k + 1])
                .ok_or_else(|| err(format!("missing `{}`", GT_HEADER[k + 1])))?;
            *slot = s
                .parse()
                .map_err(|_| err(format!("`{}` is not a number: {s:?}", GT_HEADER[k + 1])))?;
        }
        let label = (|| {
            Ok::<_, AwbError>(TwoIlluminantLabel {
                left: IlluminantVector::new(v[0], v[1], v[2])?,
                right: IlluminantVector::new(v[3], v[4], v[5])?,
            })
        })()
        .map_err(|e| err(e.to_string()))?;
        let id = row.get(cols[0]).unwrap_or_default().to_string();
        if out.insert(id.clone(), label).is_some() {
            return Err(AwbError::DuplicateId {
                path: path.display().to_string(),
                id,
                line,
            });
        }
    }
    Ok(out)
}

pub fn write_gt_csv(path: &Path, labels: &BTreeMap<String, TwoIlluminantLabel>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(GT_HEADER)?;
    for (id, l) in labels {
        let mut row = vec![id.clone()];
        row.extend(
            l.left
                .to_array()
                .iter()
                .chain(&l.right.to_array())
                .map(|v| v.to_string()),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// A directory holding `images/{id}.ppm`, `gt.csv` and `exif.csv`.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub gt: BTreeMap<String, TwoIlluminantLabel>,
    /// Absent when the directory has no `exif.csv`.
    pub exif: Option<BTreeMap<String, ExifRecord>>,
}

impl Manifest {
    pub fn gt_path(root: &Path) -> PathBuf {
        root.join("gt.csv")
    }

    pub fn exif_path(root: &Path) -> PathBuf {
        root.join("exif.csv")
    }

    pub fn image_path(root: &Path, id: &str) -> PathBuf {
        root.join("images").join(format!("{id}.ppm"))
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(AwbError::Dataset(format!(
                "manifest {} is not a directory",
                root.display()
            )));
        }
        let gt = parse_gt_csv(&Self::gt_path(root))?;
        let exif_path = Self::exif_path(root);
        let exif = exif_path
            .exists()
            .then(|| parse_exif_csv(&exif_path))
            .transpose()?;
        Ok(Manifest {
            root: root.to_path_buf(),
            gt,
            exif,
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.gt.keys()
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    /// Valid samples in id order plus `(id, reason)` for each rejection:
    /// missing image file or missing Exif record.
    pub fn samples(
        &self,
        single_track: Track,
    ) -> Result<(Vec<LabeledSample>, Vec<(String, String)>)> {
        let mut ok = Vec::new();
        let mut rejected = Vec::new();
        for (id, gt) in &self.gt {
            let image_path = Self::image_path(&self.root, id);
            if !image_path.is_file() {
                rejected.push((
                    id.clone(),
                    format!("missing image {}", image_path.display()),
                ));
                continue;
            }
            let Some(exif) = self.exif.as_ref().and_then(|m| m.get(id)) else {
                rejected.push((id.clone(), "missing exif record".into()));
                continue;
            };
            ok.push(LabeledSample {
                image_id: id.clone(),
                image_path,
                gt: *gt,
                exif: *exif,
                track: classify_track(gt, single_track)?,
            });
        }
        for (id, why) in &rejected {
            warn!("{}: rejected {id}: {why}", self.root.display());
        }
        Ok((ok, rejected))
    }
}

/// Writes `gt.csv`, `exif.csv` and copies or writes images via `put_image`.
pub fn write_manifest(
    root: &Path,
    gt: &BTreeMap<String, TwoIlluminantLabel>,
    exif: &BTreeMap<String, ExifRecord>,
    mut put_image: impl FnMut(&str, &Path) -> Result<()>,
) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    write_gt_csv(&Manifest::gt_path(root), gt)?;
    write_exif_csv(&Manifest::exif_path(root), exif)?;
    for id in gt.keys() {
        put_image(id, &Manifest::image_path(root, id))?;
    }
    Ok(())
}
