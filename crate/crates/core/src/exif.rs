//! Exif records, their normalization and the two-layer MLP branch.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{AwbError, Result};
use crate::layers::Dense;
use crate::optim::ParamStore;
use crate::tensor::{Real, Tensor};

pub const EXIF_HEADER: [&str; 5] = [
    "image_id",
    "aperture",
    "exposure_time",
    "iso",
    "orientation",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExifRecord {
    /// f-number.
    pub aperture: f64,
    /// Seconds.
    pub exposure_time: f64,
    pub iso: f64,
    /// Clockwise quarter turns, 0..=3.
    pub orientation: u8,
}

impl ExifRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("aperture", self.aperture),
            ("exposure_time", self.exposure_time),
            ("iso", self.iso),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(AwbError::domain(
                    "exif",
                    format!("{name} must be finite and positive, got {v}"),
                ));
            }
        }
        if self.orientation > 3 {
            return Err(AwbError::domain(
                "exif",
                format!("orientation must be in 0..=3, got {}", self.orientation),
            ));
        }
        Ok(())
    }
}

/// Quarter-turn count for a standard Exif orientation tag (1..=8); mirrored
/// codes map to their rotation.
pub fn quarter_turns_from_tag(tag: u16) -> Option<u8> {
    match tag {
        1 | 2 => Some(0),
        6 | 5 => Some(1),
        3 | 4 => Some(2),
        8 | 7 => Some(3),
        _ => None,
    }
}

/// `[log2 aperture, log2 exposure, log2(iso / 100), orientation / 3]`.
pub fn normalize_exif(rec: &ExifRecord) -> Result<[f64; 4]> {
    rec.validate()?;
    Ok([
        rec.aperture.log2(),
        rec.exposure_time.log2(),
        (rec.iso / 100.0).log2(),
        rec.orientation as f64 / 3.0,
    ])
}

/// Dense 4 -> 4, ReLU, dense 4 -> `out`, ReLU.
#[derive(Clone, Debug)]
pub struct ExifMlp {
    pub fc1: Dense,
    pub fc2: Dense,
}

impl ExifMlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ExifMlp {
            fc1: Dense::new(store, &format!("{name}.fc1"), 4, 4, rng)?,
            fc2: Dense::new(store, &format!("{name}.fc2"), 4, out, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, feature: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, feature)?;
        let h = tape.relu(h);
        let y = self.fc2.forward(tape, h)?;
        Ok(tape.relu(y))
    }

    /// Normalizes `rec` and runs the MLP.
    pub fn forward_record<T: Real>(&self, tape: &mut Tape<'_, T>, rec: &ExifRecord) -> Result<Var> {
        let f = normalize_exif(rec)?;
        let x = tape.input(Tensor::from_slice(&f.map(T::lit)));
        self.forward(tape, x)
    }
}

/// Seconds from `"1/N"` or a decimal.
pub fn parse_exposure(s: &str) -> Option<f64> {
    let s = s.trim();
    match s.split_once('/') {
        Some((n, d)) => {
            let (n, d): (f64, f64) = (n.trim().parse().ok()?, d.trim().parse().ok()?);
            (d != 0.0).then(|| n / d)
        }
        None => s.parse().ok(),
    }
}

/// Column positions of `names` in a CSV header.
pub(crate) fn column_indices(
    path: &Path,
    header: &csv::StringRecord,
    names: &[&str],
) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|&name| {
            header
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| AwbError::MissingColumn {
                    path: path.display().to_string(),
                    column: name.to_string(),
                })
        })
        .collect()
}

pub fn parse_exif_csv(path: &Path) -> Result<BTreeMap<String, ExifRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let cols = column_indices(path, rdr.headers()?, &EXIF_HEADER)?;
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let err = |msg: String| AwbError::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let field = |i: usize| {
            row.get(cols[i])
                .ok_or_else(|| err(format!("missing field `{}`", EXIF_HEADER[i])))
        };
        let num = |i: usize| -> Result<f64> {
            let s = field(i)?;
            s.parse::<f64>()
                .map_err(|_| err(format!("`{}` is not a number: {s:?}", EXIF_HEADER[i])))
        };
        let id = field(0)?.to_string();
        let exposure = field(2)?;
        let rec = ExifRecord {
            aperture: num(1)?,
            exposure_time: parse_exposure(exposure).ok_or_else(|| {
                err(format!(
                    "`exposure_time` is not a number or fraction: {exposure:?}"
                ))
            })?,
            iso: num(3)?,
            orientation: field(4)?.parse().map_err(|_| {
                err(format!(
                    "`orientation` must be 0..=3, got {:?}",
                    row.get(cols[4])
                ))
            })?,
        };
        rec.validate().map_err(|e| err(e.to_string()))?;
        if out.insert(id.clone(), rec).is_some() {
            return Err(AwbError::DuplicateId {
                path: path.display().to_string(),
                id,
                line,
            });
        }
    }
    Ok(out)
}

pub fn write_exif_csv(path: &Path, records: &BTreeMap<String, ExifRecord>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EXIF_HEADER)?;
    for (id, r) in records {
        w.write_record([
            id.clone(),
            r.aperture.to_string(),
            r.exposure_time.to_string(),
            r.iso.to_string(),
            r.orientation.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
