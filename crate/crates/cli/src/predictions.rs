//! Prediction CSVs: `image_id,r,g,b` or
//! `image_id,l_r,l_g,l_b,r_r,r_g,r_b`.

use std::collections::BTreeMap;
use std::path::Path;

use sdeawb_core::metrics::{IlluminantVector, TwoIlluminantLabel};

use crate::error::{CliError, Result};

pub const SINGLE_HEADER: [&str; 4] = ["image_id", "r", "g", "b"];
pub const TWO_HEADER: [&str; 7] = ["image_id", "l_r", "l_g", "l_b", "r_r", "r_g", "r_b"];

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub image_id: String,
    pub left: IlluminantVector,
    /// Present in six-column files.
    pub right: Option<IlluminantVector>,
}

impl PredictionRecord {
    pub fn label(&self) -> TwoIlluminantLabel {
        TwoIlluminantLabel {
            left: self.left,
            right: self.right.unwrap_or(self.left),
        }
    }
}

/// Writes unit-norm rows. Every record must agree on the column count.
pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let two = records.first().is_some_and(|r| r.right.is_some());
    if records.iter().any(|r| r.right.is_some() != two) {
        return Err(CliError::Usage(
            "mixed single and two-illuminant predictions".into(),
        ));
    }
    let mut w = csv::Writer::from_path(path)?;
    if two {
        w.write_record(TWO_HEADER)?;
    } else {
        w.write_record(SINGLE_HEADER)?;
    }
    for r in records {
        let mut row = vec![r.image_id.clone()];
        for v in std::iter::once(r.left).chain(r.right) {
            row.extend(v.normalized().to_array().iter().map(|x| x.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<BTreeMap<String, PredictionRecord>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let two = if header == TWO_HEADER {
        true
    } else if header == SINGLE_HEADER {
        false
    } else {
        return Err(CliError::Data(format!(
            "{}: header must be `{}` or `{}`",
            path.display(),
            SINGLE_HEADER.join(","),
            TWO_HEADER.join(",")
        )));
    };
    let mut out = BTreeMap::new();
    for (k, row) in r.records().enumerate() {
        let row = row?;
        let bad = |m: String| CliError::Data(format!("{}: row {}: {m}", path.display(), k + 1));
        let mut v = Vec::with_capacity(6);
        for s in row.iter().skip(1) {
            v.push(
                s.parse::<f64>()
                    .map_err(|_| bad(format!("not a number: {s:?}")))?,
            );
        }
        let vec3 =
            |a: &[f64]| IlluminantVector::new(a[0], a[1], a[2]).map_err(|e| bad(e.to_string()));
        let rec = PredictionRecord {
            image_id: row[0].to_string(),
            left: vec3(&v[0..3])?,
            right: if two { Some(vec3(&v[3..6])?) } else { None },
        };
        if out.insert(rec.image_id.clone(), rec).is_some() {
            return Err(bad(format!("duplicate image_id `{}`", &row[0])));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(r: f64, g: f64, b: f64) -> IlluminantVector {
        IlluminantVector::new(r, g, b).unwrap()
    }

    #[test]
    fn round_trip_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let recs = vec![
            PredictionRecord {
                image_id: "a".into(),
                left: iv(2.0, 1.0, 1.0),
                right: Some(iv(0.1, 0.2, 0.3)),
            },
            PredictionRecord {
                image_id: "b".into(),
                left: iv(1.0, 1.0, 1.0),
                right: Some(iv(0.5, 0.5, 0.1)),
            },
        ];
        write_predictions(&p, &recs).unwrap();
        let back = read_predictions(&p).unwrap();
        assert_eq!(back.len(), 2);
        for r in &recs {
            let b = &back[&r.image_id];
            assert!((b.left.norm() - 1.0).abs() < 1e-12);
            assert!(sdeawb_core::metrics::angular_error(&b.left, &r.left).unwrap() < 1e-9);
            assert!(b.right.is_some());
        }
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("image_id,l_r,l_g,l_b,r_r,r_g,r_b\n"));
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        std::fs::write(&p, "id,r,g,b\na,1,1,1\n").unwrap();
        assert!(read_predictions(&p).is_err());
        std::fs::write(&p, "image_id,r,g,b\na,1,1,1\na,1,1,1\n").unwrap();
        assert!(read_predictions(&p).is_err());
        std::fs::write(&p, "image_id,r,g,b\na,1,x,1\n").unwrap();
        assert!(read_predictions(&p).is_err());
        let mixed = [
            PredictionRecord {
                image_id: "a".into(),
                left: iv(1.0, 1.0, 1.0),
                right: None,
            },
            PredictionRecord {
                image_id: "b".into(),
                left: iv(1.0, 1.0, 1.0),
                right: Some(iv(1.0, 1.0, 1.0)),
            },
        ];
        assert!(write_predictions(&p, &mixed).is_err());
    }
}
