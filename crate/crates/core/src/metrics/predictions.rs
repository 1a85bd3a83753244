//! Challenge-style prediction files: `id,proba,label`, probabilities with six decimals.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::auroc::{accuracy, auroc};
use crate::data::MemeSample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub proba: f64,
    /// Thresholded prediction.
    pub label: u8,
}

impl Prediction {
    pub fn new(id: impl Into<String>, proba: f64, threshold: f64) -> Self {
        Self {
            id: id.into(),
            proba,
            label: u8::from(proba >= threshold),
        }
    }
}

pub fn write_predictions(preds: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["id", "proba", "label"]).map_err(csv_err)?;
    for p in preds {
        w.write_record([p.id.clone(), format!("{:.6}", p.proba), p.label.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "proba", "label"] {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header id,proba,label, got {}", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        let p: Prediction = rec.map_err(|e| Error::Parse {
            line: i + 2,
            msg: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&p.proba) || p.label > 1 {
            return Err(Error::Parse {
                line: i + 2,
                msg: format!("proba {} / label {} out of range", p.proba, p.label),
            });
        }
        out.push(p);
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse {
        line: e.position().map_or(0, |p| p.line() as usize),
        msg: e.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub accuracy: f64,
    pub n: usize,
}

/// Scores predictions against gold labels, matched by id. Every gold sample must be predicted.
pub fn evaluate(preds: &[Prediction], gold: &[MemeSample]) -> Result<EvalReport> {
    let by_id: HashMap<&str, &Prediction> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    if by_id.len() != preds.len() {
        return Err(Error::Integrity("duplicate ids in predictions".into()));
    }
    let mut scores = Vec::with_capacity(gold.len());
    let mut labels = Vec::with_capacity(gold.len());
    for g in gold {
        let p = by_id
            .get(g.id.as_str())
            .ok_or_else(|| Error::Integrity(format!("no prediction for {}", g.id)))?;
        scores.push(p.proba);
        labels.push(g.label);
    }
    Ok(EvalReport {
        auroc: auroc(&scores, &labels)?,
        accuracy: accuracy(&scores, &labels, 0.5)?,
        n: gold.len(),
    })
}
