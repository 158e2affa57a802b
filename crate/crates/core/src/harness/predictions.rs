//! Prediction sets and their CSV form.
//!
//! File layout: header `sample_id,logit_0,...,logit_{C-1},pred`, one row
//! per sample. Logits are printed with Rust's shortest round-trip float
//! formatting, so parse(emit(x)) is exact. The model identifier is not a
//! column; readers take it from the file stem.

use std::path::Path;

use super::HarnessError;
use crate::numerics::Matrix;

/// Argmax with ties broken toward the lower class index — the single
/// tie-break rule every component shares.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-sample logits plus the argmax predictions of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub model_id: String,
    pub sample_ids: Vec<usize>,
    pub logits: Matrix,
    pub predicted: Vec<usize>,
}

impl PredictionSet {
    pub fn from_logits(
        model_id: impl Into<String>,
        sample_ids: Vec<usize>,
        logits: Matrix,
    ) -> Self {
        assert_eq!(sample_ids.len(), logits.rows());
        let predicted = (0..logits.rows())
            .map(|r| argmax_lowest(logits.row(r)))
            .collect();
        PredictionSet {
            model_id: model_id.into(),
            sample_ids,
            logits,
            predicted,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.logits.cols()
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn max_logit(&self, row: usize) -> f64 {
        self.logits
            .row(row)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Csv(e.to_string()))?;
        let mut header = vec!["sample_id".to_string()];
        for c in 0..self.num_classes() {
            header.push(format!("logit_{c}"));
        }
        header.push("pred".to_string());
        w.write_record(&header)
            .map_err(|e| HarnessError::Csv(e.to_string()))?;
        for i in 0..self.len() {
            let mut record = vec![self.sample_ids[i].to_string()];
            for v in self.logits.row(i) {
                record.push(format!("{v}"));
            }
            record.push(self.predicted[i].to_string());
            w.write_record(&record)
                .map_err(|e| HarnessError::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| HarnessError::Csv(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, HarnessError> {
        let model_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "unknown".to_string());
        let mut reader =
            csv::Reader::from_path(path).map_err(|e| HarnessError::Csv(e.to_string()))?;
        let header = reader
            .headers()
            .map_err(|e| HarnessError::Csv(e.to_string()))?
            .clone();
        if header.len() < 3 || &header[0] != "sample_id" || &header[header.len() - 1] != "pred" {
            return Err(HarnessError::Csv(format!(
                "unexpected prediction header in {}",
                path.display()
            )));
        }
        let num_classes = header.len() - 2;
        let mut sample_ids = Vec::new();
        let mut data = Vec::new();
        let mut stored_preds = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| HarnessError::Csv(e.to_string()))?;
            if record.len() != header.len() {
                return Err(HarnessError::Csv("ragged prediction row".into()));
            }
            sample_ids.push(
                record[0]
                    .parse::<usize>()
                    .map_err(|e| HarnessError::Csv(e.to_string()))?,
            );
            for c in 0..num_classes {
                data.push(
                    record[1 + c]
                        .parse::<f64>()
                        .map_err(|e| HarnessError::Csv(e.to_string()))?,
                );
            }
            stored_preds.push(
                record[header.len() - 1]
                    .parse::<usize>()
                    .map_err(|e| HarnessError::Csv(e.to_string()))?,
            );
        }
        let logits = Matrix::from_vec(sample_ids.len(), num_classes, data)
            .map_err(|e| HarnessError::Csv(e.to_string()))?;
        let set = PredictionSet::from_logits(model_id, sample_ids, logits);
        if set.predicted != stored_preds {
            return Err(HarnessError::Csv(
                "stored predictions disagree with argmax of logits".into(),
            ));
        }
        Ok(set)
    }
}
