use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{write_atomic, write_matrix};
use crate::matrix::DenseMatrix;

/// Inputs and integer class labels.
///
/// A dataset owns a contiguous window of the model's output logits,
/// `[logit_offset, logit_offset + classes)`. Losses, predictions and
/// probabilities are all taken over that window, which lets several tasks
/// share one network with one output block per task.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub x: DenseMatrix,
    pub y: Vec<usize>,
    pub classes: usize,
    pub logit_offset: usize,
}

impl LabeledDataset {
    pub fn new(x: DenseMatrix, y: Vec<usize>, classes: usize) -> Result<Self> {
        if y.len() != x.rows() {
            return Err(Error::LengthMismatch {
                op: "LabeledDataset::new",
                left: x.rows(),
                right: y.len(),
            });
        }
        if classes == 0 {
            return Err(Error::config("classes", "must be positive"));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::config("y", format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            x,
            y,
            classes,
            logit_offset: 0,
        })
    }

    pub fn with_logit_offset(mut self, offset: usize) -> Self {
        self.logit_offset = offset;
        self
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// One past the last logit this dataset reads.
    pub fn logit_end(&self) -> usize {
        self.logit_offset + self.classes
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
            logit_offset: self.logit_offset,
        }
    }

    /// First `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let n = n.clamp(1, self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &c in &self.y {
            h[c] += 1;
        }
        h
    }

    /// Writes `<name>_x.smx` and `<name>_y.csv` (header `label`) into `dir`.
    pub fn export(&self, dir: &Path, name: &str) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            label: usize,
        }
        write_matrix(dir.join(format!("{name}_x.smx")), &self.x)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for &label in &self.y {
            w.serialize(Row { label })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        write_atomic(&dir.join(format!("{name}_y.csv")), &bytes)
    }
}
