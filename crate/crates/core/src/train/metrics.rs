use serde::{Deserialize, Serialize};

use super::dataset::LabeledDataset;
use super::loss::{argmax, log_softmax};
use super::model::Model;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

fn check_window(model: &Model, data: &LabeledDataset, op: &'static str) -> Result<()> {
    if data.dim() != model.input_dim() || data.logit_end() > model.output_dim() {
        return Err(Error::ShapeMismatch {
            op,
            left: (data.dim(), data.logit_end()),
            right: (model.input_dim(), model.output_dim()),
        });
    }
    Ok(())
}

/// Predicted class per row of `logits` within the dataset's logit window.
pub fn predictions(logits: &DenseMatrix, data: &LabeledDataset) -> Vec<usize> {
    let (o, c) = (data.logit_offset, data.classes);
    (0..logits.rows()).map(|i| argmax(&logits.row(i)[o..o + c])).collect()
}

/// Fraction of rows whose window argmax equals the label.
pub fn accuracy_from_logits(logits: &DenseMatrix, data: &LabeledDataset) -> f64 {
    let hits = predictions(logits, data)
        .iter()
        .zip(&data.y)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / data.len() as f64
}

pub fn evaluate(model: &Model, data: &LabeledDataset) -> Result<f64> {
    check_window(model, data, "evaluate")?;
    Ok(accuracy_from_logits(&model.forward(&data.x)?, data))
}

/// `|acc_before − acc_after|`.
pub fn forgetting_abs(acc_before: f64, acc_after: f64) -> Result<f64> {
    for (what, value) in [("acc_before", acc_before), ("acc_after", acc_after)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::OutOfRange { what, value });
        }
    }
    Ok((acc_before - acc_after).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftCe {
    /// Mean cross-entropy of the after-model's distribution against the
    /// before-model's distribution as soft targets.
    pub soft_ce: f64,
    /// `soft_ce` minus the mean entropy of the targets.
    pub kl: f64,
}

/// Soft cross-entropy and KL between two sets of logits over the window
/// `[offset, offset + classes)`.
pub fn soft_ce_from_logits(
    before: &DenseMatrix,
    after: &DenseMatrix,
    offset: usize,
    classes: usize,
) -> Result<SoftCe> {
    if before.shape() != after.shape() {
        return Err(Error::ShapeMismatch {
            op: "soft_ce",
            left: before.shape(),
            right: after.shape(),
        });
    }
    let (mut ce, mut kl) = (0.0, 0.0);
    for i in 0..before.rows() {
        let lp = log_softmax(&before.row(i)[offset..offset + classes]);
        let lq = log_softmax(&after.row(i)[offset..offset + classes]);
        for (a, b) in lp.iter().zip(&lq) {
            let p = a.exp();
            if p > 0.0 {
                ce -= p * b;
                kl += p * (a - b);
            }
        }
    }
    let n = before.rows() as f64;
    Ok(SoftCe {
        soft_ce: ce / n,
        kl: kl / n,
    })
}

pub fn forgetting_soft_ce(before: &Model, after: &Model, probe: &LabeledDataset) -> Result<SoftCe> {
    if before.output_dim() != after.output_dim() {
        return Err(Error::ShapeMismatch {
            op: "forgetting_soft_ce",
            left: (before.input_dim(), before.output_dim()),
            right: (after.input_dim(), after.output_dim()),
        });
    }
    check_window(before, probe, "forgetting_soft_ce")?;
    check_window(after, probe, "forgetting_soft_ce")?;
    soft_ce_from_logits(
        &before.forward(&probe.x)?,
        &after.forward(&probe.x)?,
        probe.logit_offset,
        probe.classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forgetting_examples() {
        assert!((forgetting_abs(0.8, 0.7).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(forgetting_abs(0.6, 0.6).unwrap(), 0.0);
        assert!((forgetting_abs(0.5, 0.9).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(forgetting_abs(1.2, 0.5), Err(Error::OutOfRange { .. })));
        assert!(forgetting_abs(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn identical_logits_have_zero_kl() {
        let z = DenseMatrix::from_rows(&[[0.3, -1.0, 2.0], [0.0, 0.0, 0.0]]);
        let r = soft_ce_from_logits(&z, &z, 0, 3).unwrap();
        assert_eq!(r.kl, 0.0);
        assert!(r.soft_ce > 0.0);
    }
}
