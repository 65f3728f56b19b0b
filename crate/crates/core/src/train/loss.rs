use serde::{Deserialize, Serialize};

use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    Mse,
}

/// Numerically stable `log softmax` of a slice.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| (v - max) - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Mean loss over the rows of `logits` restricted to the window
/// `[offset, offset + classes)`, and its gradient with respect to the full
/// logit matrix (zero outside the window).
///
/// Cross-entropy: `mean_n −log softmax(z_n)[y_n]`.
/// MSE: `1 / (N·C) · Σ_n Σ_c (z_nc − onehot(y_n)_c)²`.
pub fn loss_and_grad(
    logits: &DenseMatrix,
    y: &[usize],
    offset: usize,
    classes: usize,
    loss: Loss,
) -> (f64, DenseMatrix) {
    let n = logits.rows();
    let mut grad = DenseMatrix::zeros(n, logits.cols());
    let mut total = 0.0;
    match loss {
        Loss::CrossEntropy => {
            let inv_n = 1.0 / n as f64;
            for (i, &label) in y.iter().enumerate() {
                let z = &logits.row(i)[offset..offset + classes];
                let lp = log_softmax(z);
                total -= lp[label];
                let g = &mut grad.row_mut(i)[offset..offset + classes];
                for (c, (gv, l)) in g.iter_mut().zip(&lp).enumerate() {
                    let target = if c == label { 1.0 } else { 0.0 };
                    *gv = (l.exp() - target) * inv_n;
                }
            }
            (total * inv_n, grad)
        }
        Loss::Mse => {
            let inv = 1.0 / (n * classes) as f64;
            for (i, &label) in y.iter().enumerate() {
                let z = &logits.row(i)[offset..offset + classes];
                let diffs: Vec<f64> = z
                    .iter()
                    .enumerate()
                    .map(|(c, &v)| v - if c == label { 1.0 } else { 0.0 })
                    .collect();
                let g = &mut grad.row_mut(i)[offset..offset + classes];
                for (gv, d) in g.iter_mut().zip(&diffs) {
                    total += d * d;
                    *gv = 2.0 * d * inv;
                }
            }
            (total * inv, grad)
        }
    }
}
