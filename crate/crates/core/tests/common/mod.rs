#![allow(dead_code)]

use nalgebra::DMatrix;
use slora::rng::{gaussian_matrix, stream};
use slora::train::{loss_and_grad, LabeledDataset, Model, TrainConfig, TrainScope};
use slora::{DenseMatrix, Loss, OptimizerKind};

pub fn random_matrix(seed: u64, m: usize, n: usize) -> DenseMatrix {
    gaussian_matrix(&mut stream(seed, 900, (m * 10_000 + n) as u64), m, n, 1.0)
}

pub fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
}

pub fn rel_frob(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    slora::relative_frobenius_error(a, b).unwrap()
}

/// Singular values from an independent symmetric eigensolver on the smaller
/// Gram matrix, sorted non-increasing.
pub fn eigen_singular_values(w: &DenseMatrix) -> Vec<f64> {
    let (m, n) = w.shape();
    let a = DMatrix::from_row_slice(m, n, w.as_slice());
    let gram = if m >= n { a.transpose() * &a } else { &a * a.transpose() };
    let mut ev: Vec<f64> = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

/// Plain triple loop `lᵀ · m · r` for `l` (p×k), `m` (p×q), `r` (q×k).
pub fn triple_product(l: &DenseMatrix, m: &DenseMatrix, r: &DenseMatrix) -> DenseMatrix {
    let k1 = l.cols();
    let k2 = r.cols();
    DenseMatrix::from_fn(k1, k2, |i, j| {
        let mut acc = 0.0;
        for a in 0..m.rows() {
            for b in 0..m.cols() {
                acc += l.get(a, i) * m.get(a, b) * r.get(b, j);
            }
        }
        acc
    })
}

/// Plain triple-loop matrix product.
pub fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|p| a.get(i, p) * b.get(p, j)).sum())
}

/// Two Gaussian blobs at `±2·e_0`, labels by blob.
pub fn blobs(n: usize, d: usize, seed: u64) -> LabeledDataset {
    let mut x = gaussian_matrix(&mut stream(seed, 901, 0), n, d, 0.3);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        x.set(i, 0, x.get(i, 0) + if c == 0 { -2.0 } else { 2.0 });
        y.push(c);
    }
    LabeledDataset::new(x, y, 2).unwrap()
}

/// Random inputs with uniformly random labels.
pub fn random_labels(n: usize, d: usize, classes: usize, seed: u64) -> LabeledDataset {
    use rand::Rng;
    let x = gaussian_matrix(&mut stream(seed, 902, 0), n, d, 1.0);
    let mut rng = stream(seed, 903, 0);
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    LabeledDataset::new(x, y, classes).unwrap()
}

pub fn sgd_config(lr: f64, epochs: usize, batch: usize, loss: Loss) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        epochs,
        batch_size: batch,
        optimizer: OptimizerKind::sgd(),
        seed: 11,
        loss,
        train_bias: true,
        eval_every: 1,
    }
}

pub fn adamw_config(lr: f64, epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        epochs,
        batch_size: batch,
        optimizer: OptimizerKind::adamw(0.01),
        seed: 5,
        loss: Loss::CrossEntropy,
        train_bias: true,
        eval_every: 1,
    }
}

pub fn data_loss(model: &Model, data: &LabeledDataset, loss: Loss) -> f64 {
    let z = model.forward(&data.x).unwrap();
    loss_and_grad(&z, &data.y, data.logit_offset, data.classes, loss).0
}

/// Largest per-element relative error between backprop and central differences.
pub fn gradient_check(mut model: Model, data: &LabeledDataset, loss: Loss, scope: TrainScope) -> (f64, usize) {
    let h = 1e-5;
    let cache = model.forward_cached(&data.x).unwrap();
    let z = cache.logits().clone();
    let (_, dz) = loss_and_grad(&z, &data.y, data.logit_offset, data.classes, loss);
    let analytic = model.gradients(&cache, &dz, scope).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (t, grad) in analytic.iter().enumerate() {
        for (e, &g) in grad.iter().enumerate() {
            let orig = model.params_mut(scope)[t][e];
            model.params_mut(scope)[t][e] = orig + h;
            let up = data_loss(&model, data, loss);
            model.params_mut(scope)[t][e] = orig - h;
            let down = data_loss(&model, data, loss);
            model.params_mut(scope)[t][e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = g.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((g - numeric).abs() / denom);
            checked += 1;
        }
    }
    (worst, checked)
}
