//! Two-task datasets from random teachers, and an IDX loader.
//!
//! Each task is labelled by a one-hidden-layer ReLU teacher
//! `argmax((relu(x·T1) − μ)·T2 + c)` on standard Gaussian inputs. The first
//! layers of the two teachers span `h`-dimensional input subspaces
//! `span(Q_A)` and `span(cos θ·Q_A + sin θ·Q_P)` with `Q_P ⟂ Q_A` and
//! `θ = (1 − overlap)·π/2`, so every principal angle between them equals `θ`.
//! The offsets `c` are calibrated on a held-out sample to balance classes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, DenseMatrix};
use crate::rng::{gaussian_matrix, purpose, stream};
use crate::train::{argmax, LabeledDataset};

const CALIBRATION_ROWS: usize = 8000;
const CALIBRATION_ROUNDS: usize = 60;

fn default_hidden() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskPairConfig {
    pub input_dim: usize,
    pub classes_a: usize,
    pub classes_b: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Alignment of the teachers' first-layer subspaces, in `[0, 1]`.
    pub overlap: f64,
    /// Std of Gaussian noise added to the teacher logits before the argmax.
    pub noise_std: f64,
    pub seed: u64,
    /// Hidden width `h` of both teachers; `2h ≤ input_dim`.
    #[serde(default = "default_hidden")]
    pub teacher_hidden: usize,
    /// Task B reuses task A's readout and offsets (needs equal class counts).
    #[serde(default)]
    pub share_readout: bool,
}

impl TaskPairConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data.input_dim", self.input_dim),
            ("data.classes_a", self.classes_a),
            ("data.classes_b", self.classes_b),
            ("data.n_train", self.n_train),
            ("data.n_test", self.n_test),
            ("data.teacher_hidden", self.teacher_hidden),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(Error::config(path, "must be positive"));
            }
        }
        if 2 * self.teacher_hidden > self.input_dim {
            return Err(Error::config(
                "data.teacher_hidden",
                format!("2·{} exceeds input_dim {}", self.teacher_hidden, self.input_dim),
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::config("data.overlap", "must be in [0, 1]"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("data.noise_std", "must be non-negative"));
        }
        if self.share_readout && self.classes_a != self.classes_b {
            return Err(Error::config("data.share_readout", "needs classes_a == classes_b"));
        }
        Ok(())
    }
}

/// A one-hidden-layer ReLU labelling function.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    /// Orthonormal `d × h` basis of the first-layer subspace.
    pub basis: DenseMatrix,
    /// `√(d / h)`; the first layer is `basis · gain`.
    pub gain: f64,
    /// `h × C` readout with unit-norm columns.
    pub readout: DenseMatrix,
    pub offsets: Vec<f64>,
}

impl Teacher {
    pub fn classes(&self) -> usize {
        self.readout.cols()
    }

    /// Mean of `relu(g·z)` for `z ~ N(0, 1)`.
    fn center(&self) -> f64 {
        self.gain / (2.0 * std::f64::consts::PI).sqrt()
    }

    pub fn logits(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let (g, mu) = (self.gain, self.center());
        let hidden = x.matmul(&self.basis)?.map(|v| (g * v).max(0.0) - mu);
        let mut z = hidden.matmul(&self.readout)?;
        z.add_row_vector(&self.offsets);
        Ok(z)
    }

    pub fn labels(&self, x: &DenseMatrix) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.rows()).map(|i| argmax(z.row(i))).collect())
    }

    /// Shifts the offsets until the label frequencies on `x` are close to uniform.
    fn calibrate(&mut self, x: &DenseMatrix) -> Result<()> {
        let c = self.classes();
        self.offsets = vec![0.0; c];
        let target = 1.0 / c as f64;
        for _ in 0..CALIBRATION_ROUNDS {
            let mut freq = vec![0.0; c];
            for y in self.labels(x)? {
                freq[y] += 1.0 / x.rows() as f64;
            }
            for (o, f) in self.offsets.iter_mut().zip(&freq) {
                *o += 0.5 * (target.ln() - f.max(0.1 * target).ln());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPair {
    pub a: TaskSplit,
    pub b: TaskSplit,
    pub teacher_a: Teacher,
    pub teacher_b: Teacher,
}

impl TaskPair {
    /// Writes `task_{a,b}_{train,test}_x.smx` and matching label CSVs.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.a.train.export(dir, "task_a_train")?;
        self.a.test.export(dir, "task_a_test")?;
        self.b.train.export(dir, "task_b_train")?;
        self.b.test.export(dir, "task_b_test")
    }
}

/// Orthonormalizes the columns of `m` (two passes of modified Gram–Schmidt).
fn orthonormal_columns(m: &DenseMatrix) -> DenseMatrix {
    let mut cols: Vec<Vec<f64>> = (0..m.cols()).map(|j| m.column(j)).collect();
    for j in 0..cols.len() {
        for _ in 0..2 {
            for i in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let proj = dot(&done[i], &rest[0]);
                for (v, &q) in rest[0].iter_mut().zip(&done[i]) {
                    *v -= proj * q;
                }
            }
        }
        let norm = dot(&cols[j], &cols[j]).sqrt();
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| cols[j][i])
}

fn unit_columns(m: DenseMatrix) -> DenseMatrix {
    let norms: Vec<f64> = (0..m.cols()).map(|j| dot(&m.column(j), &m.column(j)).sqrt()).collect();
    DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) / norms[j])
}

fn split(teacher: &Teacher, cfg: &TaskPairConfig, inputs: u64, noise: u64) -> Result<TaskSplit> {
    let n = cfg.n_train + cfg.n_test;
    let x = gaussian_matrix(&mut stream(cfg.seed, inputs, 0), n, cfg.input_dim, 1.0);
    let mut z = teacher.logits(&x)?;
    if cfg.noise_std > 0.0 {
        let eps = gaussian_matrix(&mut stream(cfg.seed, noise, 0), n, teacher.classes(), cfg.noise_std);
        z.add_scaled_assign(1.0, &eps)?;
    }
    let y: Vec<usize> = (0..n).map(|i| argmax(z.row(i))).collect();
    let c = teacher.classes();
    Ok(TaskSplit {
        train: LabeledDataset::new(x.row_range(0, cfg.n_train), y[..cfg.n_train].to_vec(), c)?,
        test: LabeledDataset::new(x.row_range(cfg.n_train, n), y[cfg.n_train..].to_vec(), c)?,
    })
}

pub fn make_task_pair(cfg: &TaskPairConfig) -> Result<TaskPair> {
    cfg.validate()?;
    let (d, h) = (cfg.input_dim, cfg.teacher_hidden);
    let mut rng = stream(cfg.seed, purpose::TEACHER, 0);
    let q = orthonormal_columns(&gaussian_matrix(&mut rng, d, 2 * h, 1.0));
    let qa = q.columns(0, h);
    let qp = q.columns(h, 2 * h);
    let theta = (1.0 - cfg.overlap) * std::f64::consts::FRAC_PI_2;
    let (c, s) = (theta.cos(), theta.sin());
    let qb = DenseMatrix::from_fn(d, h, |i, j| c * qa.get(i, j) + s * qp.get(i, j));
    let gain = (d as f64 / h as f64).sqrt();

    let readout_a = unit_columns(gaussian_matrix(&mut rng, h, cfg.classes_a, 1.0));
    let readout_b = unit_columns(gaussian_matrix(&mut rng, h, cfg.classes_b, 1.0));
    let calib = gaussian_matrix(&mut stream(cfg.seed, purpose::CALIBRATION, 0), CALIBRATION_ROWS, d, 1.0);

    let mut teacher_a = Teacher {
        basis: qa,
        gain,
        readout: readout_a,
        offsets: Vec::new(),
    };
    teacher_a.calibrate(&calib)?;
    let teacher_b = if cfg.share_readout {
        Teacher {
            basis: qb,
            ..teacher_a.clone()
        }
    } else {
        let mut t = Teacher {
            basis: qb,
            gain,
            readout: readout_b,
            offsets: Vec::new(),
        };
        t.calibrate(&calib)?;
        t
    };

    Ok(TaskPair {
        a: split(&teacher_a, cfg, purpose::INPUTS_A, purpose::LABEL_NOISE_A)?,
        b: split(&teacher_b, cfg, purpose::INPUTS_B, purpose::LABEL_NOISE_B)?,
        teacher_a,
        teacher_b,
    })
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::TruncatedFile {
            path: path.to_path_buf(),
            expected: (at + 4) as u64,
            found: bytes.len() as u64,
        })
}

fn check_magic(bytes: &[u8], want: u32, path: &Path) -> Result<()> {
    let got = be_u32(bytes, 0, path)?;
    if got != want {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: want.to_be_bytes().to_vec(),
            found: got.to_be_bytes().to_vec(),
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes.get(start..start + len).ok_or_else(|| Error::TruncatedFile {
        path: path.to_path_buf(),
        expected: (start + len) as u64,
        found: bytes.len() as u64,
    })
}

/// Loads an IDX image/label pair (MNIST layout). Pixels are scaled to
/// `[0, 1]` and flattened row-major; at most `limit` examples are kept. The
/// class count is the largest label plus one.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<LabeledDataset> {
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;
    check_magic(&img, IDX_IMAGES, images_path)?;
    check_magic(&lab, IDX_LABELS, labels_path)?;
    let images = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let labels = be_u32(&lab, 4, labels_path)? as usize;
    if images != labels {
        return Err(Error::CountMismatch { images, labels });
    }
    if images == 0 || rows * cols == 0 {
        return Err(Error::InvalidDimensions {
            rows: images,
            cols: rows * cols,
        });
    }
    let n = limit.map_or(images, |l| l.min(images)).max(1);
    let d = rows * cols;
    let pixels = payload(&img, 16, images * d, images_path)?;
    let ys = payload(&lab, 8, labels, labels_path)?;
    let x = DenseMatrix::from_vec(n, d, pixels[..n * d].iter().map(|&p| p as f64 / 255.0).collect())?;
    let y: Vec<usize> = ys[..n].iter().map(|&v| v as usize).collect();
    let classes = y.iter().copied().max().unwrap_or(0) + 1;
    LabeledDataset::new(x, y, classes)
}
