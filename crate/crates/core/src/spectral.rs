//! Fine-tuned weights seen through the pretrained singular basis.
//!
//! With `W0 = U Σ Vᵀ`, the fine-tuned weight projects to `Uᵀ W_ft V`. The
//! change `Δ = |Σ − Uᵀ W_ft V|` splits into its diagonal (singular values
//! moving) and off-diagonal part (singular directions rotating). The feature
//! space variant does the same for the outputs `Y0 = X0 W0` on a probe set.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_csv, write_json};
use crate::matrix::DenseMatrix;
use crate::svd::{svd, SvdFactorization};
use crate::train::{accuracy_from_logits, evaluate, forgetting_abs, LabeledDataset, Model};

/// `full` is kept only up to this many components.
pub const MAX_FULL_K: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Parameter,
    Feature,
}

impl Space {
    pub fn as_str(self) -> &'static str {
        match self {
            Space::Parameter => "parameter",
            Space::Feature => "feature",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDelta {
    pub diag: Vec<f64>,
    /// Row norms of `Δ` with its diagonal zeroed.
    pub offdiag_row_norms: Vec<f64>,
    pub space: Space,
    pub full: Option<DenseMatrix>,
}

impl SpectralDelta {
    pub fn k(&self) -> usize {
        self.diag.len()
    }
}

/// `Uᵀ · m · V` for the factorization `f`.
pub fn project(f: &SvdFactorization, m: &DenseMatrix) -> Result<DenseMatrix> {
    f.u.t_matmul(m)?.matmul_t(&f.vt)
}

fn delta_from_projection(sigma: &[f64], proj: DenseMatrix, space: Space) -> SpectralDelta {
    let k = sigma.len();
    let abs = DenseMatrix::from_fn(k, k, |i, j| {
        let s = if i == j { sigma[i] } else { 0.0 };
        (s - proj.get(i, j)).abs()
    });
    let diag = (0..k).map(|i| abs.get(i, i)).collect();
    let offdiag_row_norms = (0..k)
        .map(|i| {
            abs.row(i)
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    SpectralDelta {
        diag,
        offdiag_row_norms,
        space,
        full: (k <= MAX_FULL_K).then_some(abs),
    }
}

fn same_shape(a: &DenseMatrix, b: &DenseMatrix, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

pub fn param_space_delta(w0: &DenseMatrix, w_ft: &DenseMatrix) -> Result<SpectralDelta> {
    same_shape(w0, w_ft, "param_space_delta")?;
    param_space_delta_with(&svd(w0)?, w_ft)
}

/// [`param_space_delta`] reusing a factorization of `w0`.
pub fn param_space_delta_with(f0: &SvdFactorization, w_ft: &DenseMatrix) -> Result<SpectralDelta> {
    w_ft.ensure_finite("param_space_delta")?;
    Ok(delta_from_projection(&f0.sigma, project(f0, w_ft)?, Space::Parameter))
}

pub fn feature_space_delta(
    x0: &DenseMatrix,
    w0: &DenseMatrix,
    w_ft: &DenseMatrix,
) -> Result<SpectralDelta> {
    same_shape(w0, w_ft, "feature_space_delta")?;
    let y0 = x0.matmul(w0)?;
    feature_space_delta_with(&svd(&y0)?, x0, w_ft)
}

/// [`feature_space_delta`] reusing a factorization of `x0 · w0`.
pub fn feature_space_delta_with(
    fy: &SvdFactorization,
    x0: &DenseMatrix,
    w_ft: &DenseMatrix,
) -> Result<SpectralDelta> {
    w_ft.ensure_finite("feature_space_delta")?;
    let y_ft = x0.matmul(w_ft)?;
    Ok(delta_from_projection(&fy.sigma, project(fy, &y_ft)?, Space::Feature))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub raw_f: Vec<f64>,
    pub p: Vec<f64>,
    /// Every `raw_f` is zero, so `p` is all zeros.
    pub degenerate: bool,
}

impl ImportanceProfile {
    /// Normalizes `p_i = f_i / max_j f_j`.
    pub fn new(raw_f: Vec<f64>) -> Self {
        let max = raw_f.iter().copied().fold(0.0, f64::max);
        let degenerate = max <= 0.0;
        let p = if degenerate {
            vec![0.0; raw_f.len()]
        } else {
            raw_f.iter().map(|f| f / max).collect()
        };
        Self { raw_f, p, degenerate }
    }

    /// All-ones weights, for summaries without a measured profile.
    pub fn uniform(k: usize) -> Self {
        Self {
            raw_f: vec![1.0; k],
            p: vec![1.0; k],
            degenerate: false,
        }
    }
}

/// Accuracy drop on `data` from removing each rank-1 component
/// `σ_i u_i v_iᵀ` of layer `layer`'s weight in turn.
///
/// Activations up to the layer are computed once; each ablation subtracts
/// `σ_i (h u_i) v_iᵀ` from the layer output and runs the remaining layers.
pub fn ablation_forgetting(model: &Model, data: &LabeledDataset, layer: usize) -> Result<Vec<f64>> {
    if layer >= model.num_layers() {
        return Err(Error::config("layer", format!("model has {} layers", model.num_layers())));
    }
    let base_acc = evaluate(model, data)?;
    let w = model.weight(layer);
    let f = svd(&w)?;
    let h = model.layer_input(&data.x, layer)?;
    let mut z = h.matmul(&w)?;
    if let Some(b) = &model.layers[layer].bias {
        z.add_row_vector(b);
    }
    let hu = h.matmul(&f.u)?;
    (0..f.k())
        .into_par_iter()
        .map(|i| {
            let mut zi = z.clone();
            let v = f.vt.row(i);
            for r in 0..zi.rows() {
                let c = f.sigma[i] * hu.get(r, i);
                for (out, &vv) in zi.row_mut(r).iter_mut().zip(v) {
                    *out -= c * vv;
                }
            }
            let logits = model.forward_from(layer, zi)?;
            forgetting_abs(base_acc, accuracy_from_logits(&logits, data))
        })
        .collect()
}

pub fn component_importance(model: &Model, data: &LabeledDataset, layer: usize) -> Result<ImportanceProfile> {
    let prof = ImportanceProfile::new(ablation_forgetting(model, data, layer)?);
    if prof.degenerate {
        return Err(Error::DegenerateProfile);
    }
    Ok(prof)
}

/// `(Σ p_i · diag_i, Σ p_i · offdiag_i)`.
pub fn weighted_summary(delta: &SpectralDelta, prof: &ImportanceProfile) -> Result<(f64, f64)> {
    if prof.p.len() != delta.k() {
        return Err(Error::LengthMismatch {
            op: "weighted_summary",
            left: delta.k(),
            right: prof.p.len(),
        });
    }
    let diag = prof.p.iter().zip(&delta.diag).map(|(p, d)| p * d).sum();
    let off = prof.p.iter().zip(&delta.offdiag_row_norms).map(|(p, d)| p * d).sum();
    Ok((diag, off))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub component_index: usize,
    pub diag_delta: f64,
    pub offdiag_row_norm: f64,
    pub p: f64,
    pub space: Space,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub diag_sum: f64,
    pub offdiag_sum: f64,
    pub space: Space,
    pub k: usize,
}

pub fn report_rows(delta: &SpectralDelta, prof: &ImportanceProfile) -> Vec<ReportRow> {
    (0..delta.k())
        .map(|i| ReportRow {
            component_index: i,
            diag_delta: delta.diag[i],
            offdiag_row_norm: delta.offdiag_row_norms[i],
            p: prof.p[i],
            space: delta.space,
        })
        .collect()
}

/// Writes the per-component CSV and, if `json` is given, the summary JSON.
pub fn write_report(
    csv: &Path,
    json: Option<&Path>,
    delta: &SpectralDelta,
    prof: &ImportanceProfile,
) -> Result<ReportSummary> {
    let (diag_sum, offdiag_sum) = weighted_summary(delta, prof)?;
    write_csv(csv, &report_rows(delta, prof))?;
    let summary = ReportSummary {
        diag_sum,
        offdiag_sum,
        space: delta.space,
        k: delta.k(),
    };
    if let Some(json) = json {
        write_json(json, &summary)?;
    }
    Ok(summary)
}
