//! Sliced-SVD low-rank adapters.
//!
//! A pretrained weight `W = U Σ Vᵀ` is split at the component window
//! `[s, s + r)`: the window becomes the trainable factors
//! `A = U[:, s..s+r] · diag(√σ)` and `B = diag(√σ) · Vᵀ[s..s+r, :]`, and the
//! remaining components form the frozen residual `W_p = W − U_w Σ_w V_wᵀ`.
//! `s = 0` selects the principal components (PiSSA), `s = k − r` the minor
//! ones (MiLoRA); anything in between is an intermediate window.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, read_matrix, write_json, write_matrix};
use crate::matrix::DenseMatrix;
use crate::svd::{svd, SvdFactorization};

/// The component window `[start, start + rank)` and the LoRA scale numerator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub start: usize,
    pub rank: usize,
    pub alpha: f64,
}

impl SliceSpec {
    /// Window with `alpha = rank`, i.e. unit scale.
    pub fn new(start: usize, rank: usize) -> Self {
        Self {
            start,
            rank,
            alpha: rank as f64,
        }
    }

    pub fn with_alpha(start: usize, rank: usize, alpha: f64) -> Self {
        Self { start, rank, alpha }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn end(&self) -> usize {
        self.start + self.rank
    }

    /// Checks the window against a matrix with `k = min(m, n)` components.
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.rank == 0 || self.end() > k {
            return Err(Error::SliceOutOfRange {
                start: self.start,
                rank: self.rank,
                k,
            });
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("alpha", format!("must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Frozen residual plus trainable factors of one adapted `m × n` layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub w_p: DenseMatrix,
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub spec: SliceSpec,
    pub scale: f64,
}

pub fn init_slice_adapter(w: &DenseMatrix, spec: SliceSpec) -> Result<AdapterState> {
    w.ensure_finite("init_slice_adapter")?;
    let k = w.rows().min(w.cols());
    spec.validate(k)?;
    let f = svd(w)?;
    Ok(adapter_from_factorization(w, &f, spec))
}

/// Builds the adapter from an existing factorization of `w`, avoiding a second
/// SVD when the caller already has one.
///
/// Panics if the window does not fit inside `f`; call
/// [`SliceSpec::validate`] first when `spec` is untrusted.
pub fn adapter_from_factorization(
    w: &DenseMatrix,
    f: &SvdFactorization,
    spec: SliceSpec,
) -> AdapterState {
    let (m, n) = w.shape();
    let r = spec.rank;
    let window = &f.sigma[spec.start..spec.end()];
    if window.contains(&0.0) {
        log::warn!(
            "slice [{}, {}) contains zero singular values; those adapter directions start empty",
            spec.start,
            spec.end()
        );
    }
    let roots: Vec<f64> = window.iter().map(|s| s.sqrt()).collect();

    let a = DenseMatrix::from_fn(m, r, |i, j| f.u.get(i, spec.start + j) * roots[j]);
    let b = DenseMatrix::from_fn(r, n, |i, j| roots[i] * f.vt.get(spec.start + i, j));

    // W_p = W − U_w diag(σ_w) V_wᵀ
    let mut w_p = w.clone();
    for (j, &sigma) in window.iter().enumerate() {
        let c = spec.start + j;
        let v = f.vt.row(c);
        for i in 0..m {
            let us = f.u.get(i, c) * sigma;
            if us == 0.0 {
                continue;
            }
            for (x, &vv) in w_p.row_mut(i).iter_mut().zip(v) {
                *x -= us * vv;
            }
        }
    }

    AdapterState {
        w_p,
        a,
        b,
        spec,
        scale: spec.scale(),
    }
}

/// Principal-component initialization: the window starting at 0.
pub fn pissa_init(w: &DenseMatrix, rank: usize, alpha: f64) -> Result<AdapterState> {
    init_slice_adapter(w, SliceSpec::with_alpha(0, rank, alpha))
}

/// Minor-component initialization: the last `rank` components.
pub fn milora_init(w: &DenseMatrix, rank: usize, alpha: f64) -> Result<AdapterState> {
    let k = w.rows().min(w.cols());
    let start = k.checked_sub(rank).ok_or(Error::SliceOutOfRange { start: 0, rank, k })?;
    init_slice_adapter(w, SliceSpec::with_alpha(start, rank, alpha))
}

impl AdapterState {
    pub fn in_dim(&self) -> usize {
        self.w_p.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w_p.cols()
    }

    /// `x · W_p + scale · (x · A) · B`; the dense update is never formed.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut y = x.matmul(&self.w_p)?;
        let low = x.matmul(&self.a)?.matmul(&self.b)?;
        y.add_scaled_assign(self.scale, &low)?;
        Ok(y)
    }

    /// The effective weight `W_p + scale · A · B`.
    pub fn merge(&self) -> DenseMatrix {
        let mut w = self.w_p.clone();
        let ab = self.a.matmul(&self.b).expect("factor shapes are consistent");
        w.add_scaled_assign(self.scale, &ab).expect("shapes are consistent");
        w
    }

    /// The low-rank part `scale · A · B` alone.
    pub fn delta(&self) -> DenseMatrix {
        self.a
            .matmul(&self.b)
            .expect("factor shapes are consistent")
            .scale(self.scale)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_matrix(dir.join("w_p.smx"), &self.w_p)?;
        write_matrix(dir.join("a.smx"), &self.a)?;
        write_matrix(dir.join("b.smx"), &self.b)?;
        write_json(&dir.join("manifest.json"), &AdapterManifest::from(self))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::MissingCheckpoint(manifest_path));
        }
        let man: AdapterManifest = read_json(&manifest_path)?;
        if man.format != "SMX1" {
            return Err(Error::config("format", format!("unsupported format {:?}", man.format)));
        }
        let w_p = read_matrix(dir.join("w_p.smx"))?;
        let a = read_matrix(dir.join("a.smx"))?;
        let b = read_matrix(dir.join("b.smx"))?;
        let spec = SliceSpec::with_alpha(man.s, man.r, man.alpha);
        let expect = [(man.m, man.n), (man.m, man.r), (man.r, man.n)];
        for (got, want) in [w_p.shape(), a.shape(), b.shape()].into_iter().zip(expect) {
            if got != want {
                return Err(Error::ShapeMismatch {
                    op: "AdapterState::load",
                    left: got,
                    right: want,
                });
            }
        }
        spec.validate(man.m.min(man.n))?;
        Ok(Self {
            w_p,
            a,
            b,
            spec,
            scale: spec.scale(),
        })
    }
}

pub fn adapter_forward(x: &DenseMatrix, st: &AdapterState) -> Result<DenseMatrix> {
    st.forward(x)
}

pub fn merge(st: &AdapterState) -> DenseMatrix {
    st.merge()
}

/// `manifest.json` of an adapter checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterManifest {
    pub m: usize,
    pub n: usize,
    pub s: usize,
    pub r: usize,
    pub alpha: f64,
    pub format: String,
}

impl From<&AdapterState> for AdapterManifest {
    fn from(st: &AdapterState) -> Self {
        Self {
            m: st.in_dim(),
            n: st.out_dim(),
            s: st.spec.start,
            r: st.spec.rank,
            alpha: st.spec.alpha,
            format: "SMX1".into(),
        }
    }
}
