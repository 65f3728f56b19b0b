//! Compact singular value decomposition by one-sided (Hestenes) Jacobi
//! rotations.
//!
//! For an `m × n` input the factorization has `k = min(m, n)` components:
//! `u` is `m × k`, `sigma` has length `k` sorted non-increasing and `vt` is
//! `k × n`. Signs are fixed so that the largest-magnitude entry of every
//! column of `u` is non-negative (lowest row index wins ties), which makes the
//! output a deterministic function of the input bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, DenseMatrix};

/// Maximum number of full Jacobi sweeps before giving up.
pub const MAX_SWEEPS: usize = 30;

/// A pair of columns counts as orthogonal once `|cos θ|` drops below this,
/// or below `√len · ε` when that is smaller (always, in practice).
pub const ORTHOGONALITY_TOL: f64 = 1e-12;

/// Relative gap (to `sigma[0]`) under which neighbouring singular values are
/// reported as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactorization {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub vt: DenseMatrix,
}

impl SvdFactorization {
    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    /// Indices `i` with `sigma[i] - sigma[i + 1] < 1e-9 · sigma[0]`.
    ///
    /// Singular vectors inside such a cluster are only defined up to a
    /// rotation; downstream quantities are relative to the basis returned here.
    pub fn degenerate_pairs(&self) -> Vec<usize> {
        let Some(&top) = self.sigma.first() else {
            return Vec::new();
        };
        self.sigma
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0] - w[1] < DEGENERACY_TOL * top)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_degenerate(&self) -> bool {
        !self.degenerate_pairs().is_empty()
    }

    /// Column `i` of `u`.
    pub fn left_vector(&self, i: usize) -> Vec<f64> {
        self.u.column(i)
    }

    /// Row `i` of `vt`, i.e. the `i`-th right singular vector.
    pub fn right_vector(&self, i: usize) -> &[f64] {
        self.vt.row(i)
    }
}

/// Computes the compact SVD of `w`.
pub fn svd(w: &DenseMatrix) -> Result<SvdFactorization> {
    w.ensure_finite("svd")?;
    let (m, n) = w.shape();
    // Scale by a power of two (exact) so squared norms neither overflow nor underflow.
    let max = w.max_abs();
    let exp = if max > 0.0 { max.log2().floor().clamp(-1000.0, 1000.0) as i32 } else { 0 };
    let scaled;
    let w = if exp != 0 {
        scaled = w.scale(2f64.powi(-exp));
        &scaled
    } else {
        w
    };
    let f = if m >= n {
        // Columns of `w` are the rows of `wᵀ`.
        let (u, sigma, v) = jacobi_tall(&w.transpose(), m, n)?;
        SvdFactorization { u, sigma, vt: v.transpose() }
    } else {
        // wᵀ = U' Σ V'ᵀ  ⇒  w = V' Σ U'ᵀ.
        let (u_t, sigma, v_t) = jacobi_tall(w, n, m)?;
        SvdFactorization { u: v_t, sigma, vt: u_t.transpose() }
    };
    let mut f = canonicalize(f);
    if exp != 0 {
        let back = 2f64.powi(exp);
        f.sigma.iter_mut().for_each(|s| *s *= back);
    }
    if f.is_degenerate() {
        log::warn!(
            "degenerate singular values in {}x{} matrix at {:?}; singular vectors are basis-dependent there",
            m,
            n,
            f.degenerate_pairs()
        );
    }
    Ok(f)
}

/// `u · diag(sigma) · vt`.
pub fn reconstruct(f: &SvdFactorization) -> DenseMatrix {
    let mut us = f.u.clone();
    for i in 0..us.rows() {
        for (v, s) in us.row_mut(i).iter_mut().zip(&f.sigma) {
            *v *= s;
        }
    }
    us.matmul(&f.vt).expect("factor shapes are consistent")
}

/// One-sided Jacobi on the `cols` columns (each of length `len`) stored as the
/// rows of `g`, with `len >= cols`. Returns `(U, sigma, V)` where `U` is
/// `len × cols` and `V` is `cols × cols`, unsorted.
fn jacobi_tall(
    g: &DenseMatrix,
    len: usize,
    cols: usize,
) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
    debug_assert_eq!(g.shape(), (cols, len));
    let mut g = g.as_slice().to_vec();
    let mut v = DenseMatrix::identity(cols).into_vec();

    let fro = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Columns below this norm carry no usable direction.
    let floor = fro * f64::EPSILON;
    let floor_sq = floor * floor;
    let tol = ((len as f64).sqrt() * f64::EPSILON).min(ORTHOGONALITY_TOL);

    let mut converged = cols < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(Error::IterativeNonConvergence {
                rows: len,
                cols,
                sweeps: MAX_SWEEPS,
            });
        }
        sweeps += 1;
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let (gp, gq) = two_rows(&mut g, len, p, q);
                let a = dot(gp, gp);
                let b = dot(gq, gq);
                if a <= floor_sq || b <= floor_sq {
                    continue;
                }
                let d = dot(gp, gq);
                if d.abs() <= tol * a.sqrt() * b.sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (b - a) / (2.0 * d);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(gp, gq, c, s);
                let (vp, vq) = two_rows(&mut v, cols, p, q);
                rotate(vp, vq, c, s);
            }
        }
        converged = !rotated;
    }

    let mut sigma = Vec::with_capacity(cols);
    let mut u = DenseMatrix::zeros(len, cols);
    let mut missing = Vec::new();
    for j in 0..cols {
        let col = &g[j * len..(j + 1) * len];
        let norm = dot(col, col).sqrt();
        sigma.push(norm);
        if norm <= floor || norm == 0.0 {
            missing.push(j);
            continue;
        }
        for (i, &x) in col.iter().enumerate() {
            u.set(i, j, x / norm);
        }
    }
    complete_orthonormal_columns(&mut u, &missing);

    // Stored row j of `v` is column j of V.
    let v = DenseMatrix::from_vec(cols, cols, v)?.transpose();
    Ok((u, sigma, v))
}

fn two_rows(data: &mut [f64], len: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (head, tail) = data.split_at_mut(q * len);
    (&mut head[p * len..(p + 1) * len], &mut tail[..len])
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Fills the listed (zero) columns of `u` with unit vectors orthogonal to all
/// other columns, trying standard basis vectors in order.
fn complete_orthonormal_columns(u: &mut DenseMatrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let (len, cols) = u.shape();
    let mut filled: Vec<bool> = vec![true; cols];
    for &j in missing {
        filled[j] = false;
    }
    let mut candidate = 0;
    for &j in missing {
        loop {
            assert!(candidate < len, "ran out of basis vectors while completing U");
            let mut e = vec![0.0; len];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes against every populated column.
            for _ in 0..2 {
                for c in (0..cols).filter(|&c| filled[c]) {
                    let col = u.column(c);
                    let proj = dot(&e, &col);
                    for (x, y) in e.iter_mut().zip(&col) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-3 {
                for (i, x) in e.iter().enumerate() {
                    u.set(i, j, x / norm);
                }
                filled[j] = true;
                break;
            }
        }
    }
}

/// Sorts components by descending singular value and applies the sign
/// convention.
fn canonicalize(f: SvdFactorization) -> SvdFactorization {
    let k = f.sigma.len();
    let mut order: Vec<usize> = (0..k).collect();
    // Stable sort keeps the original index order among exact ties.
    order.sort_by(|&a, &b| f.sigma[b].total_cmp(&f.sigma[a]));

    let m = f.u.rows();
    let n = f.vt.cols();
    let mut u = DenseMatrix::zeros(m, k);
    let mut vt = DenseMatrix::zeros(k, n);
    let mut sigma = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let col = f.u.column(src);
        let mut pivot = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (i, x) in col.iter().enumerate() {
            u.set(i, dst, sign * x);
        }
        for (o, x) in vt.row_mut(dst).iter_mut().zip(f.vt.row(src)) {
            *o = sign * x;
        }
        sigma.push(f.sigma[src]);
    }
    SvdFactorization { u, sigma, vt }
}
