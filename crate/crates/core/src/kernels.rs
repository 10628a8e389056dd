//! Batched multi-LoRA contraction kernels.
//!
//! A batch `X[b×l×d]` is served by `p` distinct adapters stacked into
//! `A[p×r×d]` and `B[p×d×r]`. The mapping matrix `M[b×p]` routes each sample to
//! its adapters with averaging weights. Both kernels return only the low-rank
//! delta; the frozen `W0·x` term is added by the caller.
//!
//! Mixture averages adapter outputs:
//!
//! ```text
//! mid [b,l,p,r] = Σ_d X[b,l,d]   · A[p,r,d]
//! mid2[b,l,p,d] = Σ_r mid[b,l,p,r] · B[p,d,r]
//! out [b,l,d]   = Σ_p mid2[b,l,p,d] · M[b,p]
//! ```
//!
//! Fusion averages adapter parameters first:
//!
//! ```text
//! FA[b,r,d] = Σ_p M[b,p] · A[p,r,d]
//! FB[b,d,r] = Σ_p M[b,p] · B[p,d,r]
//! out[b,l,d] = Σ_r (Σ_d X[b,l,d] · FA[b,r,d]) · FB[b,d,r]
//! ```
//!
//! Per-adapter scaling `alpha / r` is folded into `B` before either contraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, DenseTensor, Strided};

/// Row-routing matrix `M[b×p]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingMatrix {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
}

const ROW_SUM_TOL: f64 = 1e-12;

impl MappingMatrix {
    /// Validates non-negativity and that every row sums to 1 or is all zero.
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!(
                "mapping matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if weights.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} mapping matrix needs {} weights, got {}",
                rows * cols,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Validation(
                "mapping weights must be finite and non-negative".into(),
            ));
        }
        let m = Self {
            rows,
            cols,
            weights,
        };
        for i in 0..rows {
            let s: f64 = m.row(i).iter().sum();
            let empty = m.row(i).iter().all(|&w| w == 0.0);
            if !empty && (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Validation(format!(
                    "mapping row {i} sums to {s}, expected 1 or an all-zero row"
                )));
            }
        }
        Ok(m)
    }

    /// Uniform weights `1/|assigned_i|` over each row's columns. Duplicate
    /// column indices within a row are counted once.
    pub fn uniform(cols: usize, assignments: &[Vec<usize>]) -> Result<Self> {
        let rows = assignments.len();
        let mut weights = vec![0.0; rows * cols.max(1)];
        for (i, cols_i) in assignments.iter().enumerate() {
            let mut uniq = cols_i.clone();
            uniq.sort_unstable();
            uniq.dedup();
            if let Some(&bad) = uniq.iter().find(|&&c| c >= cols) {
                return Err(Error::Dimension(format!(
                    "row {i} references column {bad} but only {cols} columns exist"
                )));
            }
            let w = 1.0 / uniq.len() as f64;
            for c in uniq {
                weights[i * cols + c] = w;
            }
        }
        Self::new(rows, cols, weights)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.cols + j]
    }

    /// Columns with a nonzero weight in row `i`.
    pub fn nonzero_cols(&self, i: usize) -> Vec<usize> {
        self.row(i)
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    /// New matrix whose column `j` is this matrix's column `perm[j]`.
    pub fn permute_cols(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.cols {
            return Err(Error::Dimension("permutation length".into()));
        }
        let mut w = vec![0.0; self.weights.len()];
        for i in 0..self.rows {
            for (j, &src) in perm.iter().enumerate() {
                w[i * self.cols + j] = self.get(i, src);
            }
        }
        Self::new(self.rows, self.cols, w)
    }
}

/// Which average the kernel realises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    Mixture,
    Fusion,
}

struct Dims {
    b: usize,
    l: usize,
    d: usize,
    p: usize,
    r: usize,
}

fn check_inputs(
    x: &DenseTensor,
    a_stack: &DenseTensor,
    b_stack: &DenseTensor,
    m: &MappingMatrix,
    scale: &[f64],
) -> Result<Dims> {
    let (b, l, d) = x.dims3()?;
    let (p, r, da) = a_stack.dims3()?;
    let (pb, db, rb) = b_stack.dims3()?;
    if da != d || db != d {
        return Err(Error::Dimension(format!(
            "width mismatch: x has d={d}, A stack {da}, B stack {db}"
        )));
    }
    if pb != p {
        return Err(Error::Dimension(format!(
            "A stack has {p} adapters, B stack {pb}"
        )));
    }
    if rb != r {
        return Err(Error::RankMismatch(format!(
            "A stack has rank {r}, B stack rank {rb}"
        )));
    }
    if m.rows() != b || m.cols() != p {
        return Err(Error::Dimension(format!(
            "mapping is {}x{}, expected {b}x{p}",
            m.rows(),
            m.cols()
        )));
    }
    if scale.len() != p {
        return Err(Error::Dimension(format!(
            "{} scales for {p} adapters",
            scale.len()
        )));
    }
    Ok(Dims { b, l, d, p, r })
}

fn fold_scale(b_stack: &DenseTensor, scale: &[f64], block: usize) -> Vec<f64> {
    let mut out = b_stack.data().to_vec();
    for (chunk, &s) in out.chunks_mut(block).zip(scale) {
        for v in chunk {
            *v *= s;
        }
    }
    out
}

/// `X' = M ∘ (B ∘ A ∘ X)`: per-sample average of adapter outputs.
pub fn batched_lora_mixture(
    x: &DenseTensor,
    a_stack: &DenseTensor,
    b_stack: &DenseTensor,
    m: &MappingMatrix,
    scale: &[f64],
) -> Result<DenseTensor> {
    let Dims { b, l, d, p, r } = check_inputs(x, a_stack, b_stack, m, scale)?;
    let bl = b * l;
    let b_scaled = fold_scale(b_stack, scale, d * r);

    // mid[(b,l), (p,r)] = X[(b,l), d] · A[(p,r), d]^T
    let mut mid = vec![0.0; bl * p * r];
    gemm(
        bl,
        d,
        p * r,
        Strided::row_major(x.data(), d),
        Strided::transposed(a_stack.data(), d),
        &mut mid,
        (p * r) as isize,
        false,
    );

    // mid2[(b,l), p, d] = mid[(b,l), p, r] · B_p[d, r]^T
    let mut mid2 = vec![0.0; bl * p * d];
    for j in 0..p {
        gemm(
            bl,
            r,
            d,
            Strided {
                data: &mid[j * r..],
                row_stride: (p * r) as isize,
                col_stride: 1,
            },
            Strided::transposed(&b_scaled[j * d * r..(j + 1) * d * r], r),
            &mut mid2[j * d..],
            (p * d) as isize,
            false,
        );
    }

    // out[b,l,d] = Σ_p mid2[b,l,p,d] · M[b,p]
    let mut out = vec![0.0; bl * d];
    for bi in 0..b {
        let weights = m.row(bi);
        for li in 0..l {
            let row = bi * l + li;
            let dst = &mut out[row * d..(row + 1) * d];
            for (j, &w) in weights.iter().enumerate() {
                let src = &mid2[(row * p + j) * d..(row * p + j + 1) * d];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
    }
    DenseTensor::new(vec![b, l, d], out)
}

/// `X' = (M ∘ B)(M ∘ A) ∘ X`: per-sample averaged factors, then one low-rank product.
pub fn batched_lora_fusion(
    x: &DenseTensor,
    a_stack: &DenseTensor,
    b_stack: &DenseTensor,
    m: &MappingMatrix,
    scale: &[f64],
) -> Result<DenseTensor> {
    let Dims { b, l, d, p, r } = check_inputs(x, a_stack, b_stack, m, scale)?;
    let rd = r * d;
    let b_scaled = fold_scale(b_stack, scale, rd);

    let mut fa = vec![0.0; b * rd];
    gemm(
        b,
        p,
        rd,
        Strided::row_major(m.weights(), p),
        Strided::row_major(a_stack.data(), rd),
        &mut fa,
        rd as isize,
        false,
    );
    let mut fb = vec![0.0; b * rd];
    gemm(
        b,
        p,
        rd,
        Strided::row_major(m.weights(), p),
        Strided::row_major(&b_scaled, rd),
        &mut fb,
        rd as isize,
        false,
    );

    let mut out = vec![0.0; b * l * d];
    let mut mid = vec![0.0; l * r];
    for bi in 0..b {
        let xs = &x.data()[bi * l * d..(bi + 1) * l * d];
        gemm(
            l,
            d,
            r,
            Strided::row_major(xs, d),
            Strided::transposed(&fa[bi * rd..(bi + 1) * rd], d),
            &mut mid,
            r as isize,
            false,
        );
        gemm(
            l,
            r,
            d,
            Strided::row_major(&mid, r),
            Strided::transposed(&fb[bi * rd..(bi + 1) * rd], r),
            &mut out[bi * l * d..(bi + 1) * l * d],
            d as isize,
            false,
        );
    }
    DenseTensor::new(vec![b, l, d], out)
}

pub fn batched_lora(
    mode: KernelMode,
    x: &DenseTensor,
    a_stack: &DenseTensor,
    b_stack: &DenseTensor,
    m: &MappingMatrix,
    scale: &[f64],
) -> Result<DenseTensor> {
    match mode {
        KernelMode::Mixture => batched_lora_mixture(x, a_stack, b_stack, m, scale),
        KernelMode::Fusion => batched_lora_fusion(x, a_stack, b_stack, m, scale),
    }
}

/// One adapter's factors for a single layer, as consumed by [`sequential_oracle`].
#[derive(Debug, Clone, Copy)]
pub struct LayerFactors<'a> {
    /// `r×d`
    pub a: &'a DenseTensor,
    /// `d×r`
    pub b: &'a DenseTensor,
    pub scale: f64,
}

/// Slow per-sample reference for both kernels, written with plain loops.
///
/// Mixture: `(1/n) Σ_j scale_j·B_j·A_j·x`. Fusion: `mean(scale_j·B_j) · mean(A_j) · x`,
/// with lower-rank factors zero-padded to the sample's largest rank.
pub fn sequential_oracle(
    x: &DenseTensor,
    per_sample: &[Vec<LayerFactors<'_>>],
    mode: KernelMode,
) -> Result<DenseTensor> {
    let (b, l, d) = x.dims3()?;
    if per_sample.len() != b {
        return Err(Error::Dimension(format!(
            "{} adapter lists for a batch of {b}",
            per_sample.len()
        )));
    }
    for f in per_sample.iter().flatten() {
        let (ra, da) = f.a.dims2()?;
        let (db, rb) = f.b.dims2()?;
        if da != d || db != d || ra != rb {
            return Err(Error::Dimension(format!(
                "factor shapes A {:?} / B {:?} do not fit width {d}",
                f.a.shape(),
                f.b.shape()
            )));
        }
    }

    let mut out = DenseTensor::zeros(&[b, l, d]);
    for (i, adapters) in per_sample.iter().enumerate() {
        if adapters.is_empty() {
            continue;
        }
        let n = adapters.len() as f64;
        match mode {
            KernelMode::Mixture => {
                for f in adapters {
                    let r = f.a.shape()[0];
                    for t in 0..l {
                        let xs = &x.data()[(i * l + t) * d..(i * l + t + 1) * d];
                        let mut ax = vec![0.0; r];
                        for (k, v) in ax.iter_mut().enumerate() {
                            for (c, xv) in xs.iter().enumerate() {
                                *v += f.a.get(&[k, c]) * xv;
                            }
                        }
                        for o in 0..d {
                            let mut s = 0.0;
                            for (k, v) in ax.iter().enumerate() {
                                s += f.b.get(&[o, k]) * v;
                            }
                            let idx = [i, t, o];
                            out.set(&idx, out.get(&idx) + f.scale * s / n);
                        }
                    }
                }
            }
            KernelMode::Fusion => {
                let r = adapters.iter().map(|f| f.a.shape()[0]).max().unwrap_or(0);
                let mut fa = vec![vec![0.0; d]; r];
                let mut fb = vec![vec![0.0; r]; d];
                for f in adapters {
                    let rf = f.a.shape()[0];
                    for k in 0..rf {
                        for c in 0..d {
                            fa[k][c] += f.a.get(&[k, c]) / n;
                            fb[c][k] += f.scale * f.b.get(&[c, k]) / n;
                        }
                    }
                }
                for t in 0..l {
                    let xs = &x.data()[(i * l + t) * d..(i * l + t + 1) * d];
                    let ax: Vec<f64> = fa
                        .iter()
                        .map(|row| row.iter().zip(xs).map(|(a, v)| a * v).sum())
                        .collect();
                    for (o, brow) in fb.iter().enumerate() {
                        let s: f64 = brow.iter().zip(&ax).map(|(bv, v)| bv * v).sum();
                        out.set(&[i, t, o], s);
                    }
                }
            }
        }
    }
    Ok(out)
}
