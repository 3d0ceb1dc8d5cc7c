//! Dense matrix storage and the handful of numeric kernels the merging code
//! needs: cosine similarity, softmax, deterministic top-k and a single-level
//! orthonormal 2-D Haar transform.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so special-case empty column counts.
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (dst, &src) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, idx.len());
        for r in 0..self.rows {
            let src = self.row(r);
            for (o, &c) in out.row_mut(r).iter_mut().zip(idx) {
                *o = src[c];
            }
        }
        out
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot stack {} columns on {} columns",
                other.cols, self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Splits rows `[0, at)` and `[at, rows)` into two matrices.
    pub fn split_rows(&self, at: usize) -> (Matrix, Matrix) {
        let at = at.min(self.rows);
        let head = Matrix {
            rows: at,
            cols: self.cols,
            data: self.data[..at * self.cols].to_vec(),
        };
        let tail = Matrix {
            rows: self.rows - at,
            cols: self.cols,
            data: self.data[at * self.cols..].to_vec(),
        };
        (head, tail)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let lhs_row = self.row(r);
            let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
///
/// A zero-norm operand yields `0.0`, so all-zero padding tokens can be
/// scored without aborting a run.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    cosine_with_norms(a, b, l2_norm(a), l2_norm(b))
}

/// [`cosine_similarity`] with precomputed norms; bit-identical to it when
/// `na` and `nb` come from [`l2_norm`].
pub fn cosine_with_norms(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Numerically stable softmax (max-shifted).
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Descending by score, ascending by index on ties. NaN sorts last.
pub fn desc_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        let (x, y) = (scores[a], scores[b]);
        match y.partial_cmp(&x) {
            Some(Ordering::Equal) | None => match (x.is_nan(), y.is_nan()) {
                (false, true) => Ordering::Less,
                (true, false) => Ordering::Greater,
                _ => a.cmp(&b),
            },
            Some(o) => o,
        }
    }
}

/// Full ranking of `scores`: descending, ties broken by ascending index.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(desc_then_index(scores));
    idx
}

/// Indices of the `k` largest scores in descending order, ties by index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!(
            "top-k asked for {k} of {} candidates; check the compression schedule",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = desc_then_index(scores);
    if k > 0 && k < idx.len() {
        idx.select_nth_unstable_by(k - 1, &cmp);
    }
    idx.truncate(k);
    idx.sort_by(cmp);
    Ok(idx)
}

/// Coefficient blocks of a single-level 2-D Haar decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct HaarBands {
    pub ll: Matrix,
    pub lh: Matrix,
    pub hl: Matrix,
    pub hh: Matrix,
}

/// L2 norms of the four subbands.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SubbandNorms {
    pub ll: f64,
    pub lh: f64,
    pub hl: f64,
    pub hh: f64,
}

impl SubbandNorms {
    pub fn high(&self) -> f64 {
        self.lh + self.hl + self.hh
    }

    pub fn energy(&self) -> f64 {
        self.ll * self.ll + self.lh * self.lh + self.hl * self.hl + self.hh * self.hh
    }
}

impl HaarBands {
    pub fn norms(&self) -> SubbandNorms {
        SubbandNorms {
            ll: self.ll.frobenius_norm(),
            lh: self.lh.frobenius_norm(),
            hl: self.hl.frobenius_norm(),
            hh: self.hh.frobenius_norm(),
        }
    }
}

/// Orthonormal single-level 2-D Haar transform.
///
/// For each 2x2 block `[[a, b], [c, d]]`:
/// `LL = (a+b+c+d)/2`, `LH = (a+b-c-d)/2` (vertical detail),
/// `HL = (a-b+c-d)/2` (horizontal detail), `HH = (a-b-c+d)/2`.
pub fn haar_dwt2(field: &Matrix) -> Result<HaarBands> {
    let (h, w) = (field.rows(), field.cols());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "Haar transform needs even dimensions, got {h}x{w}"
        )));
    }
    let (hh_, hw) = (h / 2, w / 2);
    let mut bands = HaarBands {
        ll: Matrix::zeros(hh_, hw),
        lh: Matrix::zeros(hh_, hw),
        hl: Matrix::zeros(hh_, hw),
        hh: Matrix::zeros(hh_, hw),
    };
    for i in 0..hh_ {
        for j in 0..hw {
            let a = field.get(2 * i, 2 * j);
            let b = field.get(2 * i, 2 * j + 1);
            let c = field.get(2 * i + 1, 2 * j);
            let d = field.get(2 * i + 1, 2 * j + 1);
            bands.ll.set(i, j, 0.5 * (a + b + c + d));
            bands.lh.set(i, j, 0.5 * (a + b - c - d));
            bands.hl.set(i, j, 0.5 * (a - b + c - d));
            bands.hh.set(i, j, 0.5 * (a - b - c + d));
        }
    }
    Ok(bands)
}

/// Inverse of [`haar_dwt2`].
pub fn haar_idwt2(bands: &HaarBands) -> Result<Matrix> {
    let (hh_, hw) = (bands.ll.rows(), bands.ll.cols());
    for m in [&bands.lh, &bands.hl, &bands.hh] {
        if m.rows() != hh_ || m.cols() != hw {
            return Err(Error::Shape("Haar subbands differ in size".into()));
        }
    }
    let mut out = Matrix::zeros(2 * hh_, 2 * hw);
    for i in 0..hh_ {
        for j in 0..hw {
            let (ll, lh, hl, hh) = (
                bands.ll.get(i, j),
                bands.lh.get(i, j),
                bands.hl.get(i, j),
                bands.hh.get(i, j),
            );
            out.set(2 * i, 2 * j, 0.5 * (ll + lh + hl + hh));
            out.set(2 * i, 2 * j + 1, 0.5 * (ll + lh - hl - hh));
            out.set(2 * i + 1, 2 * j, 0.5 * (ll - lh + hl - hh));
            out.set(2 * i + 1, 2 * j + 1, 0.5 * (ll - lh - hl + hh));
        }
    }
    Ok(out)
}
