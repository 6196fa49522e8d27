//! Dense numeric primitives: row-major f32 matrices, stable softmax, and
//! mergeable streaming-softmax partials.
//!
//! Inputs are stored in f32 (matching the on-disk tensor format) but every
//! reduction — dot products, softmax statistics, output accumulation — runs
//! in f64 so results are invariant to block size and merge order well below
//! test tolerances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major f32 matrix. Rows are vectors (keys, values, queries, centroids).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Validates that `data` has exactly `rows * cols` entries and every
    /// entry is finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix data has {} entries, expected {rows}x{cols} = {}",
                data.len(),
                rows * cols
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Invariant(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Dimension(format!(
                "ragged rows: expected {cols} columns, found {}",
                bad.len()
            )));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1))
    }
}

/// Dot product with f64 accumulation.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// Max-subtracted softmax. Empty input yields empty output; the result sums
/// to 1 otherwise.
pub fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    if logits.is_empty() {
        return Vec::new();
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let d: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / d).collect()
}

/// Partial softmax state over a subset of (logit, value) pairs: running max
/// `m`, denominator `d` (sum of exp(logit - m)), and unnormalized output
/// accumulator `out` (sum of exp(logit - m) * value).
///
/// Partials over disjoint subsets merge into the partial over the union, so
/// attention can be computed block by block in any order. The empty partial
/// (`m = -inf`, `d = 0`, `out = 0`) is the merge identity.
#[derive(Debug, Clone)]
pub struct SoftmaxPartial {
    m: f64,
    d: f64,
    out: Vec<f64>,
}

impl SoftmaxPartial {
    pub fn empty(dim: usize) -> Self {
        Self {
            m: f64::NEG_INFINITY,
            d: 0.0,
            out: vec![0.0; dim],
        }
    }

    pub fn max_logit(&self) -> f64 {
        self.m
    }

    pub fn denominator(&self) -> f64 {
        self.d
    }

    pub fn is_empty(&self) -> bool {
        self.d == 0.0
    }

    /// Folds one (logit, value) pair into the running state.
    pub fn absorb(&mut self, logit: f64, value: &[f32]) {
        debug_assert_eq!(value.len(), self.out.len());
        let m_new = self.m.max(logit);
        let scale = if self.d == 0.0 {
            0.0
        } else {
            (self.m - m_new).exp()
        };
        let e = (logit - m_new).exp();
        self.d = self.d * scale + e;
        for (o, &v) in self.out.iter_mut().zip(value) {
            *o = *o * scale + e * f64::from(v);
        }
        self.m = m_new;
    }

    /// Merges another partial (over a disjoint subset) into this one.
    /// Merging with the empty partial leaves the other side unchanged.
    pub fn merge(&mut self, other: &SoftmaxPartial) {
        debug_assert_eq!(other.out.len(), self.out.len());
        if other.d == 0.0 {
            return;
        }
        if self.d == 0.0 {
            self.m = other.m;
            self.d = other.d;
            self.out.copy_from_slice(&other.out);
            return;
        }
        let m_new = self.m.max(other.m);
        let s_a = (self.m - m_new).exp();
        let s_b = (other.m - m_new).exp();
        self.d = self.d * s_a + other.d * s_b;
        for (o, &b) in self.out.iter_mut().zip(&other.out) {
            *o = *o * s_a + b * s_b;
        }
        self.m = m_new;
    }

    /// Normalizes the accumulator into the attention output. Errors if no
    /// pair was ever absorbed (there is nothing to normalize over).
    pub fn finalize(&self) -> Result<Vec<f32>> {
        if self.d == 0.0 {
            return Err(Error::EmptySelection(
                "softmax partial covers no keys".into(),
            ));
        }
        Ok(self.out.iter().map(|&o| (o / self.d) as f32).collect())
    }
}
