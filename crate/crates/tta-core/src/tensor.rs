//! Dense row-major tensor of f64 values.
//!
//! The sole value carrier of the numeric core. Only rank-1 and rank-2
//! shapes are exercised by the pipeline; the struct itself is rank-agnostic.

use crate::error::{Result, TtaError};
use serde::{Deserialize, Serialize};

/// Probabilities below this are floored before any log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TtaError::ShapeMismatch {
                op: "Tensor::new",
                expected: format!("{numel} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(TtaError::EmptyInput { what: "from_rows" });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TtaError::ShapeMismatch {
                    op: "Tensor::from_rows",
                    expected: format!("{cols} columns"),
                    got: format!("{}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows when viewed as a matrix; a rank-1 tensor is one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => self.data.len(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// New tensor keeping only the listed rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.rows() {
                return Err(TtaError::invalid(format!(
                    "row index {i} out of range for {} rows",
                    self.rows()
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![indices.len(), c], data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TtaError::NonFinite {
                op,
                context: String::new(),
            })
        }
    }
}

// ── Value-level kernels shared by the tape and no-grad paths ────────────────

/// C[m,n] = A[m,k] · B[k,n], plain triple loop.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// Row-wise max-shifted softmax.
pub(crate) fn softmax_kernel(rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..cols {
            let e = (row[j] - max).exp();
            out[r * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[r * cols + j] /= sum;
        }
    }
}

/// Row-wise softmax as a plain value computation.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = vec![0.0; rows * cols];
    softmax_kernel(rows, cols, logits.data(), &mut out);
    Tensor {
        shape: logits.shape().to_vec(),
        data: out,
    }
}

/// Shannon entropy of one probability row; entries are floored before the log
/// so a one-hot row yields exactly zero.
pub fn entropy_of_probs(p: &[f64]) -> f64 {
    let mut e = 0.0;
    for &v in p {
        e -= v * v.max(PROB_FLOOR).ln();
    }
    e
}

/// KL(p || q) with 0·log 0 := 0 and both log arguments floored.
pub fn kl_of_probs(p: &[f64], q: &[f64]) -> f64 {
    let mut d = 0.0;
    for (&pv, &qv) in p.iter().zip(q) {
        d += pv * (pv.max(PROB_FLOOR).ln() - qv.max(PROB_FLOOR).ln());
    }
    d
}

/// Index of the row maximum; ties broken toward the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cosine similarity of two vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(TtaError::invalid("cosine similarity of zero-norm vector"));
    }
    Ok(dot / (na * nb))
}

/// Validate that every row of `t` is a probability vector: entries >= 0 and
/// each row summing to one within 1e-9.
pub fn check_probability_rows(t: &Tensor, op: &'static str) -> Result<()> {
    let cols = t.cols();
    for r in 0..t.rows() {
        let row = &t.data()[r * cols..(r + 1) * cols];
        let sum: f64 = row.iter().sum();
        let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
        if (sum - 1.0).abs() > 1e-9 || min < -1e-12 {
            return Err(TtaError::NotNormalized { op, sum, min });
        }
    }
    Ok(())
}
