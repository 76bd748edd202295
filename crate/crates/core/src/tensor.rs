//! Dense row-major tensors and the handful of kernels the model needs.
//!
//! Values are `f64` in memory (checkpoints store `f32`). Tensors are
//! immutable once built and cheap to clone.

use std::fmt;
use std::sync::Arc;

/// Variance stabilizer used by [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("tape usage error: {0}")]
    Usage(String),
}

pub type TensorResult<T> = std::result::Result<T, TensorError>;

fn dim_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Dimension { op, detail }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err(
                "new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data: data.into(),
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> TensorResult<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Build a matrix from nested rows. Panics on ragged input, so keep it to literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::matrix(rows.len(), cols, data).expect("consistent by construction")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            shape: vec![n],
            data: data.into(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value].into(),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n].into(),
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n].into(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> TensorResult<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(dim_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub(crate) fn checked(self, op: &'static str) -> TensorResult<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    fn require_matrix(&self, op: &'static str) -> TensorResult<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Column slice `[.., start..end]` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> TensorResult<Self> {
        let (r, c) = self.require_matrix("slice_cols")?;
        if start > end || end > c {
            return Err(dim_err("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor::matrix(r, w, out)
    }

    /// Row slice `[start..end, ..]` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> TensorResult<Self> {
        let (r, c) = self.require_matrix("slice_rows")?;
        if start > end || end > r {
            return Err(dim_err("slice_rows", format!("{start}..{end} of {r} rows")));
        }
        Tensor::matrix(end - start, c, self.data[start * c..end * c].to_vec())
    }

    pub fn transpose(&self) -> TensorResult<Self> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> TensorResult<Self> {
        if self.shape != other.shape {
            return Err(dim_err(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> TensorResult<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> TensorResult<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// Sum of all entries, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Inner product of two same-shaped tensors, accumulated in `f64`.
    pub fn dot(&self, other: &Tensor) -> TensorResult<f64> {
        if self.shape != other.shape {
            return Err(dim_err("dot", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum())
    }

    /// Gather rows by index.
    pub fn gather_rows(&self, indices: &[usize]) -> TensorResult<Self> {
        let (r, c) = self.require_matrix("gather_rows")?;
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(dim_err("gather_rows", format!("row {i} of {r}")));
            }
            out.extend_from_slice(self.row(i));
        }
        Tensor::matrix(indices.len(), c, out)
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(parts: &[&Tensor]) -> TensorResult<Self> {
        let Some(first) = parts.first() else {
            return Err(dim_err("concat_cols", "no inputs".into()));
        };
        let rows = first.require_matrix("concat_cols")?.0;
        let mut total = 0;
        for p in parts {
            let (r, c) = p.require_matrix("concat_cols")?;
            if r != rows {
                return Err(dim_err("concat_cols", format!("{r} rows vs {rows}")));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Tensor::matrix(rows, total, out)
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    let (m, k) = a.require_matrix("matmul")?;
    let (k2, n) = b.require_matrix("matmul")?;
    if k != k2 {
        return Err(dim_err("matmul", format!("{:?} x {:?}", a.shape, b.shape)));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f64; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (acc_j, &bv) in acc.iter_mut().zip(brow) {
                *acc_j += av * bv;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v;
        }
    }
    Tensor::matrix(m, n, out)?.checked("matmul")
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    let (m, k) = a.require_matrix("matmul_nt")?;
    let (n, k2) = b.require_matrix("matmul_nt")?;
    if k != k2 {
        return Err(dim_err("matmul_nt", format!("{:?} x {:?}ᵀ", a.shape, b.shape)));
    }
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            let br = b.row(j);
            let s: f64 = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
            out[i * n + j] = s;
        }
    }
    Tensor::matrix(m, n, out)?.checked("matmul_nt")
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    let (k, m) = a.require_matrix("matmul_tn")?;
    let (k2, n) = b.require_matrix("matmul_tn")?;
    if k != k2 {
        return Err(dim_err("matmul_tn", format!("{:?}ᵀ x {:?}", a.shape, b.shape)));
    }
    let mut acc = vec![0.0f64; m * n];
    for p in 0..k {
        let ar = a.row(p);
        let br = b.row(p);
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (j, &bv) in br.iter().enumerate() {
                acc[i * n + j] += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, acc)?.checked("matmul_tn")
}

/// Row-wise softmax restricted to the causal prefix: row `i` covers columns
/// `0..=i`, everything above the diagonal is exactly zero.
pub fn causal_softmax(scores: &Tensor) -> TensorResult<Tensor> {
    let (n, c) = scores.require_matrix("causal_softmax")?;
    if n != c {
        return Err(dim_err("causal_softmax", format!("non-square {n}x{c}")));
    }
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        let row = &scores.row(i)[..=i];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            out[i * n + j] = e / denom;
        }
    }
    Tensor::matrix(n, n, out)?.checked("causal_softmax")
}

/// Plain row-wise softmax over the last dimension.
pub fn softmax_rows(x: &Tensor) -> TensorResult<Tensor> {
    let (r, c) = x.require_matrix("softmax_rows")?;
    let mut out = vec![0.0f64; r * c];
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            out[i * c + j] = e / denom;
        }
    }
    Tensor::matrix(r, c, out)?.checked("softmax_rows")
}

/// Log-softmax of a single row, computed in `f64`.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

/// Per-row normalization statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerNormStats {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_with_stats(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
) -> TensorResult<(Tensor, LayerNormStats)> {
    let (n, d) = x.require_matrix("layer_norm")?;
    if gain.len() != d || bias.len() != d {
        return Err(dim_err(
            "layer_norm",
            format!("input {:?}, gain {:?}, bias {:?}", x.shape, gain.shape, bias.shape),
        ));
    }
    let mut out = vec![0.0f64; n * d];
    let mut normalized = vec![0.0f64; n * d];
    let mut inv_std = vec![0.0f64; n];
    let g = gain.data();
    let b = bias.data();
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[i] = rstd;
        for j in 0..d {
            let xh = (row[j] - mean) * rstd;
            normalized[i * d + j] = xh;
            out[i * d + j] = xh * g[j] + b[j];
        }
    }
    let t = Tensor::matrix(n, d, out)?.checked("layer_norm")?;
    Ok((t, LayerNormStats { normalized, inv_std }))
}

/// Layer normalization over the last dimension with population variance
/// and an affine `gain`/`bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> TensorResult<Tensor> {
    layer_norm_with_stats(x, gain, bias).map(|(t, _)| t)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}
