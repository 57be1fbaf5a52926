//! Dense tensors and the statistical primitives shared by the pipeline:
//! tempered softmax, KL divergence and element-wise paired moments.
//!
//! All arithmetic is `f64`. Matrices are row-major with samples as rows.

use crate::error::{Error, Result};

/// A dense row-major tensor of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` matches `data.len()` and that
    /// every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Contract("tensor rank must be at least 1".into()));
        }
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    /// Stacks equally sized rows into an `n x d` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::EmptySet("cannot build a matrix from zero rows".into()));
        };
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Contract(format!(
                    "row {i} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Errors unless the tensor is 2-D.
    pub fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Contract(format!(
                "{what} must be a matrix, got shape {other:?}"
            ))),
        }
    }

    /// Row count of a matrix (first dimension for higher ranks).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of a matrix: the product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols())
    }

    /// Gathers the given rows, in order, into a new matrix. An empty index
    /// list is allowed and produces no tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Option<Tensor> {
        if indices.is_empty() {
            return None;
        }
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Some(Tensor { shape, data })
    }

    /// First `n` rows (all of them if `n` exceeds the row count).
    pub fn head_rows(&self, n: usize) -> Tensor {
        let n = n.min(self.rows()).max(1);
        let idx: Vec<usize> = (0..n).collect();
        self.select_rows(&idx).expect("n >= 1")
    }

    /// Applies `f` elementwise, re-checking finiteness.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.row_iter().map(<[f64]>::to_vec).collect()
    }
}

/// Element-wise moments of one matrix, optionally paired with a second one.
///
/// Moments are population moments: sums are divided by the row count `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElemStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Present only when computed by [`paired_stats`].
    pub cross: Option<CrossStats>,
}

/// Moments of the second matrix of a pair and the per-column covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub cross_cov: Vec<f64>,
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

/// Log of `softmax(logits / t)`, stabilized by subtracting the maximum.
pub fn log_softmax_t(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    check_temperature(t)?;
    if logits.is_empty() {
        return Err(Error::EmptySet("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("softmax input contains non-finite logits".into()));
    }
    Ok(log_softmax_unchecked(logits, t))
}

pub(crate) fn log_softmax_unchecked(logits: &[f64], t: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|&z| (z - max) / t).collect();
    let log_norm = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - log_norm).collect()
}

/// `softmax(logits / t)`.
pub fn softmax_t(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    let log_p = log_softmax_t(logits, t)?;
    let p: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    // Renormalize so the sum is 1 to the last bit that f64 allows.
    let total: f64 = p.iter().sum();
    Ok(p.into_iter().map(|v| v / total).collect())
}

/// `KL(p || q) = sum_c p_c ln(p_c / q_c)`, with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Contract(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Parameter(format!("{name} has a negative or non-finite entry")));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("{name} sums to {s}, not 1")));
        }
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::Parameter(format!(
                "q[{i}] is zero where p[{i}] = {pi} is positive"
            )));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

/// KL divergence between the tempered softmaxes of two logit vectors,
/// given the reference side already in log-probability form.
pub(crate) fn kl_from_log_probs(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum::<f64>()
        .max(0.0)
}

/// Population moments of each column of `a`.
pub fn column_stats(a: &Tensor) -> Result<ElemStats> {
    let (n, d) = a.expect_matrix("column_stats input")?;
    let mean = column_mean(a, n, d);
    let mut variance = vec![0.0; d];
    for row in a.row_iter() {
        for ((v, &x), &m) in variance.iter_mut().zip(row).zip(&mean) {
            let c = x - m;
            *v += c * c;
        }
    }
    variance.iter_mut().for_each(|v| *v /= n as f64);
    Ok(ElemStats {
        mean,
        variance,
        cross: None,
    })
}

fn column_mean(a: &Tensor, n: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for row in a.row_iter() {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

/// Population means, variances and element-wise covariance of two aligned
/// `n x d` matrices.
pub fn paired_stats(a: &Tensor, b: &Tensor) -> Result<ElemStats> {
    let (n, d) = a.expect_matrix("paired_stats lhs")?;
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "paired_stats shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mean_a = column_mean(a, n, d);
    let mean_b = column_mean(b, n, d);
    let mut var_a = vec![0.0; d];
    let mut var_b = vec![0.0; d];
    let mut cov = vec![0.0; d];
    for (ra, rb) in a.row_iter().zip(b.row_iter()) {
        for j in 0..d {
            let ca = ra[j] - mean_a[j];
            let cb = rb[j] - mean_b[j];
            var_a[j] += ca * ca;
            var_b[j] += cb * cb;
            cov[j] += ca * cb;
        }
    }
    let inv = 1.0 / n as f64;
    for j in 0..d {
        var_a[j] *= inv;
        var_b[j] *= inv;
        cov[j] *= inv;
    }
    Ok(ElemStats {
        mean: mean_a,
        variance: var_a,
        cross: Some(CrossStats {
            mean: mean_b,
            variance: var_b,
            cross_cov: cov,
        }),
    })
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean squared difference over every entry of two equally shaped tensors.
pub fn mean_squared_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "mse shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Serde adapter that stores a matrix as a list of rows.
pub(crate) mod matrix_rows {
    use super::Tensor;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> Result<S::Ok, S::Error> {
        t.to_rows().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Tensor::from_rows(&rows).map_err(D::Error::custom)
    }
}
