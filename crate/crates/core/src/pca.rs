//! Principal component analysis of logit matrices.
//!
//! Only used to build the feature space the clusterer works in; the logit
//! correction itself stays in the original coordinates. Data are centered
//! but not scaled. The covariance is the population covariance (divided by
//! `n`), so `explained_variance` equals the per-dimension variance of the
//! transformed fitting set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matrix_rows, Tensor};

pub const DEFAULT_PCA_DIM: usize = 50;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// `a` is `n x n` row-major. Returns eigenvalues (unsorted, diagonal order)
/// and the eigenvectors as the columns of a row-major `n x n` matrix.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n, "jacobi_eigen needs an n x n matrix");
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>();
    let tol = (1e-30 * frob).max(f64::MIN_POSITIVE);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| m[p * n + q] * m[p * n + q])
            .sum();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..n).map(|i| m[i * n + i]).collect();
    (values, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k x d`, orthonormal rows, strongest direction first.
    #[serde(with = "matrix_rows")]
    pub components: Tensor,
    pub explained_variance: Vec<f64>,
    /// Set when fewer than `k` directions carry variance; the trailing
    /// components then come from the eigenbasis completion and have zero
    /// explained variance.
    pub rank_deficient: bool,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.components.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, d) = self.components.expect_matrix("components")?;
        if d != self.mean.len() {
            return Err(Error::validation(
                "pca.components",
                format!("component width {d} differs from mean length {}", self.mean.len()),
            ));
        }
        if self.explained_variance.len() != k {
            return Err(Error::validation(
                "pca.explained_variance",
                format!("{} entries for {k} components", self.explained_variance.len()),
            ));
        }
        if self.explained_variance.iter().any(|v| !v.is_finite() || *v < 0.0)
            || self.explained_variance.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::validation(
                "pca.explained_variance",
                "must be non-negative and non-increasing",
            ));
        }
        for i in 0..k {
            for j in 0..k {
                let dot: f64 = self
                    .components
                    .row(i)
                    .iter()
                    .zip(self.components.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-8 {
                    return Err(Error::validation(
                        "pca.components",
                        format!("rows {i} and {j} are not orthonormal (dot = {dot})"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Projects centered rows onto the components: `m x d -> m x k`.
    pub fn transform(&self, logits: &Tensor) -> Result<Tensor> {
        let (m, d) = logits.expect_matrix("pca input")?;
        if d != self.input_dim() {
            return Err(Error::Contract(format!(
                "logit width {d} does not match PCA width {}",
                self.input_dim()
            )));
        }
        let k = self.dim();
        let mut out = Vec::with_capacity(m * k);
        let mut centered = vec![0.0; d];
        for row in logits.row_iter() {
            for ((c, &x), &mu) in centered.iter_mut().zip(row).zip(&self.mean) {
                *c = x - mu;
            }
            for comp in self.components.row_iter() {
                out.push(comp.iter().zip(&centered).map(|(a, b)| a * b).sum());
            }
        }
        Tensor::matrix(m, k, out)
    }
}

/// Top-`k` principal directions of the rows of `logits`.
pub fn pca_fit(logits: &Tensor, k: usize) -> Result<PcaModel> {
    let (n, d) = logits.expect_matrix("pca input")?;
    if n < 2 {
        return Err(Error::Parameter(format!("PCA needs at least 2 samples, got {n}")));
    }
    let max_k = (n - 1).min(d);
    if k < 1 || k > max_k {
        return Err(Error::Parameter(format!(
            "PCA dimension {k} outside [1, {max_k}] for {n} samples of width {d}"
        )));
    }

    let mut mean = vec![0.0; d];
    for row in logits.row_iter() {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in logits.row_iter() {
        for ((c, &x), &mu) in centered.iter_mut().zip(row).zip(&mean) {
            *c = x - mu;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / n as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }

    let (values, vectors) = jacobi_eigen(&cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));

    let top = values[order[0]].max(0.0);
    let floor = top * 1e-12 * d as f64;
    let mut components = Vec::with_capacity(k * d);
    let mut explained = Vec::with_capacity(k);
    let mut rank_deficient = false;
    for &idx in order.iter().take(k) {
        let mut comp: Vec<f64> = (0..d).map(|r| vectors[r * d + idx]).collect();
        orient(&mut comp);
        components.extend_from_slice(&comp);
        let lambda = values[idx];
        if lambda <= floor {
            rank_deficient = true;
            explained.push(0.0);
        } else {
            explained.push(lambda);
        }
    }

    Ok(PcaModel {
        mean,
        components: Tensor::matrix(k, d, components)?,
        explained_variance: explained,
        rank_deficient,
    })
}

/// Flips `v` so its largest-magnitude entry (first one on ties) is positive.
fn orient(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn pca_transform(model: &PcaModel, logits: &Tensor) -> Result<Tensor> {
    model.transform(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points() {
        let rows: Vec<[f64; 2]> = (0..6).map(|i| [i as f64, 2.0 * i as f64]).collect();
        let t = Tensor::from_rows(&rows).unwrap();
        let m = pca_fit(&t, 1).unwrap();
        let s5 = 5f64.sqrt();
        assert!((m.components.row(0)[0] - 1.0 / s5).abs() < 1e-12);
        assert!((m.components.row(0)[1] - 2.0 / s5).abs() < 1e-12);
        assert!(!m.rank_deficient);
        // The full fit exposes the zero second eigenvalue.
        let full = pca_fit(&t, 2).unwrap();
        assert!(full.rank_deficient);
        assert_eq!(full.explained_variance[1], 0.0);
        full.validate().unwrap();
    }

    #[test]
    fn isotropic_cross() {
        let t = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap();
        let m = pca_fit(&t, 2).unwrap();
        assert!((m.explained_variance[0] - m.explained_variance[1]).abs() < 1e-12);
        assert!((m.explained_variance[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mean_row_maps_to_origin() {
        let t = Tensor::from_rows(&[[1.0, 2.0, 0.5], [3.0, -1.0, 2.0], [0.0, 0.0, 4.0]]).unwrap();
        let m = pca_fit(&t, 2).unwrap();
        let origin = m.transform(&Tensor::from_rows(std::slice::from_ref(&m.mean)).unwrap()).unwrap();
        assert!(origin.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn parameter_errors() {
        let t = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(pca_fit(&t, 0), Err(Error::Parameter(_))));
        assert!(matches!(pca_fit(&t, 3), Err(Error::Parameter(_))));
        let one = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(pca_fit(&one, 1), Err(Error::Parameter(_))));
        let m = pca_fit(&t, 1).unwrap();
        let wide = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(m.transform(&wide), Err(Error::Contract(_))));
    }

    #[test]
    fn jacobi_diagonal_passthrough() {
        let (vals, vecs) = jacobi_eigen(&[3.0, 0.0, 0.0, -1.0], 2);
        assert_eq!(vals, vec![3.0, -1.0]);
        assert_eq!(vecs, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn validate_catches_non_orthonormal() {
        let t = Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]).unwrap();
        let mut m = pca_fit(&t, 2).unwrap();
        m.components = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        assert!(matches!(m.validate(), Err(Error::Validation { .. })));
    }
}
