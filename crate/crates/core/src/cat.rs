//! Cluster-based affine correction of low-bit logits.
//!
//! Fitting: project the low-bit logits with PCA, cluster the projections
//! with k-means, then for every cluster solve a per-coordinate affine map
//! from low-bit to full-precision logits in closed form:
//!
//! ```text
//! gamma_k = cov_k(lq, fp) / (var_k(lq) + eps)
//! beta_k  = mean_k(fp) - gamma_k * mean_k(lq)
//! ```
//!
//! with population moments over the cluster's rows. An empty cluster keeps
//! the identity map. Inference assigns each row to a cluster through the
//! same PCA and centroids and blends:
//!
//! ```text
//! out = (1 - alpha) * lq + alpha * (gamma_k * lq + beta_k)
//! ```
//!
//! PCA only shapes the clustering; the affine maps always act on the
//! original `d`-dimensional logits. With `K = 1` this is the plain
//! (uniform-parameter) affine correction.

use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_fit, KMeansModel, DEFAULT_CLUSTERS};
use crate::error::{Error, Result};
use crate::numerics::{mean_squared_error, paired_stats, Tensor};
use crate::pca::{pca_fit, PcaModel, DEFAULT_PCA_DIM};

pub const DEFAULT_ALPHA: f64 = 0.4;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// How the variance denominator is protected against zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceGuard {
    /// `var + eps`
    #[default]
    Additive,
    /// `max(var, eps)`
    Floor,
}

impl VarianceGuard {
    fn denominator(self, var: f64, eps: f64) -> f64 {
        match self {
            VarianceGuard::Additive => var + eps,
            VarianceGuard::Floor => var.max(eps),
        }
    }
}

/// Per-cluster affine map `fp ~ gamma * lq + beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub cluster_size: usize,
    /// Coordinates whose low-bit variance fell below `eps`.
    pub degenerate_dims: Vec<usize>,
}

impl AffineParams {
    /// `gamma = 1`, `beta = 0`: the map used for empty clusters.
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
            cluster_size: 0,
            degenerate_dims: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// `gamma * row + beta` into `out`.
    fn map_into(&self, row: &[f64], out: &mut Vec<f64>) {
        out.extend(
            row.iter()
                .zip(&self.gamma)
                .zip(&self.beta)
                .map(|((&q, &g), &b)| g * q + b),
        );
    }

    fn blend_into(&self, row: &[f64], alpha: f64, out: &mut Vec<f64>) {
        if alpha == 0.0 {
            out.extend_from_slice(row);
        } else if alpha == 1.0 {
            self.map_into(row, out);
        } else {
            let keep = 1.0 - alpha;
            out.extend(
                row.iter()
                    .zip(&self.gamma)
                    .zip(&self.beta)
                    .map(|((&q, &g), &b)| keep * q + alpha * (g * q + b)),
            );
        }
    }
}

/// Closed-form affine fit for one cluster.
///
/// `lq_rows` and `fp_rows` are the cluster's aligned logit rows, all of
/// width `d`. No rows yields [`AffineParams::identity`]. When the guarded
/// denominator is exactly zero (only possible with `eps = 0`) the
/// coordinate gets `gamma = 0` and `beta` equal to the fp mean.
pub fn fit_cluster_affine(
    d: usize,
    lq_rows: &[&[f64]],
    fp_rows: &[&[f64]],
    epsilon: f64,
    guard: VarianceGuard,
) -> Result<AffineParams> {
    if lq_rows.len() != fp_rows.len() {
        return Err(Error::Contract(format!(
            "{} low-bit rows but {} full-precision rows",
            lq_rows.len(),
            fp_rows.len()
        )));
    }
    if let Some(bad) = lq_rows.iter().chain(fp_rows).find(|r| r.len() != d) {
        return Err(Error::Contract(format!(
            "row of width {} in a cluster of width {d}",
            bad.len()
        )));
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::Parameter(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if lq_rows.is_empty() {
        return Ok(AffineParams::identity(d));
    }
    let lq = Tensor::from_rows(lq_rows)?;
    let fp = Tensor::from_rows(fp_rows)?;
    let stats = paired_stats(&lq, &fp)?;
    let cross = stats.cross.expect("paired stats carry cross moments");

    let mut gamma = Vec::with_capacity(d);
    let mut beta = Vec::with_capacity(d);
    let mut degenerate_dims = Vec::new();
    for i in 0..d {
        let var = stats.variance[i];
        if var < epsilon || var == 0.0 {
            degenerate_dims.push(i);
        }
        let denom = guard.denominator(var, epsilon);
        let g = if denom > 0.0 { cross.cross_cov[i] / denom } else { 0.0 };
        gamma.push(g);
        beta.push(cross.mean[i] - g * stats.mean[i]);
    }
    Ok(AffineParams {
        gamma,
        beta,
        cluster_size: lq_rows.len(),
        degenerate_dims,
    })
}

/// Aligned low-bit / full-precision logits over one sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitPairSet {
    pub lq: Tensor,
    pub fp: Tensor,
    pub source_tag: String,
}

impl LogitPairSet {
    pub fn new(lq: Tensor, fp: Tensor, source_tag: impl Into<String>) -> Result<Self> {
        lq.expect_matrix("low-bit logits")?;
        fp.expect_matrix("full-precision logits")?;
        if lq.shape() != fp.shape() {
            return Err(Error::Contract(format!(
                "logit pair shapes differ: {:?} vs {:?}",
                lq.shape(),
                fp.shape()
            )));
        }
        Ok(Self {
            lq,
            fp,
            source_tag: source_tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.lq.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.lq.cols()
    }

    /// The first `n` pairs.
    pub fn head(&self, n: usize) -> Self {
        Self {
            lq: self.lq.head_rows(n),
            fp: self.fp.head_rows(n),
            source_tag: self.source_tag.clone(),
        }
    }

    /// Packs the pair as one `2 x n x d` tensor, low-bit first.
    pub fn to_stacked(&self) -> Tensor {
        let mut data = self.lq.data().to_vec();
        data.extend_from_slice(self.fp.data());
        Tensor::new(vec![2, self.len(), self.dim()], data).expect("stacked shape")
    }

    pub fn from_stacked(t: &Tensor, source_tag: impl Into<String>) -> Result<Self> {
        let &[2, n, d] = t.shape() else {
            return Err(Error::Contract(format!(
                "logit pair file must have shape [2, n, d], got {:?}",
                t.shape()
            )));
        };
        let half = n * d;
        let lq = Tensor::matrix(n, d, t.data()[..half].to_vec())?;
        let fp = Tensor::matrix(n, d, t.data()[half..].to_vec())?;
        Self::new(lq, fp, source_tag)
    }
}

/// Settings for one fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatConfig {
    pub clusters: usize,
    pub pca_dim: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub seed: u64,
    #[serde(default)]
    pub variance_guard: VarianceGuard,
}

impl Default for CatConfig {
    fn default() -> Self {
        Self {
            clusters: DEFAULT_CLUSTERS,
            pca_dim: DEFAULT_PCA_DIM,
            epsilon: DEFAULT_EPSILON,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            variance_guard: VarianceGuard::Additive,
        }
    }
}

impl CatConfig {
    /// The single-cluster (plain affine) variant of this configuration.
    pub fn plain_affine(&self) -> Self {
        Self {
            clusters: 1,
            pca_dim: 1,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::Parameter("cluster count must be at least 1".into()));
        }
        check_alpha(self.alpha)?;
        check_epsilon(self.epsilon)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha must be in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(())
}

/// Fit-time diagnostics stored with the artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitMeta {
    pub sample_count: usize,
    pub seed: u64,
    /// Mean squared error of the uncorrected fit-set logits.
    pub fit_mse_identity: f64,
    /// Mean squared error after the full (alpha = 1) correction.
    pub fit_mse_cat: f64,
}

/// Everything needed to correct logits at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatArtifacts {
    pub pca: PcaModel,
    pub clusters: KMeansModel,
    pub affine: Vec<AffineParams>,
    pub alpha: f64,
    pub epsilon: f64,
    pub variance_guard: VarianceGuard,
    pub d: usize,
    pub fit_meta: FitMeta,
}

/// Stored real-valued parameters by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// gamma and beta entries: `2 * K * d`.
    pub affine: usize,
    /// centroid entries: `K * pca_dim`.
    pub centroids: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.affine + self.centroids
    }
}

/// Fits PCA, k-means and the per-cluster affine maps.
pub fn cat_fit(pairs: &LogitPairSet, config: &CatConfig) -> Result<CatArtifacts> {
    config.validate()?;
    let n = pairs.len();
    let d = pairs.dim();
    if config.clusters > n {
        return Err(Error::Parameter(format!(
            "cluster count {} exceeds the {n} fitting samples",
            config.clusters
        )));
    }
    let pca = pca_fit(&pairs.lq, config.pca_dim)?;
    let features = pca.transform(&pairs.lq)?;
    let clusters = kmeans_fit(&features, config.clusters, config.seed)?;
    // Group by the inference-time assignment so fit and apply agree even if
    // Lloyd stopped on the iteration cap.
    let labels = clusters.predict(&features)?;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); config.clusters];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let affine = members
        .iter()
        .map(|idx| {
            let lq: Vec<&[f64]> = idx.iter().map(|&i| pairs.lq.row(i)).collect();
            let fp: Vec<&[f64]> = idx.iter().map(|&i| pairs.fp.row(i)).collect();
            fit_cluster_affine(d, &lq, &fp, config.epsilon, config.variance_guard)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut artifacts = CatArtifacts {
        pca,
        clusters,
        affine,
        alpha: config.alpha,
        epsilon: config.epsilon,
        variance_guard: config.variance_guard,
        d,
        fit_meta: FitMeta {
            sample_count: n,
            seed: config.seed,
            fit_mse_identity: mean_squared_error(&pairs.lq, &pairs.fp)?,
            fit_mse_cat: 0.0,
        },
    };
    let corrected = artifacts.apply_labeled(&pairs.lq, &labels, 1.0)?;
    artifacts.fit_meta.fit_mse_cat = mean_squared_error(&corrected, &pairs.fp)?;
    Ok(artifacts)
}

/// Corrects `lq_logits` with the artifacts' own `alpha`.
pub fn cat_apply(artifacts: &CatArtifacts, lq_logits: &Tensor) -> Result<Tensor> {
    artifacts.apply(lq_logits)
}

impl CatArtifacts {
    pub fn clusters(&self) -> usize {
        self.affine.len()
    }

    pub fn apply(&self, lq_logits: &Tensor) -> Result<Tensor> {
        self.apply_with_alpha(lq_logits, self.alpha)
    }

    /// Same as [`apply`](Self::apply) with a different blend weight.
    pub fn apply_with_alpha(&self, lq_logits: &Tensor, alpha: f64) -> Result<Tensor> {
        check_alpha(alpha)?;
        let labels = self.assign(lq_logits)?;
        self.apply_labeled(lq_logits, &labels, alpha)
    }

    /// Cluster index of each row.
    pub fn assign(&self, lq_logits: &Tensor) -> Result<Vec<usize>> {
        let (_, width) = lq_logits.expect_matrix("low-bit logits")?;
        if width != self.d {
            return Err(Error::Contract(format!(
                "logit width {width} does not match fitted width {}",
                self.d
            )));
        }
        let features = self.pca.transform(lq_logits)?;
        self.clusters.predict(&features)
    }

    fn apply_labeled(&self, lq: &Tensor, labels: &[usize], alpha: f64) -> Result<Tensor> {
        let (m, d) = lq.expect_matrix("low-bit logits")?;
        let mut out = Vec::with_capacity(m * d);
        for (row, &l) in lq.row_iter().zip(labels) {
            self.affine[l].blend_into(row, alpha, &mut out);
        }
        Tensor::matrix(m, d, out)
    }

    pub fn parameter_count(&self) -> ParamCount {
        ParamCount {
            affine: self.affine.iter().map(|a| a.gamma.len() + a.beta.len()).sum(),
            centroids: self.clusters.centroids.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha).map_err(|e| Error::validation("alpha", e.to_string()))?;
        check_epsilon(self.epsilon).map_err(|e| Error::validation("epsilon", e.to_string()))?;
        self.pca.validate()?;
        self.clusters.validate()?;
        if self.pca.input_dim() != self.d {
            return Err(Error::validation(
                "pca.mean",
                format!("PCA width {} differs from d = {}", self.pca.input_dim(), self.d),
            ));
        }
        if self.clusters.feature_dim() != self.pca.dim() {
            return Err(Error::validation(
                "clusters.centroids",
                format!(
                    "centroid width {} differs from PCA dimension {}",
                    self.clusters.feature_dim(),
                    self.pca.dim()
                ),
            ));
        }
        if self.affine.len() != self.clusters.k {
            return Err(Error::validation(
                "affine",
                format!("{} entries for {} clusters", self.affine.len(), self.clusters.k),
            ));
        }
        for (k, a) in self.affine.iter().enumerate() {
            let field = format!("affine[{k}]");
            if a.gamma.len() != self.d || a.beta.len() != self.d {
                return Err(Error::validation(field, format!("width differs from d = {}", self.d)));
            }
            if a.gamma.iter().chain(&a.beta).any(|v| !v.is_finite()) {
                return Err(Error::validation(field, "non-finite coefficient"));
            }
            if a.cluster_size == 0 && *a != AffineParams::identity(self.d) {
                return Err(Error::validation(field, "empty cluster must hold the identity map"));
            }
            if a.degenerate_dims.iter().any(|&i| i >= self.d) {
                return Err(Error::validation(field, "degenerate dimension out of range"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(t: &Tensor) -> Vec<&[f64]> {
        t.row_iter().collect()
    }

    #[test]
    fn empty_cluster_is_identity() {
        let a = fit_cluster_affine(3, &[], &[], 1e-8, VarianceGuard::Additive).unwrap();
        assert_eq!(a.gamma, vec![1.0; 3]);
        assert_eq!(a.beta, vec![0.0; 3]);
        assert_eq!(a.cluster_size, 0);
    }

    #[test]
    fn hand_example() {
        let q = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let f = Tensor::matrix(3, 1, vec![3.0, 5.0, 7.0]).unwrap();
        let a = fit_cluster_affine(1, &rows(&q), &rows(&f), 0.0, VarianceGuard::Additive).unwrap();
        assert!((a.gamma[0] - 2.0).abs() < 1e-14);
        assert!((a.beta[0] - 1.0).abs() < 1e-14);
        let a = fit_cluster_affine(1, &rows(&q), &rows(&f), 1e-8, VarianceGuard::Floor).unwrap();
        assert!((a.gamma[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn self_map_is_near_identity() {
        let q = Tensor::matrix(4, 2, vec![0.1, 3.0, -1.0, 2.0, 0.5, 0.0, 2.0, 1.0]).unwrap();
        let a = fit_cluster_affine(2, &rows(&q), &rows(&q), 1e-8, VarianceGuard::Additive).unwrap();
        for (g, b) in a.gamma.iter().zip(&a.beta) {
            assert!((g - 1.0).abs() < 1e-7);
            assert!(b.abs() < 1e-7);
        }
        assert!(a.degenerate_dims.is_empty());
    }

    #[test]
    fn constant_coordinate_is_degenerate() {
        let q = Tensor::matrix(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let f = Tensor::matrix(3, 2, vec![0.0, 1.0, 1.0, 2.0, 2.0, 3.0]).unwrap();
        let a = fit_cluster_affine(2, &rows(&q), &rows(&f), 1e-8, VarianceGuard::Additive).unwrap();
        assert_eq!(a.degenerate_dims, vec![1]);
        assert_eq!(a.gamma[1], 0.0);
        assert_eq!(a.beta[1], 2.0);
        let z = fit_cluster_affine(2, &rows(&q), &rows(&f), 0.0, VarianceGuard::Additive).unwrap();
        assert_eq!(z.gamma[1], 0.0);
    }

    #[test]
    fn width_mismatch() {
        let q = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let f = Tensor::matrix(2, 1, vec![0.0; 2]).unwrap();
        let err = fit_cluster_affine(2, &rows(&q), &rows(&f), 1e-8, VarianceGuard::Additive);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn blend_hand_example() {
        let a = AffineParams {
            gamma: vec![2.0],
            beta: vec![1.0],
            cluster_size: 1,
            degenerate_dims: vec![],
        };
        let mut out = Vec::new();
        a.blend_into(&[2.0], 0.5, &mut out);
        assert_eq!(out, vec![3.5]);
    }

    #[test]
    fn stacked_round_trip() {
        let lq = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let fp = lq.map(|v| -v).unwrap();
        let p = LogitPairSet::new(lq, fp, "t").unwrap();
        let s = p.to_stacked();
        assert_eq!(s.shape(), &[2, 2, 3]);
        assert_eq!(LogitPairSet::from_stacked(&s, "t").unwrap(), p);
    }

    #[test]
    fn config_validation() {
        let mut c = CatConfig { alpha: 1.5, ..CatConfig::default() };
        assert!(c.validate().is_err());
        c.alpha = 0.5;
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
    }
}
