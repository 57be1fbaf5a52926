//! Seeded synthetic data.
//!
//! [`DistortionModel`] produces logit pairs with a known per-group affine
//! distortion: low-bit logits of group `g` are drawn around a center `c_g`,
//! and the matching full-precision logits are `gamma_g * lq + beta_g` plus
//! noise. In the default configuration groups 0 and 2 are close to the
//! identity while group 1 is reflected about its own center (negative
//! gamma) and more spread out, so a single global affine map is pulled
//! toward zero slope and hurts the undistorted groups.
//!
//! [`MixtureTask`] is a Gaussian-mixture classification problem together
//! with a two-layer ReLU network that implements its nearest-center
//! classifier exactly.

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cat::LogitPairSet;
use crate::error::{Error, Result};
use crate::net::{Activation, DenseLayer, QuantSpec, TinyNet};
use crate::numerics::{argmax, Tensor};

pub const GROUPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Logit dimension.
    pub dim: usize,
    /// Standard deviation of group centers.
    pub center_scale: f64,
    /// Within-group standard deviation of group 1 (the others use 1).
    pub reflected_spread: f64,
    /// Whether group 1 gets a negative slope.
    pub opposing_signs: bool,
    /// Standard deviation of per-group intercept jitter.
    pub beta_jitter: f64,
    /// Standard deviation of additive noise on the fp logits.
    pub noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            center_scale: 1.0,
            reflected_spread: 1.5,
            opposing_signs: true,
            beta_jitter: 0.2,
            noise: 0.3,
        }
    }
}

impl CorpusConfig {
    /// Widely separated groups and no noise: clustering recovers the groups
    /// exactly and the fit recovers the generating parameters.
    pub fn separated() -> Self {
        Self {
            center_scale: 8.0,
            reflected_spread: 1.0,
            noise: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionModel {
    pub config: CorpusConfig,
    pub centers: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub spread: Vec<f64>,
}

/// A draw from [`DistortionModel`].
#[derive(Debug, Clone)]
pub struct CorpusSample {
    pub pairs: LogitPairSet,
    /// Generating group of each row.
    pub groups: Vec<usize>,
    /// Argmax of the noise-free fp logits.
    pub labels: Vec<usize>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl DistortionModel {
    pub fn new(config: CorpusConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::Parameter("corpus dimension must be positive".into()));
        }
        for (name, v) in [
            ("center_scale", config.center_scale),
            ("reflected_spread", config.reflected_spread),
            ("beta_jitter", config.beta_jitter),
            ("noise", config.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parameter(format!("{name} must be non-negative, got {v}")));
            }
        }
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..GROUPS)
            .map(|_| (0..d).map(|_| config.center_scale * normal(&mut rng)).collect())
            .collect();
        let mut gamma = Vec::with_capacity(GROUPS);
        let mut beta = Vec::with_capacity(GROUPS);
        for (g, center) in centers.iter().enumerate() {
            let sign = if g == 1 && config.opposing_signs { -1.0 } else { 1.0 };
            let gm: Vec<f64> = (0..d).map(|_| sign * rng.random_range(0.8..1.2)).collect();
            let mut bt: Vec<f64> = (0..d).map(|_| config.beta_jitter * normal(&mut rng)).collect();
            if sign < 0.0 {
                // Reflect about the group center: the group keeps its mean.
                for ((b, &c), &gj) in bt.iter_mut().zip(center).zip(&gm) {
                    *b += c - gj * c;
                }
            }
            gamma.push(gm);
            beta.push(bt);
        }
        let spread = (0..GROUPS)
            .map(|g| if g == 1 { config.reflected_spread } else { 1.0 })
            .collect();
        Ok(Self {
            config,
            centers,
            gamma,
            beta,
            spread,
        })
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<CorpusSample> {
        if n == 0 {
            return Err(Error::Parameter("sample count must be positive".into()));
        }
        let d = self.config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lq = Vec::with_capacity(n * d);
        let mut fp = Vec::with_capacity(n * d);
        let mut groups = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut clean = vec![0.0; d];
        for _ in 0..n {
            let g = rng.random_range(0..GROUPS);
            for (j, c) in clean.iter_mut().enumerate() {
                let q = self.centers[g][j] + self.spread[g] * normal(&mut rng);
                *c = self.gamma[g][j] * q + self.beta[g][j];
                lq.push(q);
                fp.push(*c + self.config.noise * normal(&mut rng));
            }
            groups.push(g);
            labels.push(argmax(&clean));
        }
        Ok(CorpusSample {
            pairs: LogitPairSet::new(
                Tensor::matrix(n, d, lq)?,
                Tensor::matrix(n, d, fp)?,
                format!("synthetic-distortion(seed={seed})"),
            )?,
            groups,
            labels,
        })
    }
}

/// Isotropic Gaussian classes in input space.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureTask {
    /// `classes x in_dim`
    pub centers: Vec<Vec<f64>>,
    pub noise: f64,
    /// Orthogonal mixing applied inside the teacher network.
    rotation: Vec<Vec<f64>>,
}

impl MixtureTask {
    pub fn new(in_dim: usize, classes: usize, center_scale: f64, noise: f64, seed: u64) -> Result<Self> {
        if in_dim == 0 || classes < 2 {
            return Err(Error::Parameter(format!(
                "need in_dim >= 1 and classes >= 2, got {in_dim} and {classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = (0..classes)
            .map(|_| (0..in_dim).map(|_| center_scale * normal(&mut rng)).collect())
            .collect();
        let rotation = random_orthogonal(in_dim, &mut rng);
        Ok(Self {
            centers,
            noise,
            rotation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.rotation.len()
    }

    pub fn classes(&self) -> usize {
        self.centers.len()
    }

    /// `n` inputs with their generating class.
    pub fn sample(&self, n: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.in_dim();
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.random_range(0..self.classes());
            for j in 0..d {
                data.push(self.centers[c][j] + self.noise * normal(&mut rng));
            }
            labels.push(c);
        }
        Ok((Tensor::matrix(n, d, data)?, labels))
    }

    /// Two-layer ReLU network computing `logit_c = <mu_c, x> - |mu_c|^2 / 2`.
    ///
    /// The hidden layer holds `relu(Rx)` and `relu(-Rx)` for an orthogonal
    /// `R`; their difference recovers `Rx`, which the output layer maps back
    /// through `R^T`.
    pub fn teacher_net(&self, spec: QuantSpec) -> Result<TinyNet> {
        let d = self.in_dim();
        let mut w1 = Vec::with_capacity(2 * d * d);
        for sign in [1.0, -1.0] {
            for row in &self.rotation {
                w1.extend(row.iter().map(|v| sign * v));
            }
        }
        let hidden = DenseLayer::new(Tensor::matrix(2 * d, d, w1)?, vec![0.0; 2 * d], Activation::Relu)?;
        let k = self.classes();
        let mut w2 = Vec::with_capacity(k * 2 * d);
        let mut bias = Vec::with_capacity(k);
        for mu in &self.centers {
            // (mu^T R^T)_i = sum_j mu_j R_ij
            let m: Vec<f64> = (0..d)
                .map(|i| (0..d).map(|j| mu[j] * self.rotation[i][j]).sum())
                .collect();
            w2.extend_from_slice(&m);
            w2.extend(m.iter().map(|v| -v));
            bias.push(-0.5 * mu.iter().map(|v| v * v).sum::<f64>());
        }
        let out = DenseLayer::new(Tensor::matrix(k, 2 * d, w2)?, bias, Activation::None)?;
        TinyNet::new(vec![hidden, out], spec)
    }
}

/// Orthonormal rows from Gram-Schmidt on Gaussian vectors.
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_pairs_follow_the_affine_map() {
        let m = DistortionModel::new(CorpusConfig::separated(), 1).unwrap();
        let s = m.sample(50, 2).unwrap();
        for (i, &g) in s.groups.iter().enumerate() {
            for j in 0..m.config.dim {
                let want = m.gamma[g][j] * s.pairs.lq.row(i)[j] + m.beta[g][j];
                assert!((s.pairs.fp.row(i)[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reflected_group_keeps_its_mean() {
        let m = DistortionModel::new(CorpusConfig { beta_jitter: 0.0, ..Default::default() }, 3).unwrap();
        for j in 0..m.config.dim {
            let c = m.centers[1][j];
            assert!((m.gamma[1][j] * c + m.beta[1][j] - c).abs() < 1e-12);
            assert!(m.gamma[1][j] < 0.0);
        }
    }

    #[test]
    fn teacher_net_is_nearest_center() {
        let task = MixtureTask::new(4, 5, 2.0, 0.7, 9).unwrap();
        let net = task.teacher_net(QuantSpec::disabled()).unwrap();
        let (x, _) = task.sample(30, 10).unwrap();
        let logits = net.forward_fp(&x).unwrap();
        for (row, out) in x.row_iter().zip(logits.row_iter()) {
            for (c, mu) in task.centers.iter().enumerate() {
                let want: f64 = mu.iter().zip(row).map(|(m, v)| m * v).sum::<f64>()
                    - 0.5 * mu.iter().map(|v| v * v).sum::<f64>();
                assert!((out[c] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deterministic() {
        let a = DistortionModel::new(CorpusConfig::default(), 4).unwrap().sample(20, 5).unwrap();
        let b = DistortionModel::new(CorpusConfig::default(), 4).unwrap().sample(20, 5).unwrap();
        assert_eq!(a.pairs, b.pairs);
    }
}
