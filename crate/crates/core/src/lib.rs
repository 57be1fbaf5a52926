//! Post-training quantization toolkit with cluster-based affine logit
//! correction.
//!
//! The pipeline has two stages:
//!
//! 1. [`calibration`]: start from min-max quantization parameters and refine
//!    every scale and zero-point against the tempered KL divergence between
//!    full-precision and fake-quantized logits.
//! 2. [`cat`]: cluster the low-bit logits (PCA + k-means) and fit one
//!    closed-form affine map per cluster that pulls them toward the
//!    full-precision logits. At inference the map is blended with the raw
//!    logits.
//!
//! [`net`] provides the small dense network both stages run on, and [`io`]
//! the file formats.

pub mod calibration;
pub mod cat;
pub mod clustering;
pub mod error;
pub mod io;
pub mod net;
pub mod numerics;
pub mod pca;
pub mod pipeline;
pub mod quantizer;
pub mod synth;

pub use calibration::{eval_kl_out, eval_reg, refine, CalibConfig, CalibState, SearchConfig, TraceEntry};
pub use cat::{
    cat_apply, cat_fit, fit_cluster_affine, AffineParams, CatArtifacts, CatConfig, FitMeta, LogitPairSet,
    ParamCount, VarianceGuard,
};
pub use clustering::{kmeans_fit, kmeans_predict, KMeansModel};
pub use error::{Error, Result};
pub use io::{load_bundle, read_tensor, save_bundle, write_tensor, ArtifactBundle, Provenance};
pub use net::{load_model, save_model, Activation, DenseLayer, QuantParamSet, QuantSpec, TinyNet};
pub use numerics::{kl_divergence, paired_stats, softmax_t, ElemStats, Tensor};
pub use pca::{pca_fit, pca_transform, PcaModel};
pub use quantizer::{dequantize, derive_minmax, fake_quantize, quantize, Granularity, QuantParams};
