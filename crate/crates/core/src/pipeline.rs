//! End-to-end helpers shared by the command-line tool: evaluation tables,
//! sweeps and the self-contained demo.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::calibration::{eval_kl_out, refine, CalibConfig, CalibState};
use crate::cat::{cat_fit, CatArtifacts, CatConfig, LogitPairSet};
use crate::error::{Error, Result};
use crate::io::{fmt_real, save_bundle, to_canonical_json, write_tensor, ArtifactBundle, CsvTable, Provenance};
use crate::net::{act_key, save_model, weight_key, QuantParamSet, QuantSpec, TinyNet};
use crate::numerics::{argmax, mean_squared_error, Tensor};
use crate::pca::DEFAULT_PCA_DIM;
use crate::synth::{CorpusConfig, DistortionModel, MixtureTask};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EVAL_HEADER: [&str; 5] = ["variant", "top1_agreement", "top1_accuracy", "mean_kl", "logit_mse"];

/// Lowercase hex SHA-256 of the canonical JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let text = to_canonical_json(config)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

pub fn provenance<T: Serialize>(seed: u64, config: &T) -> Result<Provenance> {
    Ok(Provenance {
        seed,
        config_hash: config_hash(config)?,
        tool_version: TOOL_VERSION.to_string(),
    })
}

/// PCA width to use when none is requested: the default, clamped to what
/// `n` samples of dimension `d` support.
pub fn default_pca_dim(n: usize, d: usize) -> usize {
    DEFAULT_PCA_DIM.min(n.saturating_sub(1)).min(d).max(1)
}

/// Quality of one set of logits against the full-precision reference.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub variant: String,
    /// Fraction of rows whose argmax matches the full-precision argmax.
    pub top1_agreement: f64,
    /// Fraction of rows whose argmax matches the label, when labels exist.
    pub top1_accuracy: Option<f64>,
    /// Mean KL(softmax(fp) || softmax(logits)) at temperature 1.
    pub mean_kl: f64,
    pub logit_mse: f64,
}

impl EvalRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.variant.clone(),
            fmt_real(self.top1_agreement),
            self.top1_accuracy.map(fmt_real).unwrap_or_default(),
            fmt_real(self.mean_kl),
            fmt_real(self.logit_mse),
        ]
    }
}

fn fraction(hits: usize, n: usize) -> f64 {
    hits as f64 / n as f64
}

pub fn evaluate_logits(
    variant: &str,
    logits: &Tensor,
    fp_logits: &Tensor,
    labels: Option<&[usize]>,
) -> Result<EvalRow> {
    let n = logits.rows();
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::Contract(format!("{} labels for {n} rows", l.len())));
        }
    }
    let logit_mse = mean_squared_error(logits, fp_logits)?;
    let agree = logits
        .row_iter()
        .zip(fp_logits.row_iter())
        .filter(|(a, b)| argmax(a) == argmax(b))
        .count();
    let top1_accuracy = labels.map(|l| {
        let hits = logits.row_iter().zip(l).filter(|(r, &y)| argmax(r) == y).count();
        fraction(hits, n)
    });
    Ok(EvalRow {
        variant: variant.to_string(),
        top1_agreement: fraction(agree, n),
        top1_accuracy,
        mean_kl: eval_kl_out(fp_logits, logits, 1.0)?,
        logit_mse,
    })
}

/// Rows for the uncorrected logits and each correction present.
pub fn evaluate_variants(
    cat: Option<&CatArtifacts>,
    plain: Option<&CatArtifacts>,
    eval: &LogitPairSet,
    labels: Option<&[usize]>,
) -> Result<Vec<EvalRow>> {
    let mut rows = vec![evaluate_logits("no-correction", &eval.lq, &eval.fp, labels)?];
    if let Some(p) = plain {
        rows.push(evaluate_logits("plain-affine", &p.apply(&eval.lq)?, &eval.fp, labels)?);
    }
    if let Some(c) = cat {
        rows.push(evaluate_logits("cat", &c.apply(&eval.lq)?, &eval.fp, labels)?);
    }
    Ok(rows)
}

pub fn eval_table(rows: &[EvalRow]) -> CsvTable {
    let mut t = CsvTable::new(&EVAL_HEADER);
    for r in rows {
        t.push(r.cells());
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    Clusters,
    PcaDim,
    Samples,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Clusters => "clusters",
            SweepAxis::PcaDim => "pca_dim",
            SweepAxis::Samples => "samples",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "clusters" => Ok(SweepAxis::Clusters),
            "pca_dim" | "pca-dim" => Ok(SweepAxis::PcaDim),
            "samples" => Ok(SweepAxis::Samples),
            other => Err(Error::Parameter(format!(
                "unknown sweep axis `{other}` (expected alpha, clusters, pca_dim or samples)"
            ))),
        }
    }
}

fn grid_count(axis: SweepAxis, v: f64) -> Result<usize> {
    if v.is_finite() && v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Parameter(format!(
            "{axis} grid values must be positive integers, got {v}"
        )))
    }
}

/// Fits CAT at each grid value of `axis` (others fixed at `base`) and
/// evaluates on `eval`. With several `seeds` every grid point is refitted
/// once per seed and the metrics are averaged.
pub fn sweep(
    fit: &LogitPairSet,
    eval: &LogitPairSet,
    labels: Option<&[usize]>,
    base: &CatConfig,
    axis: SweepAxis,
    grid: &[f64],
    seeds: &[u64],
) -> Result<CsvTable> {
    if grid.is_empty() {
        return Err(Error::Parameter("sweep grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Parameter("sweep needs at least one seed".into()));
    }
    let mut header = vec!["axis", "value"];
    header.extend_from_slice(&EVAL_HEADER);
    let mut table = CsvTable::new(&header);
    let shared = match axis {
        SweepAxis::Alpha => seeds
            .iter()
            .map(|&seed| cat_fit(fit, &CatConfig { seed, ..*base }))
            .collect::<Result<Vec<_>>>()?,
        _ => Vec::new(),
    };
    for &v in grid {
        let mut rows = Vec::with_capacity(seeds.len());
        for (i, &seed) in seeds.iter().enumerate() {
            let cfg = CatConfig { seed, ..*base };
            let corrected = match axis {
                SweepAxis::Alpha => shared[i].apply_with_alpha(&eval.lq, v)?,
                SweepAxis::Clusters => {
                    let cfg = CatConfig { clusters: grid_count(axis, v)?, ..cfg };
                    cat_fit(fit, &cfg)?.apply(&eval.lq)?
                }
                SweepAxis::PcaDim => {
                    let cfg = CatConfig { pca_dim: grid_count(axis, v)?, ..cfg };
                    cat_fit(fit, &cfg)?.apply(&eval.lq)?
                }
                SweepAxis::Samples => {
                    let n = grid_count(axis, v)?;
                    if n > fit.len() {
                        return Err(Error::Parameter(format!(
                            "sample count {n} exceeds the {} fitting pairs",
                            fit.len()
                        )));
                    }
                    cat_fit(&fit.head(n), &cfg)?.apply(&eval.lq)?
                }
            };
            rows.push(evaluate_logits("cat", &corrected, &eval.fp, labels)?);
        }
        let value = match axis {
            SweepAxis::Alpha => fmt_real(v),
            _ => (v as usize).to_string(),
        };
        let mut cells = vec![axis.to_string(), value];
        cells.extend(mean_row(&rows).cells());
        table.push(cells);
    }
    Ok(table)
}

fn mean_row(rows: &[EvalRow]) -> EvalRow {
    if rows.len() == 1 {
        return rows[0].clone();
    }
    let n = rows.len() as f64;
    let avg = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    EvalRow {
        variant: rows[0].variant.clone(),
        top1_agreement: avg(|r| r.top1_agreement),
        top1_accuracy: rows[0]
            .top1_accuracy
            .map(|_| avg(|r| r.top1_accuracy.unwrap_or(0.0))),
        mean_kl: avg(|r| r.mean_kl),
        logit_mse: avg(|r| r.logit_mse),
    }
}

/// Labels stored as a rank-1 tensor of non-negative integers.
pub fn labels_to_tensor(labels: &[usize]) -> Result<Tensor> {
    Tensor::new(vec![labels.len()], labels.iter().map(|&l| l as f64).collect())
}

pub fn labels_from_tensor(t: &Tensor) -> Result<Vec<usize>> {
    if t.rank() != 1 {
        return Err(Error::validation(
            "labels",
            format!("expected a rank-1 tensor, got shape {:?}", t.shape()),
        ));
    }
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::validation("labels", format!("{v} is not a class index")))
            }
        })
        .collect()
}

/// `net` with its quantization spec replaced by the bit-widths recorded in
/// `params`, so a calibrated parameter set can be used with the model file
/// it came from.
pub fn adopt_params(net: TinyNet, params: &QuantParamSet) -> Result<TinyNet> {
    let layers = net.layers().len();
    let bits = |key: String| params.get(&key).map(|p| p.bit_width());
    let hidden_weights: Vec<Option<u32>> = (0..layers - 1).map(|i| bits(weight_key(i))).collect();
    let hidden_acts: Vec<Option<u32>> = (0..layers - 1).map(|i| bits(act_key(i))).collect();
    let uniform = |v: &[Option<u32>], what: &str| -> Result<Option<u32>> {
        match v.split_first() {
            None => Ok(None),
            Some((first, rest)) if rest.iter().all(|b| b == first) => Ok(*first),
            _ => Err(Error::Config(format!("{what} bit-widths differ across layers"))),
        }
    };
    let spec = QuantSpec {
        weight_bits: uniform(&hidden_weights, "hidden weight")?,
        act_bits: uniform(&hidden_acts, "activation")?,
        last_layer_bits: bits(weight_key(layers - 1)),
    };
    net.with_quant_spec(spec)
}

/// Settings of the demo run; hashed into the bundle provenance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub corpus_fit_samples: usize,
    pub corpus_eval_samples: usize,
    pub corpus_cat: CatConfig,
    pub net_in_dim: usize,
    pub net_classes: usize,
    pub net_quant: QuantSpec,
    pub net_calib_samples: usize,
    pub net_eval_samples: usize,
    pub calib: CalibConfig,
    pub net_cat: CatConfig,
    pub alpha_grid: Vec<f64>,
}

impl DemoConfig {
    pub fn new(seed: u64) -> Self {
        let mut calib = CalibConfig::default();
        calib.search.seed = seed;
        Self {
            seed,
            corpus: CorpusConfig::default(),
            corpus_fit_samples: 600,
            corpus_eval_samples: 600,
            corpus_cat: CatConfig {
                clusters: 3,
                pca_dim: 5,
                alpha: 1.0,
                seed,
                ..CatConfig::default()
            },
            net_in_dim: 8,
            net_classes: 6,
            net_quant: QuantSpec::wa(2, 2),
            net_calib_samples: 512,
            net_eval_samples: 1000,
            calib,
            net_cat: CatConfig {
                clusters: 8,
                pca_dim: 5,
                seed,
                ..CatConfig::default()
            },
            alpha_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

/// Files written by [`run_demo`] and the evaluation results.
#[derive(Debug, Clone)]
pub struct DemoReport {
    pub files: Vec<PathBuf>,
    pub corpus_eval: Vec<EvalRow>,
    pub net_eval: Vec<EvalRow>,
    pub initial_objective: f64,
    pub final_objective: f64,
}

/// Runs both demo pipelines and writes their artifacts under `out`:
///
/// * `corpus/`: a synthetic three-group distortion corpus, CAT and plain
///   affine corrections fitted on it, a held-out evaluation and an alpha
///   sweep.
/// * `net/`: a small classifier quantized at W2A2, calibrated, corrected
///   and evaluated.
pub fn run_demo(out: &Path, config: &DemoConfig) -> Result<DemoReport> {
    let seed = config.seed;
    let prov = provenance(seed, config)?;
    let mut files = Vec::new();

    let corpus_dir = out.join("corpus");
    fs::create_dir_all(&corpus_dir).map_err(|e| Error::io(&corpus_dir, e))?;
    let model = DistortionModel::new(config.corpus, seed)?;
    let fit = model.sample(config.corpus_fit_samples, seed.wrapping_add(1))?;
    let held = model.sample(config.corpus_eval_samples, seed.wrapping_add(2))?;
    let cat = cat_fit(&fit.pairs, &config.corpus_cat)?;
    let plain = cat_fit(&fit.pairs, &config.corpus_cat.plain_affine())?;
    let corpus_eval = evaluate_variants(Some(&cat), Some(&plain), &held.pairs, Some(&held.labels))?;
    let sweep_table = sweep(
        &fit.pairs,
        &held.pairs,
        Some(&held.labels),
        &config.corpus_cat,
        SweepAxis::Alpha,
        &config.alpha_grid,
        &[seed],
    )?;
    let mut bundle = ArtifactBundle::new(QuantParamSet::default(), prov.clone());
    bundle.cat = Some(cat);
    bundle.plain_affine = Some(plain);
    let mut write = |path: PathBuf, result: Result<()>| -> Result<()> {
        result?;
        files.push(path);
        Ok(())
    };
    let p = corpus_dir.join("fit_pairs.bin");
    write(p.clone(), write_tensor(&p, &fit.pairs.to_stacked()))?;
    let p = corpus_dir.join("eval_pairs.bin");
    write(p.clone(), write_tensor(&p, &held.pairs.to_stacked()))?;
    let p = corpus_dir.join("eval_labels.bin");
    write(p.clone(), write_tensor(&p, &labels_to_tensor(&held.labels)?))?;
    let p = corpus_dir.join("bundle.json");
    write(p.clone(), save_bundle(&p, &bundle))?;
    let p = corpus_dir.join("eval.csv");
    write(p.clone(), eval_table(&corpus_eval).write(&p))?;
    let p = corpus_dir.join("sweep_alpha.csv");
    write(p.clone(), sweep_table.write(&p))?;

    let net_dir = out.join("net");
    fs::create_dir_all(&net_dir).map_err(|e| Error::io(&net_dir, e))?;
    let task = MixtureTask::new(config.net_in_dim, config.net_classes, 1.5, 1.0, seed)?;
    let net: TinyNet = task.teacher_net(config.net_quant)?;
    let (calib_x, _) = task.sample(config.net_calib_samples, seed.wrapping_add(3))?;
    let (eval_x, eval_y) = task.sample(config.net_eval_samples, seed.wrapping_add(4))?;
    let state = refine(
        &net,
        &calib_x,
        &config.calib,
        CalibState::new(net.init_quant_params(&calib_x)?),
    )?;
    let pairs = LogitPairSet::new(
        net.forward_lq(&calib_x, &state.current)?,
        net.forward_fp(&calib_x)?,
        "demo-calibration",
    )?;
    let net_cat = cat_fit(&pairs, &config.net_cat)?;
    let net_plain = cat_fit(&pairs, &config.net_cat.plain_affine())?;
    let held = LogitPairSet::new(
        net.forward_lq(&eval_x, &state.current)?,
        net.forward_fp(&eval_x)?,
        "demo-evaluation",
    )?;
    let net_eval = evaluate_variants(Some(&net_cat), Some(&net_plain), &held, Some(&eval_y))?;
    let mut bundle = ArtifactBundle::new(state.current.clone(), prov);
    bundle.cat = Some(net_cat);
    bundle.plain_affine = Some(net_plain);

    let p = net_dir.join("model.json");
    write(p.clone(), save_model(&p, &net))?;
    let p = net_dir.join("calib.bin");
    write(p.clone(), write_tensor(&p, &calib_x))?;
    let p = net_dir.join("eval.bin");
    write(p.clone(), write_tensor(&p, &eval_x))?;
    let p = net_dir.join("eval_labels.bin");
    write(p.clone(), write_tensor(&p, &labels_to_tensor(&eval_y)?))?;
    let p = net_dir.join("bundle.json");
    write(p.clone(), save_bundle(&p, &bundle))?;
    let p = net_dir.join("trace.csv");
    write(p.clone(), state.trace_csv().write(&p))?;
    let p = net_dir.join("eval.csv");
    write(p.clone(), eval_table(&net_eval).write(&p))?;

    Ok(DemoReport {
        files,
        corpus_eval,
        net_eval,
        initial_objective: state.trace.first().map_or(f64::NAN, |e| e.l_cat),
        final_objective: state.trace.last().map_or(f64::NAN, |e| e.l_cat),
    })
}
