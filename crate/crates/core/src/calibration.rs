//! Output-level refinement of quantization parameters.
//!
//! The objective is
//!
//! ```text
//! L = mean_x KL(softmax(fp(x)/T) || softmax(lq(x)/T))
//!   + lambda_p * (||scale - scale_0||^2 + ||zp - zp_0||^2)
//! ```
//!
//! where `(scale_0, zp_0)` are the min-max estimates the search starts from.
//! It is minimized by greedy cyclic coordinate search: for every scale try
//! the multiplicative moves `x (1 +- s)`, for every zero-point the integer
//! moves `+-1`, and keep the best candidate only if it lowers `L`. Each step
//! size `s` of the schedule gets up to `rounds` full cycles; a cycle with no
//! accepted move ends that step size early.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_real, CsvTable};
use crate::net::{QuantParamSet, TinyNet};
use crate::numerics::{kl_from_log_probs, log_softmax_unchecked, Tensor};
use crate::quantizer::{fake_quantize, QuantParams};

pub const DEFAULT_TEMPERATURE: f64 = 0.4;
pub const DEFAULT_LAMBDA_P: f64 = 0.01;
pub const DEFAULT_STEP_SCHEDULE: [f64; 4] = [0.2, 0.1, 0.05, 0.02];
pub const DEFAULT_ROUNDS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// Cycles per step size.
    pub rounds: usize,
    /// Relative scale step sizes, strictly decreasing.
    pub step_schedule: Vec<f64>,
    /// Keys the order in which tensors are visited each cycle.
    pub seed: u64,
    /// When false only scales move.
    pub tune_zero_points: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            rounds: DEFAULT_ROUNDS,
            step_schedule: DEFAULT_STEP_SCHEDULE.to_vec(),
            seed: 0,
            tune_zero_points: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibConfig {
    pub temperature: f64,
    pub lambda_p: f64,
    pub search: SearchConfig,
    /// Calibration rows used; 0 means all.
    pub sample_count: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            lambda_p: DEFAULT_LAMBDA_P,
            search: SearchConfig::default(),
            sample_count: 0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.lambda_p.is_nan() || self.lambda_p < 0.0 {
            return Err(Error::Parameter(format!(
                "lambda_p must be non-negative, got {}",
                self.lambda_p
            )));
        }
        if self.search.rounds < 1 {
            return Err(Error::Parameter("search rounds must be at least 1".into()));
        }
        let s = &self.search.step_schedule;
        if s.is_empty() || s.iter().any(|v| !(v.is_finite() && *v > 0.0 && *v < 1.0)) {
            return Err(Error::Parameter(
                "step schedule needs at least one step in (0, 1)".into(),
            ));
        }
        if s.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Parameter("step schedule must be strictly decreasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub round: usize,
    pub l_kl: f64,
    pub l_reg: f64,
    pub l_cat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibState {
    pub initial: QuantParamSet,
    pub current: QuantParamSet,
    pub trace: Vec<TraceEntry>,
}

impl CalibState {
    pub fn new(initial: QuantParamSet) -> Self {
        Self {
            current: initial.clone(),
            initial,
            trace: Vec::new(),
        }
    }

    pub fn trace_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["round", "l_kl", "l_reg", "l_cat"]);
        for e in &self.trace {
            t.push(vec![
                e.round.to_string(),
                fmt_real(e.l_kl),
                fmt_real(e.l_reg),
                fmt_real(e.l_cat),
            ]);
        }
        t
    }
}

/// Mean tempered KL divergence from the fp to the lq output distribution.
pub fn eval_kl_out(fp_logits: &Tensor, lq_logits: &Tensor, temperature: f64) -> Result<f64> {
    let (n, _) = fp_logits.expect_matrix("fp logits")?;
    if fp_logits.shape() != lq_logits.shape() {
        return Err(Error::Contract(format!(
            "logit shapes differ: {:?} vs {:?}",
            fp_logits.shape(),
            lq_logits.shape()
        )));
    }
    if n == 0 {
        return Err(Error::EmptySet("KL over zero samples".into()));
    }
    Ok(FpCache::new(fp_logits, temperature)?.kl_out(lq_logits))
}

/// Row-wise log-softmax of the fp logits, computed once per batch.
struct FpCache {
    log_probs: Vec<Vec<f64>>,
    temperature: f64,
    rows: usize,
}

impl FpCache {
    fn new(fp_logits: &Tensor, temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            log_probs: fp_logits
                .row_iter()
                .map(|r| log_softmax_unchecked(r, temperature))
                .collect(),
            temperature,
            rows: fp_logits.rows(),
        })
    }

    /// Mean KL against `lq_logits`.
    fn kl_out(&self, lq_logits: &Tensor) -> f64 {
        let total: f64 = self
            .log_probs
            .iter()
            .zip(lq_logits.row_iter())
            .map(|(lp, lq)| kl_from_log_probs(lp, &log_softmax_unchecked(lq, self.temperature)))
            .sum();
        total / self.rows as f64
    }
}

fn reg_between(current: &QuantParamSet, initial: &QuantParamSet) -> Result<f64> {
    if current.len() != initial.len() {
        return Err(Error::Contract(format!(
            "{} current tensors vs {} initial tensors",
            current.len(),
            initial.len()
        )));
    }
    let mut total = 0.0;
    for ((name, cur), (name0, init)) in current.iter().zip(initial.iter()) {
        if name != name0 || cur.slices() != init.slices() {
            return Err(Error::Contract(format!(
                "tensor `{name}` does not line up with initial tensor `{name0}`"
            )));
        }
        for (s, s0) in cur.scales().iter().zip(init.scales()) {
            total += (s - s0) * (s - s0);
        }
        for (z, z0) in cur.zero_points().iter().zip(init.zero_points()) {
            let dz = (z - z0) as f64;
            total += dz * dz;
        }
    }
    Ok(total)
}

/// Squared distance of the current parameters from their initial values.
pub fn eval_reg(state: &CalibState) -> Result<f64> {
    reg_between(&state.current, &state.initial)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Coord {
    Scale,
    ZeroPoint,
}

/// Evaluates the objective for candidate parameter sets, reusing quantized
/// weights of untouched layers.
struct Objective<'a> {
    net: &'a TinyNet,
    batch: &'a Tensor,
    fp: FpCache,
    lambda_p: f64,
    initial: &'a QuantParamSet,
}

#[derive(Debug, Clone, Copy)]
struct Score {
    kl: f64,
    reg: f64,
    total: f64,
}

impl Objective<'_> {
    fn score(&self, params: &QuantParamSet, weights: &[Tensor]) -> Result<Score> {
        let lq = self.net.forward_lq_with_weights(self.batch, weights, params)?;
        let kl = self.fp.kl_out(&lq);
        let reg = reg_between(params, self.initial)?;
        Ok(Score {
            kl,
            reg,
            total: kl + self.lambda_p * reg,
        })
    }
}

fn weight_layer(name: &str) -> Option<usize> {
    name.strip_prefix("layer")?.strip_suffix(".weight")?.parse().ok()
}

/// Runs the coordinate search starting from `state.current`.
pub fn refine(
    net: &TinyNet,
    calib_batch: &Tensor,
    config: &CalibConfig,
    state: CalibState,
) -> Result<CalibState> {
    config.validate()?;
    let (n, _) = calib_batch.expect_matrix("calibration batch")?;
    let batch = if config.sample_count > 0 && config.sample_count < n {
        calib_batch.head_rows(config.sample_count)
    } else {
        calib_batch.clone()
    };
    let fp_logits = net.forward_fp(&batch)?;
    let objective = Objective {
        net,
        batch: &batch,
        fp: FpCache::new(&fp_logits, config.temperature)?,
        lambda_p: config.lambda_p,
        initial: &state.initial,
    };

    let mut params = state.current.clone();
    let mut weights = net.quantized_weights(&params)?;
    let mut best = objective.score(&params, &weights)?;
    let mut trace = state.trace.clone();
    let mut round = trace.last().map_or(0, |e| e.round + 1);
    trace.push(TraceEntry {
        round,
        l_kl: best.kl,
        l_reg: best.reg,
        l_cat: best.total,
    });

    let mut rng = ChaCha8Rng::seed_from_u64(config.search.seed);
    let mut names: Vec<String> = params.names().cloned().collect();
    let mut coords = vec![Coord::Scale];
    if config.search.tune_zero_points {
        coords.push(Coord::ZeroPoint);
    }

    for &step in &config.search.step_schedule {
        for _ in 0..config.search.rounds {
            names.shuffle(&mut rng);
            let mut accepted = false;
            for name in &names {
                let slices = params.get(name).expect("name from params").slices();
                let layer = weight_layer(name);
                for slice in 0..slices {
                    for &coord in &coords {
                        let current = params.get(name).expect("name from params");
                        let initial = state.initial.get(name).ok_or_else(|| {
                            Error::Contract(format!("tensor `{name}` missing from initial state"))
                        })?;
                        let mut winner: Option<(Score, QuantParams, Option<Tensor>)> = None;
                        for cand in candidates(current, initial, slice, coord, step)? {
                            let mut trial = params.clone();
                            trial.insert(name.clone(), cand.clone());
                            let (score, new_weights) = match layer {
                                Some(i) => {
                                    let w = fake_quantize(&net.layers()[i].weights, &cand)?;
                                    let saved = std::mem::replace(&mut weights[i], w);
                                    let s = objective.score(&trial, &weights);
                                    let w = std::mem::replace(&mut weights[i], saved);
                                    (s?, Some(w))
                                }
                                None => (objective.score(&trial, &weights)?, None),
                            };
                            let bar = winner.as_ref().map_or(best.total, |w| w.0.total);
                            if score.total < bar {
                                winner = Some((score, cand, new_weights));
                            }
                        }
                        if let Some((score, cand, w)) = winner {
                            params.insert(name.clone(), cand);
                            if let (Some(i), Some(w)) = (layer, w) {
                                weights[i] = w;
                            }
                            best = score;
                            accepted = true;
                        }
                    }
                }
            }
            round += 1;
            trace.push(TraceEntry {
                round,
                l_kl: best.kl,
                l_reg: best.reg,
                l_cat: best.total,
            });
            if !accepted {
                break;
            }
        }
    }

    Ok(CalibState {
        initial: state.initial,
        current: params,
        trace,
    })
}

/// Moves to try for one coordinate. Zero-points stay inside the grid, or
/// inside the span between the grid and the initial value when min-max
/// placed the initial value outside it.
fn candidates(
    current: &QuantParams,
    initial: &QuantParams,
    slice: usize,
    coord: Coord,
    step: f64,
) -> Result<Vec<QuantParams>> {
    match coord {
        Coord::Scale => {
            let s = current.scales()[slice];
            [s * (1.0 + step), s * (1.0 - step)]
                .into_iter()
                .map(|v| current.with_scale(slice, v))
                .collect()
        }
        Coord::ZeroPoint => {
            let z = current.zero_points()[slice];
            let z0 = initial.zero_points()[slice];
            let lo = current.q_min().min(z0);
            let hi = current.q_max().max(z0);
            Ok([z + 1, z - 1]
                .into_iter()
                .filter(|v| (lo..=hi).contains(v))
                .map(|v| current.with_zero_point(slice, v))
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{act_key, QuantSpec};

    #[test]
    fn kl_out_identical_is_zero() {
        let z = Tensor::matrix(2, 3, vec![0.1, -2.0, 3.0, 1.0, 1.0, 0.5]).unwrap();
        assert_eq!(eval_kl_out(&z, &z, 0.4).unwrap(), 0.0);
    }

    #[test]
    fn kl_out_hand_example() {
        let t = 0.4;
        let fp = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let lq = Tensor::matrix(1, 2, vec![1f64.ln() * t, 3f64.ln() * t]).unwrap();
        let got = eval_kl_out(&fp, &lq, t).unwrap();
        let want = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn kl_out_duplicate_rows_invariant() {
        let fp = Tensor::matrix(2, 3, vec![0.1, -2.0, 3.0, 1.0, 1.0, 0.5]).unwrap();
        let lq = Tensor::matrix(2, 3, vec![0.0, -1.0, 2.0, 1.5, 0.0, 0.5]).unwrap();
        let a = eval_kl_out(&fp, &lq, 1.0).unwrap();
        let dup = |t: &Tensor| {
            let mut d = t.data().to_vec();
            d.extend_from_slice(t.data());
            Tensor::matrix(4, 3, d).unwrap()
        };
        let b = eval_kl_out(&dup(&fp), &dup(&lq), 1.0).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn kl_out_shape_mismatch() {
        let a = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let b = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(eval_kl_out(&a, &b, 1.0), Err(Error::Contract(_))));
    }

    fn single_set(scale: f64, zp: i64) -> QuantParamSet {
        let mut s = QuantParamSet::default();
        s.insert("a".into(), QuantParams::per_tensor(4, scale, zp).unwrap());
        s
    }

    #[test]
    fn reg_examples() {
        let init = single_set(0.5, 1);
        assert_eq!(eval_reg(&CalibState::new(init.clone())).unwrap(), 0.0);
        let mut st = CalibState::new(init.clone());
        st.current = single_set(0.6, 1);
        assert!((eval_reg(&st).unwrap() - 0.01).abs() < 1e-15);
        st.current = single_set(0.5, 2);
        assert_eq!(eval_reg(&st).unwrap(), 1.0);
        st.current = QuantParamSet::default();
        assert!(matches!(eval_reg(&st), Err(Error::Contract(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = CalibConfig::default();
        c.validate().unwrap();
        c.search.step_schedule = vec![0.1, 0.2];
        assert!(c.validate().is_err());
        c = CalibConfig::default();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        c = CalibConfig::default();
        c.search.rounds = 0;
        assert!(c.validate().is_err());
    }

    fn batch(n: usize, d: usize, seed: u64) -> Tensor {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        Tensor::matrix(n, d, (0..n * d).map(|_| dist.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn huge_lambda_freezes_params() {
        let net = TinyNet::random(&[6, 12, 5], QuantSpec::wa(2, 2), 7).unwrap();
        let x = batch(64, 6, 8);
        let init = net.init_quant_params(&x).unwrap();
        let cfg = CalibConfig { lambda_p: 1e15, ..CalibConfig::default() };
        let out = refine(&net, &x, &cfg, CalibState::new(init.clone())).unwrap();
        assert_eq!(out.current, init);
    }

    #[test]
    fn unquantized_net_is_noop() {
        let net = TinyNet::random(&[4, 8, 3], QuantSpec::disabled(), 1).unwrap();
        let x = batch(16, 4, 2);
        let init = net.init_quant_params(&x).unwrap();
        let out = refine(&net, &x, &CalibConfig::default(), CalibState::new(init.clone())).unwrap();
        assert_eq!(out.current, init);
        assert_eq!(out.trace[0].l_cat, 0.0);
        assert!(out.trace.iter().all(|e| e.l_cat == 0.0));
    }

    #[test]
    fn trace_non_increasing_and_params_valid() {
        let net = TinyNet::random(&[6, 10, 4], QuantSpec::wa(3, 3), 3).unwrap();
        let x = batch(48, 6, 4);
        let init = net.init_quant_params(&x).unwrap();
        let out = refine(&net, &x, &CalibConfig::default(), CalibState::new(init.clone())).unwrap();
        for w in out.trace.windows(2) {
            assert!(w[1].l_cat <= w[0].l_cat);
        }
        for (name, p) in out.current.iter() {
            let p0 = init.get(name).unwrap();
            for (z, z0) in p.zero_points().iter().zip(p0.zero_points()) {
                assert!(*z >= p.q_min().min(*z0) && *z <= p.q_max().max(*z0));
            }
            assert!(p.scales().iter().all(|s| *s > 0.0));
        }
        assert!(out.current.get(&act_key(0)).is_some());
    }

    #[test]
    fn deterministic_given_seed() {
        let net = TinyNet::random(&[5, 8, 3], QuantSpec::wa(2, 2), 5).unwrap();
        let x = batch(32, 5, 6);
        let init = net.init_quant_params(&x).unwrap();
        let cfg = CalibConfig::default();
        let a = refine(&net, &x, &cfg, CalibState::new(init.clone())).unwrap();
        let b = refine(&net, &x, &cfg, CalibState::new(init)).unwrap();
        assert_eq!(a, b);
    }
}
