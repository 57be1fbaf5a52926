//! A tiny sequential dense/ReLU network with full-precision and
//! fake-quantized forward passes.
//!
//! Quantization placement:
//! - every layer's weights are fake-quantized per output channel, at
//!   `weight_bits`, except the final layer which uses `last_layer_bits`;
//! - every hidden layer's output is fake-quantized per tensor at `act_bits`,
//!   after its activation function;
//! - the network input and the final logits are never quantized.
//!
//! A `None` bit-width disables quantization of that tensor class. By
//! default the final layer is kept at 8 bits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::quantizer::{derive_minmax, fake_quantize, Granularity, QuantParams};

pub const MODEL_FORMAT: &str = "catq-model/1";
pub const DEFAULT_LAST_LAYER_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        let (out, _) = weights.expect_matrix("layer weights")?;
        if bias.len() != out {
            return Err(Error::Contract(format!(
                "bias has {} entries for {out} outputs",
                bias.len()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Contract("bias contains a non-finite value".into()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    fn apply(&self, batch: &Tensor, weights: &Tensor) -> Tensor {
        let n = batch.rows();
        let (out, inp) = (self.outputs(), self.inputs());
        let w = weights.data();
        let mut data = Vec::with_capacity(n * out);
        for x in batch.row_iter() {
            for o in 0..out {
                let wr = &w[o * inp..(o + 1) * inp];
                let mut acc = self.bias[o];
                for (a, b) in wr.iter().zip(x) {
                    acc += a * b;
                }
                data.push(match self.activation {
                    Activation::Relu => acc.max(0.0),
                    Activation::None => acc,
                });
            }
        }
        Tensor::matrix(n, out, data).expect("dense layer output shape")
    }
}

/// Bit-widths of the simulated low-bit network. `None` leaves a tensor class
/// in full precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub weight_bits: Option<u32>,
    pub act_bits: Option<u32>,
    pub last_layer_bits: Option<u32>,
}

impl QuantSpec {
    /// `WbAa` with the final layer held at 8 bits.
    pub fn wa(weight_bits: u32, act_bits: u32) -> Self {
        Self {
            weight_bits: Some(weight_bits),
            act_bits: Some(act_bits),
            last_layer_bits: Some(DEFAULT_LAST_LAYER_BITS),
        }
    }

    /// Every tensor in full precision.
    pub fn disabled() -> Self {
        Self {
            weight_bits: None,
            act_bits: None,
            last_layer_bits: None,
        }
    }
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self::wa(8, 8)
    }
}

/// Quantization parameters keyed by tensor name (`layer{i}.weight`,
/// `layer{i}.act`). Ordered so iteration and serialization are stable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantParamSet(pub BTreeMap<String, QuantParams>);

impl QuantParamSet {
    pub fn get(&self, name: &str) -> Option<&QuantParams> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: String, params: QuantParams) {
        self.0.insert(name, params);
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &QuantParams)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn weight_key(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub fn act_key(layer: usize) -> String {
    format!("layer{layer}.act")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    layers: Vec<DenseLayer>,
    quant_spec: QuantSpec,
}

impl TinyNet {
    pub fn new(layers: Vec<DenseLayer>, quant_spec: QuantSpec) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::validation("layers", "a network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::validation(
                    format!("layers[{}]", i + 1),
                    format!(
                        "layer {i} produces {} outputs but layer {} expects {} inputs",
                        pair[0].outputs(),
                        i + 1,
                        pair[1].inputs()
                    ),
                ));
            }
        }
        for (field, bits) in [
            ("quant.weight_bits", quant_spec.weight_bits),
            ("quant.act_bits", quant_spec.act_bits),
            ("quant.last_layer_bits", quant_spec.last_layer_bits),
        ] {
            if let Some(b) = bits {
                if !(crate::quantizer::MIN_BITS..=crate::quantizer::MAX_BITS).contains(&b) {
                    return Err(Error::validation(field, format!("bit width {b} out of range")));
                }
            }
        }
        Ok(Self { layers, quant_spec })
    }

    /// Gaussian-initialized network with `dims = [in, hidden.., out]`.
    /// Hidden layers use ReLU; the last layer is linear. Weights are drawn
    /// with variance `2 / fan_in` so activations stay near unit scale.
    pub fn random(dims: &[usize], quant_spec: QuantSpec, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Parameter(format!(
                "need at least two positive layer sizes, got {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let (inp, out) = (pair[0], pair[1]);
            let w_dist = Normal::new(0.0, (2.0 / inp as f64).sqrt()).expect("valid std");
            let b_dist = Normal::new(0.0, 0.1).expect("valid std");
            let weights: Vec<f64> = (0..inp * out).map(|_| w_dist.sample(&mut rng)).collect();
            let bias: Vec<f64> = (0..out).map(|_| b_dist.sample(&mut rng)).collect();
            let activation = if i + 2 == dims.len() {
                Activation::None
            } else {
                Activation::Relu
            };
            layers.push(DenseLayer::new(Tensor::matrix(out, inp, weights)?, bias, activation)?);
        }
        Self::new(layers, quant_spec)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn quant_spec(&self) -> QuantSpec {
        self.quant_spec
    }

    pub fn with_quant_spec(mut self, spec: QuantSpec) -> Result<Self> {
        let layers = std::mem::take(&mut self.layers);
        Self::new(layers, spec)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    /// Logit dimension `d`.
    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    fn is_last(&self, i: usize) -> bool {
        i + 1 == self.layers.len()
    }

    /// Bit-width of layer `i`'s weights, if they are quantized.
    pub fn weight_bits(&self, i: usize) -> Option<u32> {
        if self.is_last(i) {
            self.quant_spec.last_layer_bits
        } else {
            self.quant_spec.weight_bits
        }
    }

    /// Bit-width of layer `i`'s output activation, if quantized.
    pub fn act_bits(&self, i: usize) -> Option<u32> {
        if self.is_last(i) {
            None
        } else {
            self.quant_spec.act_bits
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let (_, width) = batch.expect_matrix("input batch")?;
        if width != self.input_dim() {
            return Err(Error::Contract(format!(
                "batch width {width} does not match network input {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Full-precision logits, `n x d`.
    pub fn forward_fp(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = layer.apply(&x, &layer.weights);
        }
        Ok(x)
    }

    /// Hidden activations of an FP pass, one tensor per non-final layer.
    fn fp_activations(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        self.check_batch(batch)?;
        let mut out = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut x = batch.clone();
        for layer in &self.layers[..self.layers.len() - 1] {
            x = layer.apply(&x, &layer.weights);
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Fake-quantized logits under `params`.
    pub fn forward_lq(&self, batch: &Tensor, params: &QuantParamSet) -> Result<Tensor> {
        let weights = self.quantized_weights(params)?;
        self.forward_lq_with_weights(batch, &weights, params)
    }

    /// Weight tensors as the LQ pass sees them.
    pub fn quantized_weights(&self, params: &QuantParamSet) -> Result<Vec<Tensor>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, layer)| match self.weight_bits(i) {
                None => Ok(layer.weights.clone()),
                Some(_) => {
                    let key = weight_key(i);
                    let p = params.get(&key).ok_or_else(|| {
                        Error::Config(format!("missing quantization parameters for `{key}`"))
                    })?;
                    fake_quantize(&layer.weights, p)
                }
            })
            .collect()
    }

    /// LQ pass with pre-quantized weights; the calibration search reuses the
    /// weights of layers it is not currently perturbing.
    pub fn forward_lq_with_weights(
        &self,
        batch: &Tensor,
        weights: &[Tensor],
        params: &QuantParamSet,
    ) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for (i, (layer, w)) in self.layers.iter().zip(weights).enumerate() {
            x = layer.apply(&x, w);
            if self.act_bits(i).is_some() {
                let key = act_key(i);
                let p = params.get(&key).ok_or_else(|| {
                    Error::Config(format!("missing quantization parameters for `{key}`"))
                })?;
                x = fake_quantize(&x, p)?;
            }
        }
        Ok(x)
    }

    /// Min-max initialization of every quantized tensor: weights per output
    /// channel, activations per tensor from an FP pass over `calib`.
    pub fn init_quant_params(&self, calib: &Tensor) -> Result<QuantParamSet> {
        let acts = self.fp_activations(calib)?;
        let mut set = QuantParamSet::default();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(bits) = self.weight_bits(i) {
                let p = derive_minmax(&layer.weights, bits, Granularity::PerChannel { axis: 0 })?;
                set.insert(weight_key(i), p);
            }
            if let Some(bits) = self.act_bits(i) {
                let p = derive_minmax(&acts[i], bits, Granularity::PerTensor)?;
                set.insert(act_key(i), p);
            }
        }
        Ok(set)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    weights: l.weights.to_rows(),
                    bias: l.bias.clone(),
                    activation: l.activation,
                })
                .collect(),
            quant: self.quant_spec,
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.format != MODEL_FORMAT {
            return Err(Error::validation(
                "format",
                format!("expected `{MODEL_FORMAT}`, found `{}`", file.format),
            ));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, l) in file.layers.into_iter().enumerate() {
            let weights = Tensor::from_rows(&l.weights)
                .map_err(|e| Error::validation(format!("layers[{i}].weights"), e.to_string()))?;
            let layer = DenseLayer::new(weights, l.bias, l.activation)
                .map_err(|e| Error::validation(format!("layers[{i}]"), e.to_string()))?;
            layers.push(layer);
        }
        Self::new(layers, file.quant)
    }
}

/// On-disk JSON form of a [`TinyNet`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub layers: Vec<LayerFile>,
    pub quant: QuantSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFile {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TinyNet> {
    let file: ModelFile = crate::io::read_json(path.as_ref())?;
    TinyNet::from_file(file)
}

pub fn save_model(path: impl AsRef<Path>, net: &TinyNet) -> Result<()> {
    crate::io::write_json(path.as_ref(), &net.to_file())
}
