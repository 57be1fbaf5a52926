//! Uniform affine quantization on a signed integer grid.
//!
//! For a bit-width `b` the grid is `[-2^(b-1), 2^(b-1) - 1]`. A real value
//! `f` maps to `clip(round(f / scale) + zero_point, q_min, q_max)` and back to
//! `scale * (q - zero_point)`. Rounding is half-to-even throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;

/// Whether one `(scale, zero_point)` pair covers the whole tensor or one pair
/// is kept per slice along `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

/// Scale, zero-point and grid for one tensor.
///
/// Per-channel parameters hold one scale and one zero-point per slice; a
/// per-tensor instance holds exactly one of each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuantParamsRepr", into = "QuantParamsRepr")]
pub struct QuantParams {
    bit_width: u32,
    granularity: Granularity,
    scales: Vec<f64>,
    zero_points: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantParamsRepr {
    bit_width: u32,
    granularity: Granularity,
    q_max: i64,
    q_min: i64,
    scales: Vec<f64>,
    zero_points: Vec<i64>,
}

impl From<QuantParams> for QuantParamsRepr {
    fn from(p: QuantParams) -> Self {
        QuantParamsRepr {
            bit_width: p.bit_width,
            granularity: p.granularity,
            q_max: p.q_max(),
            q_min: p.q_min(),
            scales: p.scales,
            zero_points: p.zero_points,
        }
    }
}

impl TryFrom<QuantParamsRepr> for QuantParams {
    type Error = Error;

    fn try_from(r: QuantParamsRepr) -> Result<Self> {
        let p = QuantParams::new(r.bit_width, r.granularity, r.scales, r.zero_points)?;
        if r.q_min != p.q_min() || r.q_max != p.q_max() {
            return Err(Error::validation(
                "q_min/q_max",
                format!(
                    "grid [{}, {}] does not match bit width {}",
                    r.q_min, r.q_max, r.bit_width
                ),
            ));
        }
        Ok(p)
    }
}

pub fn grid_bounds(bit_width: u32) -> (i64, i64) {
    let half = 1i64 << (bit_width - 1);
    (-half, half - 1)
}

fn check_bits(bit_width: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bit_width) {
        return Err(Error::Parameter(format!(
            "bit width must be in [{MIN_BITS}, {MAX_BITS}], got {bit_width}"
        )));
    }
    Ok(())
}

impl QuantParams {
    pub fn new(
        bit_width: u32,
        granularity: Granularity,
        scales: Vec<f64>,
        zero_points: Vec<i64>,
    ) -> Result<Self> {
        check_bits(bit_width).map_err(|e| Error::validation("bit_width", e.to_string()))?;
        if scales.is_empty() || scales.len() != zero_points.len() {
            return Err(Error::validation(
                "scales",
                format!(
                    "need one scale per zero point and at least one, got {} and {}",
                    scales.len(),
                    zero_points.len()
                ),
            ));
        }
        if matches!(granularity, Granularity::PerTensor) && scales.len() != 1 {
            return Err(Error::validation(
                "scales",
                "per-tensor parameters carry exactly one scale",
            ));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::validation("scales", format!("scale {s} is not positive")));
        }
        Ok(Self {
            bit_width,
            granularity,
            scales,
            zero_points,
        })
    }

    pub fn per_tensor(bit_width: u32, scale: f64, zero_point: i64) -> Result<Self> {
        Self::new(bit_width, Granularity::PerTensor, vec![scale], vec![zero_point])
    }

    pub fn bit_width(&self) -> u32 {
        self.bit_width
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn q_min(&self) -> i64 {
        grid_bounds(self.bit_width).0
    }

    pub fn q_max(&self) -> i64 {
        grid_bounds(self.bit_width).1
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i64] {
        &self.zero_points
    }

    /// Number of `(scale, zero_point)` pairs.
    pub fn slices(&self) -> usize {
        self.scales.len()
    }

    /// Copy with slice `i`'s scale replaced. `scale` must be positive.
    pub fn with_scale(&self, i: usize, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Parameter(format!("scale {scale} is not positive")));
        }
        let mut p = self.clone();
        p.scales[i] = scale;
        Ok(p)
    }

    pub fn with_zero_point(&self, i: usize, zero_point: i64) -> Self {
        let mut p = self.clone();
        p.zero_points[i] = zero_point;
        p
    }

    /// Integer code of `f` under slice `i`.
    pub fn quantize_in(&self, f: f64, i: usize) -> i64 {
        quantize_raw(f, self.scales[i], self.zero_points[i], self.q_min(), self.q_max())
    }

    /// Real value of code `q` under slice `i`.
    pub fn dequantize_in(&self, q: i64, i: usize) -> Result<f64> {
        if q < self.q_min() || q > self.q_max() {
            return Err(Error::Contract(format!(
                "code {q} is outside the grid [{}, {}]",
                self.q_min(),
                self.q_max()
            )));
        }
        Ok(self.scales[i] * (q - self.zero_points[i]) as f64)
    }

    fn fake_in(&self, f: f64, i: usize) -> f64 {
        let q = self.quantize_in(f, i);
        self.scales[i] * (q - self.zero_points[i]) as f64
    }
}

fn quantize_raw(f: f64, scale: f64, zero_point: i64, q_min: i64, q_max: i64) -> i64 {
    // Clip in the real domain first so huge ratios never overflow the cast.
    let shifted = (f / scale).round_ties_even() + zero_point as f64;
    shifted.clamp(q_min as f64, q_max as f64) as i64
}

/// Quantizes one value with single-slice parameters.
pub fn quantize(f: f64, p: &QuantParams) -> i64 {
    p.quantize_in(f, 0)
}

/// Maps a grid code back to a real value with single-slice parameters.
pub fn dequantize(q: i64, p: &QuantParams) -> Result<f64> {
    p.dequantize_in(q, 0)
}

/// Index of the slice each flat element belongs to along `axis`.
fn slice_index(shape: &[usize], axis: usize, flat: usize) -> usize {
    let stride: usize = shape[axis + 1..].iter().product();
    (flat / stride) % shape[axis]
}

fn check_granularity(shape: &[usize], granularity: Granularity, slices: usize) -> Result<()> {
    if let Granularity::PerChannel { axis } = granularity {
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "channel axis {axis} out of range for shape {shape:?}"
            )));
        }
        if shape[axis] != slices {
            return Err(Error::Contract(format!(
                "{slices} channel parameters for axis {axis} of shape {shape:?}"
            )));
        }
    }
    Ok(())
}

/// Min-max calibration: scale and zero-point from the observed extrema of
/// each slice.
///
/// A constant slice has no range; it gets `scale = max(|f|, 1) * 2^(1-b)`
/// and zero-point 0.
pub fn derive_minmax(values: &Tensor, bit_width: u32, granularity: Granularity) -> Result<QuantParams> {
    check_bits(bit_width)?;
    let shape = values.shape();
    let slices = match granularity {
        Granularity::PerTensor => 1,
        Granularity::PerChannel { axis } => {
            if axis >= shape.len() {
                return Err(Error::Contract(format!(
                    "channel axis {axis} out of range for shape {shape:?}"
                )));
            }
            shape[axis]
        }
    };
    let mut lo = vec![f64::INFINITY; slices];
    let mut hi = vec![f64::NEG_INFINITY; slices];
    for (flat, &v) in values.data().iter().enumerate() {
        let s = match granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel { axis } => slice_index(shape, axis, flat),
        };
        lo[s] = lo[s].min(v);
        hi[s] = hi[s].max(v);
    }
    let (q_min, q_max) = grid_bounds(bit_width);
    let mut scales = Vec::with_capacity(slices);
    let mut zero_points = Vec::with_capacity(slices);
    for (&f_min, &f_max) in lo.iter().zip(&hi) {
        let (scale, zp) = range_params(f_min, f_max, bit_width, q_min, q_max);
        scales.push(scale);
        zero_points.push(zp);
    }
    QuantParams::new(bit_width, granularity, scales, zero_points)
}

/// Scale and zero-point for one observed range.
pub fn range_params(f_min: f64, f_max: f64, bit_width: u32, q_min: i64, q_max: i64) -> (f64, i64) {
    if f_max > f_min {
        let scale = (f_max - f_min) / (q_max - q_min) as f64;
        let zp = (q_min as f64 - f_min / scale).round_ties_even() as i64;
        (scale, zp)
    } else {
        let scale = f_max.abs().max(1.0) * 2f64.powi(1 - bit_width as i32);
        (scale, 0)
    }
}

/// `dequantize(quantize(x))` applied elementwise, slice-aware.
pub fn fake_quantize(values: &Tensor, p: &QuantParams) -> Result<Tensor> {
    check_granularity(values.shape(), p.granularity, p.slices())?;
    let shape = values.shape();
    let data = values
        .data()
        .iter()
        .enumerate()
        .map(|(flat, &v)| {
            let s = match p.granularity {
                Granularity::PerTensor => 0,
                Granularity::PerChannel { axis } => slice_index(shape, axis, flat),
            };
            p.fake_in(v, s)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}
