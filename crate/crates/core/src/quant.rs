//! Symmetric 8-bit fake quantisation with a clipped straight-through estimator.
//!
//! `Q(x) = clamp(round(x / s), -127, 127) * s` with ties rounded away from zero
//! (`f64::round`). The integer range is symmetric, so `Q(-x) = -Q(x)` exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const QMAX: f64 = 127.0;
/// Scale floor for all-zero calibration streams.
pub const MIN_SCALE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
    #[error("invalid scheme: {0}")]
    InvalidScheme(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("32-bit accumulator overflow at output index {0}")]
    AccumulatorOverflow(usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    #[default]
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantScheme {
    pub bits: u32,
    pub symmetric: bool,
    pub granularity: Granularity,
    /// One scale, or one per leading-axis channel.
    pub scales: Vec<f64>,
}

impl QuantScheme {
    pub fn per_tensor(scale: f64) -> Self {
        Self {
            bits: 8,
            symmetric: true,
            granularity: Granularity::PerTensor,
            scales: vec![scale],
        }
    }

    pub fn per_channel(scales: Vec<f64>) -> Self {
        Self {
            bits: 8,
            symmetric: true,
            granularity: Granularity::PerChannel,
            scales,
        }
    }

    /// Per-channel scales `max |w_c| / 127` over the leading axis of `w`.
    pub fn from_weights(w: &[f64], channels: usize) -> Self {
        let per = w.len() / channels;
        Self::per_channel(
            (0..channels)
                .map(|c| (absmax(&w[c * per..(c + 1) * per]) / QMAX).max(MIN_SCALE))
                .collect(),
        )
    }

    /// Weight scheme at the given granularity: `max |w| / 127` over the whole
    /// tensor or per leading-axis channel.
    pub fn for_weights(w: &[f64], channels: usize, granularity: Granularity) -> Self {
        match granularity {
            Granularity::PerChannel => Self::from_weights(w, channels),
            Granularity::PerTensor => Self::per_tensor((absmax(w) / QMAX).max(MIN_SCALE)),
        }
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if self.bits != 8 || !self.symmetric {
            return Err(QuantError::InvalidScheme("only symmetric 8-bit is supported".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(QuantError::InvalidScheme("scales must be positive and finite".into()));
        }
        if self.granularity == Granularity::PerTensor && self.scales.len() != 1 {
            return Err(QuantError::InvalidScheme("per-tensor scheme needs exactly one scale".into()));
        }
        Ok(())
    }

    /// Scale applying to flat index `i` of a tensor of length `len`.
    #[inline]
    pub fn scale_at(&self, i: usize, len: usize) -> f64 {
        match self.granularity {
            Granularity::PerTensor => self.scales[0],
            Granularity::PerChannel => self.scales[i / (len / self.scales.len())],
        }
    }

    fn check_len(&self, len: usize) -> Result<(), QuantError> {
        if self.granularity == Granularity::PerChannel && len % self.scales.len() != 0 {
            return Err(QuantError::Shape(format!(
                "length {len} is not divisible by {} channels",
                self.scales.len()
            )));
        }
        Ok(())
    }
}

pub(crate) fn absmax(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Integer code `clamp(round(x / s), -127, 127)`.
#[inline]
pub fn quantize_code(x: f64, s: f64) -> f64 {
    (x / s).round().clamp(-QMAX, QMAX)
}

#[inline]
pub fn quantize_scalar(x: f64, s: f64) -> f64 {
    quantize_code(x, s) * s
}

/// Whether the STE passes gradient for `x` (inside the clamp range).
#[inline]
pub fn in_range(x: f64, s: f64) -> bool {
    (x / s).abs() <= QMAX
}

pub fn quantize(x: &[f64], scheme: &QuantScheme) -> Result<Vec<f64>, QuantError> {
    scheme.validate()?;
    scheme.check_len(x.len())?;
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite(i));
    }
    let n = x.len();
    Ok(x.iter()
        .enumerate()
        .map(|(i, &v)| quantize_scalar(v, scheme.scale_at(i, n)))
        .collect())
}

/// Clipped straight-through gradient: upstream where `|x / s| <= 127`, else 0.
pub fn ste_backward(upstream: &[f64], x: &[f64], scheme: &QuantScheme) -> Result<Vec<f64>, QuantError> {
    scheme.validate()?;
    scheme.check_len(x.len())?;
    if upstream.len() != x.len() {
        return Err(QuantError::Shape("upstream and input lengths differ".into()));
    }
    let n = x.len();
    Ok(upstream
        .iter()
        .zip(x)
        .enumerate()
        .map(|(i, (&g, &v))| if in_range(v, scheme.scale_at(i, n)) { g } else { 0.0 })
        .collect())
}

/// Exponential moving average of the absolute maximum of a tensor stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeCalibrator {
    pub running_absmax: f64,
    pub momentum: f64,
    pub updates: u64,
}

impl RangeCalibrator {
    pub fn new(momentum: f64) -> Result<Self, QuantError> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(QuantError::InvalidScheme(format!("momentum {momentum} outside (0, 1)")));
        }
        Ok(Self {
            running_absmax: 0.0,
            momentum,
            updates: 0,
        })
    }

    /// `running <- m * running + (1 - m) * absmax(batch)`.
    pub fn update(&mut self, batch: &[f64]) {
        let m = self.momentum;
        self.running_absmax = m * self.running_absmax + (1.0 - m) * absmax(batch);
        self.updates += 1;
    }

    /// The average with the zero-start bias divided out, `running / (1 - m^t)`.
    /// Equals the raw average in the limit of a long stream.
    pub fn debiased_absmax(&self) -> f64 {
        if self.updates == 0 {
            return 0.0;
        }
        let t = i32::try_from(self.updates).unwrap_or(i32::MAX);
        self.running_absmax / (1.0 - self.momentum.powi(t))
    }

    /// Per-tensor scheme with `s = debiased_absmax / 127`, floored at 1e-12.
    pub fn finalize(&self) -> QuantScheme {
        QuantScheme::per_tensor((self.debiased_absmax() / QMAX).max(MIN_SCALE))
    }
}

/// `||w - Q(w)||^2` summed over the given `(tensor, quantised)` pairs, with
/// gradient `2 (w - Q(w))` per tensor (the quantised copy is held constant).
pub fn quant_loss(pairs: &[(&[f64], &[f64])]) -> Result<(f64, Vec<Vec<f64>>), QuantError> {
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(pairs.len());
    for (k, (w, q)) in pairs.iter().enumerate() {
        if w.len() != q.len() {
            return Err(QuantError::Shape(format!("pair {k} has mismatched lengths")));
        }
        let mut g = Vec::with_capacity(w.len());
        for (a, b) in w.iter().zip(q.iter()) {
            let r = a - b;
            value += r * r;
            g.push(2.0 * r);
        }
        grads.push(g);
    }
    Ok((value, grads))
}

/// Zero-padded, stride-1 3D convolution of int8 codes with int32 accumulation,
/// rescaled by `s_x * s_w[c]`.
///
/// `x` is `[cin, d, h, w]`, `weights` is `[cout, cin, 3, 3, 3]`; `w_scales`
/// has one entry per output channel. Bias is added in floating point.
pub fn integer_reference_conv(
    x: &[i8],
    x_scale: f64,
    dims: [usize; 3],
    cin: usize,
    weights: &[i8],
    w_scales: &[f64],
    bias: &[f64],
) -> Result<Vec<f64>, QuantError> {
    let cout = w_scales.len();
    let [d, h, w] = dims;
    let n = d * h * w;
    if x.len() != cin * n || weights.len() != cout * cin * 27 || bias.len() != cout {
        return Err(QuantError::Shape("integer conv operand sizes".into()));
    }
    let mut out = vec![0.0; cout * n];
    for co in 0..cout {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc: i32 = 0;
                    for ci in 0..cin {
                        for kz in 0..3 {
                            let iz = z as isize + kz as isize - 1;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for ky in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = xx as isize + kx as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = x[ci * n + (iz as usize * h + iy as usize) * w + ix as usize] as i32;
                                    let wi = weights[((co * cin + ci) * 3 + kz) * 9 + ky * 3 + kx] as i32;
                                    acc = acc
                                        .checked_add(xi * wi)
                                        .ok_or(QuantError::AccumulatorOverflow(co * n + (z * h + y) * w + xx))?;
                                }
                            }
                        }
                    }
                    out[co * n + (z * h + y) * w + xx] = acc as f64 * (x_scale * w_scales[co]) + bias[co];
                }
            }
        }
    }
    Ok(out)
}

/// Integer codes of `x` under a per-tensor scale.
pub fn to_int8(x: &[f64], scale: f64) -> Vec<i8> {
    x.iter().map(|&v| quantize_code(v, scale) as i8).collect()
}
