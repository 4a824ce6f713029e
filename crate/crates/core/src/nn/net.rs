//! The segmenter: a plain stack of 3x3x3 convolutions, each hidden one followed
//! by instance normalisation and LeakyReLU, ending in per-class logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Dims, LabelMask, LogitMap, ProbMap, Volume3D};
use crate::quant::{in_range, quantize_scalar, Granularity, QuantScheme, RangeCalibrator};

use super::tape::{Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("input dims {actual:?} do not match the configured {expected:?}")]
    DimsMismatch { expected: Dims, actual: Dims },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
}

fn default_true() -> bool {
    true
}

fn default_slope() -> f64 {
    0.01
}

fn default_momentum() -> f64 {
    0.99
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub num_classes: u16,
    pub dims: Dims,
    /// Output width of every convolution; the last must be `num_classes + 1`.
    pub widths: Vec<usize>,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    pub quantize: bool,
    #[serde(default)]
    pub weight_granularity: Granularity,
    /// Append normalised `(z, y, x)` coordinates as extra input channels.
    #[serde(default = "default_true")]
    pub coord_channels: bool,
    #[serde(default = "default_momentum")]
    pub act_momentum: f64,
    pub seed: u64,
}

impl NetConfig {
    /// Default widths `[8, 16, 16, K + 1]`.
    pub fn new(num_classes: u16, dims: Dims) -> Self {
        Self {
            num_classes,
            dims,
            widths: vec![8, 16, 16, num_classes as usize + 1],
            leaky_slope: default_slope(),
            quantize: true,
            weight_granularity: Granularity::PerChannel,
            coord_channels: true,
            act_momentum: default_momentum(),
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.dims.is_empty() {
            return bad("dims must be positive");
        }
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return bad("widths must be non-empty and positive");
        }
        if *self.widths.last().unwrap() != self.num_classes as usize + 1 {
            return bad("final width must equal num_classes + 1");
        }
        if !(self.act_momentum > 0.0 && self.act_momentum < 1.0) {
            return bad("act_momentum must lie in (0, 1)");
        }
        if !self.leaky_slope.is_finite() {
            return bad("leaky_slope must be finite");
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        if self.coord_channels {
            4
        } else {
            1
        }
    }

    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    /// `(cin, cout)` of layer `l`.
    pub fn layer_io(&self, l: usize) -> (usize, usize) {
        let cin = if l == 0 { self.input_channels() } else { self.widths[l - 1] };
        (cin, self.widths[l])
    }
}

/// Indices of one layer's tensors in [`Net::params`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerParams {
    pub weight: usize,
    pub bias: usize,
    /// `(gamma, beta)` for hidden layers.
    pub norm: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub config: NetConfig,
    pub params: Vec<Vec<f64>>,
    pub calibrators: Vec<RangeCalibrator>,
    layout: Vec<LayerParams>,
}

/// Where activation scales come from during a forward pass.
pub enum ActScales<'a> {
    /// Update the calibrators with this pass's activations, then use them.
    Update(&'a mut [RangeCalibrator]),
    /// Read the calibrators without updating.
    Current,
    Fixed(&'a [QuantScheme]),
}

/// How fake quantisation is applied in a forward pass.
pub struct QuantPlan<'a> {
    /// Per-layer weight schemes; `None` derives per-channel scales from the
    /// current weights.
    pub weights: Option<&'a [QuantScheme]>,
    pub acts: ActScales<'a>,
    /// When false, values are clamped but not rounded. Used by gradient
    /// checks, where it makes the forward map match the straight-through
    /// derivative exactly.
    pub round: bool,
}

/// A tensor monitored by the quantisation regulariser.
#[derive(Debug, Clone)]
pub struct QuantTap {
    pub var: Var,
    /// `Q(x)` with rounding, held constant by the regulariser.
    pub target: Vec<f64>,
}

#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
    /// Weight then activation tap for every quantised convolution.
    pub taps: Vec<QuantTap>,
    pub weight_schemes: Vec<QuantScheme>,
    pub act_schemes: Vec<QuantScheme>,
    /// Inputs of every LeakyReLU, whose signs fix the piecewise-linear branch.
    pub pre_activations: Vec<Var>,
}

impl Net {
    /// Seeded He-uniform weights, zero biases, unit norm scales.
    pub fn new(config: NetConfig) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut layout = Vec::new();
        for l in 0..config.layers() {
            let (cin, cout) = config.layer_io(l);
            let bound = (6.0 / (cin * 27) as f64).sqrt();
            params.push((0..cout * cin * 27).map(|_| rng.gen_range(-bound..bound)).collect());
            let weight = params.len() - 1;
            params.push(vec![0.0; cout]);
            let bias = params.len() - 1;
            let norm = if l + 1 < config.layers() {
                params.push(vec![1.0; cout]);
                params.push(vec![0.0; cout]);
                Some((params.len() - 2, params.len() - 1))
            } else {
                None
            };
            layout.push(LayerParams { weight, bias, norm });
        }
        let calibrators = (0..config.layers())
            .map(|_| RangeCalibrator::new(config.act_momentum).expect("validated momentum"))
            .collect();
        Ok(Self {
            config,
            params,
            calibrators,
            layout,
        })
    }

    pub(crate) fn from_parts(config: NetConfig, params: Vec<Vec<f64>>, calibrators: Vec<RangeCalibrator>) -> Result<Self, NetError> {
        let fresh = Self::new(config)?;
        if params.len() != fresh.params.len()
            || params.iter().zip(&fresh.params).any(|(a, b)| a.len() != b.len())
            || calibrators.len() != fresh.calibrators.len()
        {
            return Err(NetError::InvalidConfig("parameter shapes do not match the config".into()));
        }
        Ok(Self {
            params,
            calibrators,
            ..fresh
        })
    }

    pub fn layout(&self) -> &[LayerParams] {
        &self.layout
    }

    /// Set the output biases to `ln(freq)`, floored at a millionth.
    pub fn set_output_prior(&mut self, freq: &[f64]) {
        let bias = self.layout.last().expect("at least one layer").bias;
        for (b, &f) in self.params[bias].iter_mut().zip(freq) {
            *b = f.max(1e-6).ln();
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Intensity channel followed by optional coordinate channels in `[-1, 1]`.
    pub fn input_tensor(&self, x: &Volume3D) -> Result<Vec<f64>, NetError> {
        if x.dims() != self.config.dims {
            return Err(NetError::DimsMismatch {
                expected: self.config.dims,
                actual: x.dims(),
            });
        }
        let dims = x.dims();
        let mut data = x.data().to_vec();
        if self.config.coord_channels {
            let norm = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
            for axis in 0..3 {
                data.extend((0..dims.len()).map(|v| {
                    let (z, y, xx) = dims.coords(v);
                    let c = [z, y, xx][axis];
                    norm(c, dims.as_array()[axis])
                }));
            }
        }
        Ok(data)
    }

    /// Build the forward graph on `tape`. With `plan = None` the float path is
    /// used even if the config enables quantisation.
    pub fn forward(&self, tape: &mut Tape, x: &Volume3D, mut plan: Option<QuantPlan<'_>>) -> Result<Forward, NetError> {
        let input = self.input_tensor(x)?;
        let dims = self.config.dims;
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let mut h = tape.leaf(input);
        let mut taps = Vec::new();
        let mut weight_schemes = Vec::new();
        let mut act_schemes = Vec::new();
        let mut pre_activations = Vec::new();
        for (l, lp) in self.layout.iter().enumerate() {
            let (cin, cout) = self.config.layer_io(l);
            let mut w = params[lp.weight];
            if let Some(plan) = plan.as_mut() {
                let a_scheme = match &mut plan.acts {
                    ActScales::Update(cals) => {
                        cals[l].update(tape.value(h));
                        cals[l].finalize()
                    }
                    ActScales::Current => self.calibrators[l].finalize(),
                    ActScales::Fixed(s) => s[l].clone(),
                };
                let w_scheme = match plan.weights {
                    Some(s) => s[l].clone(),
                    None => QuantScheme::for_weights(tape.value(w), cout, self.config.weight_granularity),
                };
                let (hq, tap_h) = fake_quant(tape, h, &a_scheme, plan.round);
                let (wq, tap_w) = fake_quant(tape, w, &w_scheme, plan.round);
                taps.push(tap_w);
                taps.push(tap_h);
                h = hq;
                w = wq;
                weight_schemes.push(w_scheme);
                act_schemes.push(a_scheme);
            }
            h = tape.conv3d(h, w, params[lp.bias], cin, dims);
            if let Some((g, b)) = lp.norm {
                h = tape.instance_norm(h, params[g], params[b], cout);
                pre_activations.push(h);
                h = tape.leaky_relu(h, self.config.leaky_slope);
            }
        }
        Ok(Forward {
            logits: h,
            params,
            taps,
            weight_schemes,
            act_schemes,
            pre_activations,
        })
    }

    /// Quantisation plan used at inference when the config enables it.
    pub fn inference_plan(&self) -> Option<QuantPlan<'static>> {
        self.config.quantize.then_some(QuantPlan {
            weights: None,
            acts: ActScales::Current,
            round: true,
        })
    }

    /// Logits for `x` (single forward pass, no topological post-processing).
    pub fn predict_logits(&self, x: &Volume3D) -> Result<LogitMap, NetError> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, x, self.inference_plan())?;
        Ok(LogitMap::new(self.config.dims, self.config.num_classes as usize + 1, tape.value(fwd.logits).to_vec())
            .expect("finite logits"))
    }

    /// Softmax probabilities and the argmax labelling (ties to the lower class).
    pub fn infer(&self, x: &Volume3D) -> Result<(ProbMap, LabelMask), NetError> {
        let probs = self.predict_logits(x)?.softmax();
        let labels = probs.argmax();
        Ok((probs, labels))
    }
}

/// Insert a fake-quantisation node for `x` and return it with its tap.
fn fake_quant(tape: &mut Tape, x: Var, scheme: &QuantScheme, round: bool) -> (Var, QuantTap) {
    let xv = tape.value(x);
    let n = xv.len();
    let mut value = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    let mut pass = Vec::with_capacity(n);
    for (i, &v) in xv.iter().enumerate() {
        let s = scheme.scale_at(i, n);
        let q = quantize_scalar(v, s);
        target.push(q);
        pass.push(in_range(v, s));
        value.push(if round { q } else { v.clamp(-127.0 * s, 127.0 * s) });
    }
    let var = tape.straight_through(x, value, pass);
    (var, QuantTap { var: x, target })
}
