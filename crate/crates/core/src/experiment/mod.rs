//! Reproducible experiments: versioned configs, training modes, and the
//! commands behind the command-line front end.

mod commands;
mod dataset;
mod gradcheck_cmd;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Dims;
use crate::nn::{CheckpointError, NetConfig, NetError, TrainConfig, TrainError};
use crate::phantom::PhantomError;
use crate::quant::Granularity;
use crate::topo_loss::TopoLossWeights;
use crate::volume_io::VolumeIoError;

pub use commands::*;
pub use dataset::{
    load_split, read_manifest, scans_from_specs, write_dataset, DatasetConfig, Manifest, ScanEntry, Split,
    MANIFEST_FILE,
};
pub use gradcheck_cmd::*;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Volume(#[from] VolumeIoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("mode {mode} failed: {source}")]
    ModeFailed {
        mode: Mode,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error("assertion failed: {0}")]
    Assertion(String),
}

impl ExperimentError {
    /// Process exit code: 1 usage, 2 data, 3 assertion.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Usage(_) => 1,
            ExperimentError::Assertion(_) => 3,
            ExperimentError::ModeFailed { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

/// Training modes, one per row of the loss ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "float")]
    Float,
    #[serde(rename = "qat")]
    Qat,
    #[serde(rename = "qat+count")]
    QatCount,
    #[serde(rename = "qat+adj")]
    QatAdj,
    #[serde(rename = "qat+hole")]
    QatHole,
    #[serde(rename = "qat+topo")]
    QatTopo,
}

impl Mode {
    /// Ablation order; the full topological loss comes last.
    pub const ALL: [Mode; 6] = [Mode::Float, Mode::Qat, Mode::QatCount, Mode::QatAdj, Mode::QatHole, Mode::QatTopo];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Float => "float",
            Mode::Qat => "qat",
            Mode::QatCount => "qat+count",
            Mode::QatAdj => "qat+adj",
            Mode::QatHole => "qat+hole",
            Mode::QatTopo => "qat+topo",
        }
    }

    pub fn quantize(self) -> bool {
        self != Mode::Float
    }

    /// The training config for this mode: float drops the quantisation term,
    /// plain modes drop the topological term, single-term modes zero the
    /// other two weights.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let t = &mut cfg.topo;
        match self {
            Mode::Float => {
                cfg.alpha = 0.0;
                cfg.beta = 0.0;
            }
            Mode::Qat => cfg.beta = 0.0,
            Mode::QatCount => (t.lambda2, t.lambda3) = (0.0, 0.0),
            Mode::QatAdj => (t.lambda1, t.lambda3) = (0.0, 0.0),
            Mode::QatHole => (t.lambda1, t.lambda2) = (0.0, 0.0),
            Mode::QatTopo => {}
        }
        cfg
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ExperimentError::Usage(format!("unknown mode {s:?}")))
    }
}

fn d_hidden() -> Vec<usize> {
    vec![4, 8, 8]
}
fn d_slope() -> f64 {
    0.01
}
fn d_true() -> bool {
    true
}

/// Network shape; the output layer width `K + 1` is added automatically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSettings {
    #[serde(default = "d_hidden")]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "d_slope")]
    pub leaky_slope: f64,
    #[serde(default = "d_true")]
    pub coord_channels: bool,
}

impl Default for NetSettings {
    fn default() -> Self {
        Self {
            hidden_widths: d_hidden(),
            leaky_slope: d_slope(),
            coord_channels: true,
        }
    }
}

fn d_momentum() -> f64 {
    0.99
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantOptions {
    #[serde(default)]
    pub weight_granularity: Granularity,
    /// Momentum of the activation range averages.
    #[serde(default = "d_momentum")]
    pub act_momentum: f64,
}

impl Default for QuantOptions {
    fn default() -> Self {
        Self {
            weight_granularity: Granularity::PerChannel,
            act_momentum: d_momentum(),
        }
    }
}

fn d_seed() -> u64 {
    42
}
fn d_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Benchmark training defaults: 300 steps of single-scan batches with a
/// larger learning rate and prior-initialised output biases, which the
/// short budget needs. The topological term joins after a cross-entropy
/// warm-up; switched on from the first step it swamps the mean
/// cross-entropy and the segmentation never forms.
pub fn benchmark_train_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        init_output_prior: true,
        batch_size: 1,
        epochs: 1000,
        max_steps: Some(300),
        topo_warmup_steps: 150,
        ..TrainConfig::default()
    }
}

/// Everything one experiment needs. `seed` drives the dataset, network
/// initialisation and training order; it overrides `train.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub net: NetSettings,
    #[serde(default)]
    pub quant: QuantOptions,
    #[serde(default = "benchmark_train_config")]
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: d_seed(),
            output_dir: d_out(),
            dataset: DatasetConfig::default(),
            net: NetSettings::default(),
            quant: QuantOptions::default(),
            train: benchmark_train_config(),
        }
    }
}

impl ExperimentConfig {
    /// Parse, check the schema version, reject unknown keys, and resolve.
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ExperimentError::Usage(format!("config: {e}")))?;
        match raw.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(ExperimentError::Usage(format!(
                    "config schema_version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(ExperimentError::Usage("config lacks schema_version".into())),
        }
        let cfg: Self = serde_json::from_value(raw).map_err(|e| ExperimentError::Usage(format!("config: {e}")))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Copy the top-level seed into the nested configs.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn dims(&self) -> Dims {
        self.dataset.dims()
    }

    pub fn topo_weights(&self) -> &TopoLossWeights {
        &self.train.topo
    }

    /// Network config for a mode.
    pub fn net_config(&self, mode: Mode) -> NetConfig {
        let k = self.dataset.tooth_count;
        let mut widths = self.net.hidden_widths.clone();
        widths.push(k as usize + 1);
        NetConfig {
            num_classes: k,
            dims: self.dims(),
            widths,
            leaky_slope: self.net.leaky_slope,
            quantize: mode.quantize(),
            weight_granularity: self.quant.weight_granularity,
            coord_channels: self.net.coord_channels,
            act_momentum: self.quant.act_momentum,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let usage = |e: String| ExperimentError::Usage(e);
        self.net_config(Mode::QatTopo).validate().map_err(|e| usage(e.to_string()))?;
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        if self.dataset.train == 0 {
            return Err(usage("dataset.train must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_fail_closed() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        let mut v = cfg.to_json();
        v["surprise"] = serde_json::json!(1);
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(ExperimentError::Usage(_))));
        let mut v = cfg.to_json();
        v["schema_version"] = serde_json::json!(2);
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(ExperimentError::Usage(_))));
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1}"#).is_ok());
    }

    #[test]
    fn modes_toggle_terms() {
        let base = TrainConfig::default();
        let f = Mode::Float.apply(&base);
        assert_eq!((f.alpha, f.beta), (0.0, 0.0));
        let c = Mode::QatCount.apply(&base);
        assert_eq!((c.topo.lambda1, c.topo.lambda2, c.topo.lambda3), (0.1, 0.0, 0.0));
        let t = Mode::QatTopo.apply(&base);
        assert_eq!((t.alpha, t.beta), (0.01, 0.1));
        assert_eq!((t.topo.lambda1, t.topo.lambda2, t.topo.lambda3), (0.1, 0.3, 0.05));
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
    }
}
