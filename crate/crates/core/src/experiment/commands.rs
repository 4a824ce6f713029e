//! The experiment commands. Every command computes its full result before
//! writing anything, and every file is written atomically.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{evaluate_scan, MetricsReport};
use crate::nn::{
    encode_checkpoint, load_checkpoint, save_checkpoint, train, EpochRecord, LossBreakdown, Net, Scan, TrainError,
    TrainOutcome, WeightEncoding,
};
use crate::volume_io::write_atomic;

use super::dataset::{load_split, read_manifest, write_dataset, Manifest, Split, MANIFEST_FILE};
use super::{ExperimentConfig, ExperimentError, Mode};

pub const CHECKPOINT_FILE: &str = "checkpoint.tqck";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const SUMMARY_FILE: &str = "train_summary.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TABLE: &str = "metrics.txt";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TABLE: &str = "ablation.txt";
pub const BENCH_JSON: &str = "bench.json";
pub const DIVERGED_FILE: &str = "diverged.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn dir_is_nonempty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Generate the phantom dataset into `out`. The dataset is built in a
/// sibling staging directory and moved into place only when complete.
pub fn gen_phantoms(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<Manifest, ExperimentError> {
    if dir_is_nonempty(out) && !force {
        return Err(ExperimentError::Usage(format!(
            "{} exists and is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    let (train, test) = cfg.dataset.resolve(cfg.seed)?;
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into());
    let staging = out.with_file_name(format!(".{name}.staging{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let result = (|| {
        let manifest = write_dataset(&staging, &train, &test, cfg.to_json())?;
        write_json(&staging.join(MANIFEST_FILE), &manifest)?;
        Ok::<_, ExperimentError>(manifest)
    })();
    let manifest = match result {
        Ok(m) => m,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    if out.exists() {
        fs::remove_dir_all(out)?;
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::rename(&staging, out)?;
    Ok(manifest)
}

/// Training and test scans of a dataset, checked against the config.
pub fn load_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<(Vec<Scan>, Vec<Scan>), ExperimentError> {
    let manifest = read_manifest(dir)?;
    let train = load_split(dir, &manifest, Split::Train)?;
    let test = load_split(dir, &manifest, Split::Test)?;
    for s in train.iter().chain(&test) {
        if s.mask.dims() != cfg.dims() || s.mask.num_classes() != cfg.dataset.tooth_count {
            return Err(ExperimentError::Data(format!(
                "scan {} has dims {:?} and {} classes; the config expects {:?} and {}",
                s.id,
                s.mask.dims(),
                s.mask.num_classes(),
                cfg.dims(),
                cfg.dataset.tooth_count
            )));
        }
    }
    if train.is_empty() {
        return Err(ExperimentError::Data("dataset has no training scans".into()));
    }
    Ok((train, test))
}

/// Everything a training run produced.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub mode: Mode,
    pub net: Net,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: Mode,
    pub config: serde_json::Value,
    pub steps: usize,
    pub initial: LossBreakdown,
    pub last: Option<EpochRecord>,
    pub param_count: usize,
}

fn provenance(cfg: &ExperimentConfig, mode: Mode) -> serde_json::Value {
    serde_json::json!({ "mode": mode, "config": cfg.to_json() })
}

/// Train one mode in memory.
pub fn train_mode(cfg: &ExperimentConfig, mode: Mode, scans: &[Scan]) -> Result<TrainRun, ExperimentError> {
    cfg.validate()?;
    let mut net = Net::new(cfg.net_config(mode))?;
    let outcome = train(&mut net, scans, &mode.apply(&cfg.train))?;
    Ok(TrainRun { mode, net, outcome })
}

/// Write the checkpoint, the JSON-lines log and the summary of a run.
pub fn write_train_outputs(cfg: &ExperimentConfig, run: &TrainRun, out: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(out)?;
    let meta = provenance(cfg, run.mode);
    let mut log = serde_json::to_string(&serde_json::json!({ "header": meta }))?;
    log.push('\n');
    for r in &run.outcome.log {
        log.push_str(&serde_json::to_string(r)?);
        log.push('\n');
    }
    let summary = TrainSummary {
        mode: run.mode,
        config: cfg.to_json(),
        steps: run.outcome.steps,
        initial: run.outcome.initial,
        last: run.outcome.log.last().cloned(),
        param_count: run.net.param_count(),
    };
    save_checkpoint(out.join(CHECKPOINT_FILE), &run.net, WeightEncoding::F64, &meta)?;
    write_atomic(&out.join(LOG_FILE), log.as_bytes())?;
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(())
}

/// Train a mode on a dataset directory and write its outputs. A diverged run
/// leaves a diagnostic dump instead of a checkpoint.
pub fn train_cmd(cfg: &ExperimentConfig, data: &Path, mode: Mode, out: &Path) -> Result<TrainRun, ExperimentError> {
    let (train_scans, _) = load_dataset(cfg, data)?;
    match train_mode(cfg, mode, &train_scans) {
        Ok(run) => {
            write_train_outputs(cfg, &run, out)?;
            Ok(run)
        }
        Err(ExperimentError::Train(TrainError::Diverged { step, losses })) => {
            fs::create_dir_all(out)?;
            write_json(
                &out.join(DIVERGED_FILE),
                &serde_json::json!({
                    "mode": mode,
                    "config": cfg.to_json(),
                    "step": step,
                    "losses": losses,
                }),
            )?;
            Err(TrainError::Diverged { step, losses }.into())
        }
        Err(e) => Err(e),
    }
}

/// Evaluate a network on scans, one scan per task, in scan order.
pub fn evaluate_net(net: &Net, scans: &[Scan]) -> Result<MetricsReport, ExperimentError> {
    let rows = scans
        .par_iter()
        .map(|s| {
            let (_, pred) = net.infer(&s.volume)?;
            Ok(evaluate_scan(&s.id, &pred, &s.mask)?)
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok(MetricsReport::aggregate(rows)?)
}

/// Ground truth scored against itself.
pub fn evaluate_self(scans: &[Scan]) -> Result<MetricsReport, ExperimentError> {
    let rows = scans
        .iter()
        .map(|s| evaluate_scan(&s.id, &s.mask, &s.mask))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricsReport::aggregate(rows)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutput {
    pub checkpoint: Option<PathBuf>,
    pub provenance: serde_json::Value,
    pub report: MetricsReport,
}

fn write_metrics(out: &Path, result: &EvalOutput) -> Result<(), ExperimentError> {
    fs::create_dir_all(out)?;
    let mut table = format!("# provenance: {}\n", serde_json::to_string(&result.provenance)?);
    table.push_str(&result.report.to_table());
    write_json(&out.join(METRICS_JSON), result)?;
    write_atomic(&out.join(METRICS_TABLE), table.as_bytes())?;
    Ok(())
}

/// Evaluate a checkpoint on the test split of a dataset. Without a
/// checkpoint the ground truth is scored against itself.
pub fn eval_cmd(checkpoint: Option<&Path>, data: &Path, out: &Path) -> Result<EvalOutput, ExperimentError> {
    let manifest = read_manifest(data)?;
    let scans = load_split(data, &manifest, Split::Test)?;
    if scans.is_empty() {
        return Err(ExperimentError::Data("dataset has no test scans".into()));
    }
    let result = match checkpoint {
        Some(path) => {
            let (net, meta) = load_checkpoint(path)?;
            let c = &net.config;
            if let Some(s) = scans.iter().find(|s| s.mask.dims() != c.dims || s.mask.num_classes() != c.num_classes) {
                return Err(ExperimentError::Data(format!(
                    "checkpoint expects {:?} with {} classes, scan {} has {:?} with {}",
                    c.dims,
                    c.num_classes,
                    s.id,
                    s.mask.dims(),
                    s.mask.num_classes()
                )));
            }
            EvalOutput {
                checkpoint: Some(path.to_path_buf()),
                provenance: meta,
                report: evaluate_net(&net, &scans)?,
            }
        }
        None => EvalOutput {
            checkpoint: None,
            provenance: manifest.config.clone(),
            report: evaluate_self(&scans)?,
        },
    };
    write_metrics(out, &result)?;
    Ok(result)
}

/// One ablation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub dsc: f64,
    pub iou: f64,
    pub bf1: f64,
    pub tca: f64,
    pub acs: f64,
    pub cer: f64,
    pub steps: usize,
    pub train_config: crate::nn::TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: serde_json::Value,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, mode: Mode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// Percentages with the ablation columns.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12}{:>8}{:>8}{:>8}{:>8}\n", "mode", "DSC", "TCA", "ACS", "CER");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12}{:>8.1}{:>8.1}{:>8.1}{:>8.1}\n",
                r.mode.name(),
                100.0 * r.dsc,
                100.0 * r.tca,
                100.0 * r.acs,
                100.0 * r.cer
            ));
        }
        out
    }

    /// Topology metrics of `qat+topo` against `qat`: TCA and ACS must not
    /// drop, CER must not rise, and at least one must strictly improve.
    pub fn check_direction(&self) -> Result<String, ExperimentError> {
        let (Some(q), Some(t)) = (self.row(Mode::Qat), self.row(Mode::QatTopo)) else {
            return Err(ExperimentError::Usage(
                "the direction check needs the qat and qat+topo modes".into(),
            ));
        };
        let summary = format!(
            "TCA {:.3} -> {:.3}, ACS {:.3} -> {:.3}, CER {:.3} -> {:.3}",
            q.tca, t.tca, q.acs, t.acs, q.cer, t.cer
        );
        let holds = t.tca >= q.tca && t.acs >= q.acs && t.cer <= q.cer;
        let strict = t.tca > q.tca || t.acs > q.acs || t.cer < q.cer;
        if holds && strict {
            Ok(summary)
        } else {
            Err(ExperimentError::Assertion(format!("ablation direction violated: {summary}")))
        }
    }
}

/// Train and evaluate each mode in ablation order, writing per-mode outputs
/// under `out/<mode>` and the combined table under `out`.
pub fn ablate_cmd(
    cfg: &ExperimentConfig,
    data: &Path,
    modes: &[Mode],
    out: &Path,
    assert_direction: bool,
) -> Result<AblationReport, ExperimentError> {
    let (train_scans, test_scans) = load_dataset(cfg, data)?;
    if test_scans.is_empty() {
        return Err(ExperimentError::Data("dataset has no test scans".into()));
    }
    let report = ablate(cfg, modes, &train_scans, &test_scans, Some(out))?;
    write_json(&out.join(ABLATION_JSON), &report)?;
    write_atomic(&out.join(ABLATION_TABLE), report.to_table().as_bytes())?;
    if assert_direction {
        report.check_direction()?;
    }
    Ok(report)
}

/// In-memory ablation; with `out`, each mode's run and metrics are saved.
pub fn ablate(
    cfg: &ExperimentConfig,
    modes: &[Mode],
    train_scans: &[Scan],
    test_scans: &[Scan],
    out: Option<&Path>,
) -> Result<AblationReport, ExperimentError> {
    let mut ordered: Vec<Mode> = Mode::ALL.into_iter().filter(|m| modes.contains(m)).collect();
    if ordered.is_empty() {
        ordered = Mode::ALL.to_vec();
    }
    let mut rows = Vec::new();
    for mode in ordered {
        let wrap = |e: ExperimentError| ExperimentError::ModeFailed {
            mode,
            source: Box::new(e),
        };
        log::info!("ablation: training {mode}");
        let run = train_mode(cfg, mode, train_scans).map_err(wrap)?;
        let report = evaluate_net(&run.net, test_scans).map_err(wrap)?;
        if let Some(dir) = out {
            let sub = dir.join(mode.name());
            write_train_outputs(cfg, &run, &sub).map_err(wrap)?;
            let result = EvalOutput {
                checkpoint: Some(sub.join(CHECKPOINT_FILE)),
                provenance: provenance(cfg, mode),
                report: report.clone(),
            };
            write_metrics(&sub, &result).map_err(wrap)?;
        }
        rows.push(AblationRow {
            mode,
            dsc: report.dsc,
            iou: report.iou,
            bf1: report.bf1,
            tca: report.tca,
            acs: report.acs,
            cer: report.cer,
            steps: run.outcome.steps,
            train_config: mode.apply(&cfg.train),
        });
    }
    Ok(AblationReport {
        config: cfg.to_json(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub runs: usize,
    pub mean_seconds: f64,
    pub sd_seconds: f64,
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Self {
            runs: samples.len(),
            mean_seconds: mean,
            sd_seconds: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub provenance: serde_json::Value,
    pub scan_id: String,
    pub float: TimingStats,
    pub fake_quant: TimingStats,
    pub checkpoint_bytes_f64: usize,
    pub checkpoint_bytes_int8: usize,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12}{:>6}{:>14}{:>14}\n", "mode", "runs", "mean s/vol", "sd s/vol");
        for (name, t) in [("float", &self.float), ("fake-quant", &self.fake_quant)] {
            out.push_str(&format!(
                "{:<12}{:>6}{:>14.4}{:>14.4}\n",
                name, t.runs, t.mean_seconds, t.sd_seconds
            ));
        }
        out.push_str(&format!(
            "checkpoint bytes: f64 {}, int8 {}\n",
            self.checkpoint_bytes_f64, self.checkpoint_bytes_int8
        ));
        out
    }
}

pub const BENCH_RUNS: usize = 10;

/// Time single-volume inference in float and fake-quant modes and compare
/// checkpoint sizes. Timings are informational.
pub fn bench_cmd(checkpoint: &Path, data: &Path, out: &Path, runs: usize) -> Result<BenchReport, ExperimentError> {
    let (net, meta) = load_checkpoint(checkpoint)?;
    let manifest = read_manifest(data)?;
    let scans = load_split(data, &manifest, Split::Test)?;
    let scan = scans
        .first()
        .ok_or_else(|| ExperimentError::Data("dataset has no test scans".into()))?;
    if scan.volume.dims() != net.config.dims {
        return Err(ExperimentError::Data("checkpoint and dataset dims differ".into()));
    }
    let runs = runs.max(1);
    let time = |n: &Net| -> Result<TimingStats, ExperimentError> {
        let mut samples = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t = Instant::now();
            n.infer(&scan.volume)?;
            samples.push(t.elapsed().as_secs_f64());
        }
        Ok(TimingStats::from_samples(&samples))
    };
    let mut float_net = net.clone();
    float_net.config.quantize = false;
    let mut quant_net = net.clone();
    quant_net.config.quantize = true;
    let report = BenchReport {
        provenance: meta,
        scan_id: scan.id.clone(),
        float: time(&float_net)?,
        fake_quant: time(&quant_net)?,
        checkpoint_bytes_f64: encode_checkpoint(&net, WeightEncoding::F64).len(),
        checkpoint_bytes_int8: encode_checkpoint(&net, WeightEncoding::Int8).len(),
    };
    fs::create_dir_all(out)?;
    write_json(&out.join(BENCH_JSON), &report)?;
    Ok(report)
}
