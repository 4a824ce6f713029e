//! The training objective and the quantisation-aware training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{LabelMask, LogitMap, Volume3D};
use crate::metrics::dice;
use crate::preprocess::augment;
use crate::quant::{quant_loss, QuantScheme};
use crate::topo_loss::{topo_loss, TopoLossError, TopoLossReport, TopoLossWeights, TopoTarget};

use super::loss::{cross_entropy_logits, LossBreakdown};
use super::net::{ActScales, Net, NetError, QuantPlan};
use super::optim::{Adam, PlateauScheduler};
use super::tape::Tape;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Topo(#[from] TopoLossError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("non-finite loss at step {step}: {losses:?}")]
    Diverged { step: usize, losses: LossBreakdown },
}

fn d_alpha() -> f64 {
    0.01
}
fn d_beta() -> f64 {
    0.1
}
fn d_lr() -> f64 {
    3e-4
}
fn d_b1() -> f64 {
    0.9
}
fn d_b2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_factor() -> f64 {
    0.3
}
fn d_patience() -> usize {
    10
}
fn d_threshold() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    2
}
fn d_seed() -> u64 {
    42
}
fn d_val() -> usize {
    2
}
fn d_epochs() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_b1")]
    pub adam_beta1: f64,
    #[serde(default = "d_b2")]
    pub adam_beta2: f64,
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
    #[serde(default = "d_factor")]
    pub plateau_factor: f64,
    #[serde(default = "d_patience")]
    pub plateau_patience: usize,
    #[serde(default = "d_threshold")]
    pub plateau_threshold: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Hard cap on optimisation steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default)]
    pub topo: TopoLossWeights,
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
    /// Scans taken from the end of the training list for validation only.
    /// With 0, validation Dice is measured on the first training scan.
    #[serde(default = "d_val")]
    pub val_scans: usize,
    #[serde(default)]
    pub augment: bool,
    /// Start the output biases at the log class frequencies of the training
    /// masks instead of zero.
    #[serde(default)]
    pub init_output_prior: bool,
    /// Optimisation steps before the topological term is switched on.
    #[serde(default)]
    pub topo_warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: d_alpha(),
            beta: d_beta(),
            lr: d_lr(),
            adam_beta1: d_b1(),
            adam_beta2: d_b2(),
            adam_eps: d_eps(),
            plateau_factor: d_factor(),
            plateau_patience: d_patience(),
            plateau_threshold: d_threshold(),
            batch_size: d_batch(),
            epochs: d_epochs(),
            max_steps: None,
            seed: d_seed(),
            topo: TopoLossWeights::default(),
            early_stop_patience: None,
            val_scans: d_val(),
            augment: false,
            init_output_prior: false,
            topo_warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad("plateau_factor must lie in (0, 1]");
        }
        self.topo.validate()?;
        Ok(())
    }
}

/// A training or evaluation scan: normalised intensities and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub id: String,
    pub volume: Volume3D,
    pub mask: LabelMask,
}

/// Loss weights for one evaluation of the objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveWeights<'a> {
    pub alpha: f64,
    pub beta: f64,
    pub topo: &'a TopoLossWeights,
}

/// Value and parameter gradients of the training objective on one scan.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub losses: LossBreakdown,
    pub logits: LogitMap,
    pub topo: Option<TopoLossReport>,
    pub grads: Vec<Vec<f64>>,
    /// Rounded quantisation targets in tap order (weights, then activation, per layer).
    pub quant_targets: Vec<Vec<f64>>,
    pub weight_schemes: Vec<QuantScheme>,
    pub act_schemes: Vec<QuantScheme>,
}

/// `CE + alpha * L_quant + beta * L_topo` for one scan.
///
/// The topological term is evaluated only when `target` is given and
/// `beta > 0`. `frozen_targets` replaces the quantisation targets, which
/// gradient checks use to keep them constant under perturbation.
pub fn evaluate_objective(
    net: &Net,
    x: &Volume3D,
    mask: &LabelMask,
    target: Option<&TopoTarget>,
    weights: ObjectiveWeights<'_>,
    plan: Option<QuantPlan<'_>>,
    frozen_targets: Option<&[Vec<f64>]>,
) -> Result<ObjectiveEval, TrainError> {
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, x, plan)?;
    let channels = net.config.num_classes as usize + 1;
    let logits = LogitMap::new(net.config.dims, channels, tape.value(fwd.logits).to_vec())
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    if logits.dims() != mask.dims() || mask.num_classes() != net.config.num_classes {
        return Err(TrainError::InvalidConfig("mask shape differs from the network output".into()));
    }
    let ce = cross_entropy_logits(&logits, mask);
    let mut seed_logits = ce.grad;

    let mut topo_report = None;
    let mut l_topo = 0.0;
    if let (Some(t), true) = (target, weights.beta > 0.0) {
        let r = topo_loss(&logits, t, weights.topo)?;
        for (g, tg) in seed_logits.iter_mut().zip(&r.grad) {
            *g += weights.beta * tg;
        }
        l_topo = r.l_topo;
        topo_report = Some(r);
    }

    let quant_targets: Vec<Vec<f64>> = match frozen_targets {
        Some(f) => f.to_vec(),
        None => fwd.taps.iter().map(|t| t.target.clone()).collect(),
    };
    let pairs: Vec<(&[f64], &[f64])> = fwd
        .taps
        .iter()
        .zip(&quant_targets)
        .map(|(tap, q)| (tape.value(tap.var), q.as_slice()))
        .collect();
    let (l_quant, quant_grads) = quant_loss(&pairs).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;

    let scaled: Vec<Vec<f64>> = quant_grads
        .into_iter()
        .map(|g| g.into_iter().map(|v| weights.alpha * v).collect())
        .collect();
    let mut seeds: Vec<(super::tape::Var, &[f64])> = vec![(fwd.logits, seed_logits.as_slice())];
    if weights.alpha > 0.0 {
        for (tap, g) in fwd.taps.iter().zip(&scaled) {
            seeds.push((tap.var, g.as_slice()));
        }
    }
    let grads = tape.backward(&seeds);
    let param_grads = fwd
        .params
        .iter()
        .zip(&net.params)
        .map(|(v, p)| grads.wrt(*v, p.len()))
        .collect();
    Ok(ObjectiveEval {
        losses: LossBreakdown::combine(ce.value, l_quant, l_topo, weights.alpha, weights.beta),
        logits,
        topo: topo_report,
        grads: param_grads,
        quant_targets,
        weight_schemes: fwd.weight_schemes,
        act_schemes: fwd.act_schemes,
    })
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub l_ce: f64,
    pub l_quant: f64,
    pub l_topo: f64,
    pub l_total: f64,
    pub l_count: f64,
    pub l_adj: f64,
    pub l_hole: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub steps: usize,
    /// Objective on the first step, before any update.
    pub initial: LossBreakdown,
}

/// Mean foreground Dice of the network's argmax over `scans`.
pub fn mean_val_dice(net: &Net, scans: &[&Scan]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in scans {
        let (_, labels) = net.infer(&s.volume)?;
        total += dice(&labels.foreground(), &s.mask.foreground());
    }
    Ok(total / scans.len().max(1) as f64)
}

/// Fraction of voxels per class over all scans.
pub fn class_frequencies(scans: &[Scan], num_classes: u16) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes as usize + 1];
    let mut total = 0usize;
    for s in scans {
        for &l in s.mask.labels() {
            if let Some(c) = counts.get_mut(l as usize) {
                *c += 1;
            }
        }
        total += s.mask.labels().len();
    }
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

/// Adam on the total objective with batch gradients averaged over up to
/// `batch_size` scans. The topological term uses the first scan of each batch.
pub fn train(net: &mut Net, scans: &[Scan], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if scans.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let held = cfg.val_scans.min(scans.len() - 1);
    let (train_set, val_set) = scans.split_at(scans.len() - held);
    let val: Vec<&Scan> = if val_set.is_empty() {
        vec![&train_set[0]]
    } else {
        val_set.iter().collect()
    };
    let use_topo = cfg.beta > 0.0;
    let quantize = net.config.quantize;
    let static_targets: Vec<Option<TopoTarget>> = train_set
        .iter()
        .map(|s| (use_topo && !cfg.augment).then(|| TopoTarget::new(&s.mask)))
        .collect();

    if cfg.init_output_prior {
        net.set_output_prior(&class_frequencies(train_set, net.config.num_classes));
    }
    let shapes: Vec<usize> = net.params.iter().map(Vec::len).collect();
    let mut opt = Adam::new(&shapes, cfg.lr);
    opt.beta1 = cfg.adam_beta1;
    opt.beta2 = cfg.adam_beta2;
    opt.eps = cfg.adam_eps;
    let mut sched = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let weights = ObjectiveWeights {
        alpha: if quantize { cfg.alpha } else { 0.0 },
        beta: cfg.beta,
        topo: &cfg.topo,
    };

    let mut log = Vec::new();
    let mut steps = 0usize;
    let mut initial = None;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..cfg.epochs {
        if steps >= max_steps {
            break;
        }
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 7];
        let mut n_vol = 0usize;
        let mut n_topo = 0usize;
        let mut epoch_steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if steps >= max_steps {
                break;
            }
            let mut acc: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
            for (bi, &idx) in batch.iter().enumerate() {
                let scan = &train_set[idx];
                let aug_seed: u64 = rng.gen();
                let (x, m) = if cfg.augment {
                    let (x, m, _) = augment(&scan.volume, &scan.mask, aug_seed).expect("scan dims agree");
                    (x, m)
                } else {
                    (scan.volume.clone(), scan.mask.clone())
                };
                let dynamic;
                let topo_now = use_topo && steps >= cfg.topo_warmup_steps;
                let target = if topo_now && bi == 0 {
                    match &static_targets[idx] {
                        Some(t) => Some(t),
                        None => {
                            dynamic = TopoTarget::new(&m);
                            Some(&dynamic)
                        }
                    }
                } else {
                    None
                };
                // Calibrators are updated during the forward pass; move them
                // out so the network itself can stay borrowed immutably.
                let mut cals = std::mem::take(&mut net.calibrators);
                let plan = quantize.then(|| QuantPlan {
                    weights: None,
                    acts: ActScales::Update(&mut cals),
                    round: true,
                });
                let eval = evaluate_objective(net, &x, &m, target, weights, plan, None);
                net.calibrators = cals;
                let eval = eval?;
                if !eval.losses.total.is_finite() {
                    return Err(TrainError::Diverged {
                        step: steps,
                        losses: eval.losses,
                    });
                }
                initial.get_or_insert(eval.losses);
                for (a, g) in acc.iter_mut().zip(&eval.grads) {
                    for (ai, gi) in a.iter_mut().zip(g) {
                        *ai += gi / batch.len() as f64;
                    }
                }
                sums[0] += eval.losses.ce;
                sums[1] += eval.losses.quant;
                sums[3] += eval.losses.ce + weights.alpha * eval.losses.quant;
                n_vol += 1;
                if let Some(r) = &eval.topo {
                    sums[2] += r.l_topo;
                    sums[4] += r.l_count;
                    sums[5] += r.l_adj;
                    sums[6] += r.l_hole;
                    n_topo += 1;
                }
            }
            opt.step(&mut net.params, &acc);
            steps += 1;
            epoch_steps += 1;
        }
        if epoch_steps == 0 {
            break 'epochs;
        }
        let val_dice = mean_val_dice(net, &val)?;
        let tm = |s: f64| if n_topo > 0 { s / n_topo as f64 } else { 0.0 };
        let l_topo = tm(sums[2]);
        let record = EpochRecord {
            epoch,
            steps,
            lr: opt.lr,
            l_ce: sums[0] / n_vol as f64,
            l_quant: sums[1] / n_vol as f64,
            l_topo,
            l_total: sums[3] / n_vol as f64 + cfg.beta * l_topo,
            l_count: tm(sums[4]),
            l_adj: tm(sums[5]),
            l_hole: tm(sums[6]),
            val_dice,
        };
        log::info!(
            "epoch {epoch}: steps {steps}, ce {:.4}, quant {:.4}, topo {:.4}, val dice {:.4}",
            record.l_ce,
            record.l_quant,
            record.l_topo,
            record.val_dice
        );
        log.push(record);
        if let Some(lr) = sched.observe(val_dice, &mut opt.lr) {
            log::info!("validation plateau: learning rate reduced to {lr:e}");
        }
        if let Some(p) = cfg.early_stop_patience {
            if sched.epochs_without_improvement() >= p {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        log,
        steps,
        initial: initial.unwrap_or_default(),
    })
}
