//! Differentiable topological constraints on a predicted segmentation.
//!
//! Three terms are combined: a component-count term on the soft foreground, a
//! boundary alignment term between ground-truth neighbours, and a tunnel term
//! per tooth built on persistent homology. Count and hole terms act on the
//! softmax probabilities; the adjacency term acts on the raw logits. All
//! gradients are returned with respect to the logits.

mod adjacency;
mod count;
mod holes;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{softmax_vjp, LabelMask, LogitMap, ProbMap};
use crate::phantom::crop_to_support;
use crate::topology::{betti_numbers, label_where, Connectivity};

pub use adjacency::{adjacency_loss, boundary_neighbourhood, extract_adjacency, soft_boundary, AdjacencySet};
pub use count::{count_thresholds, relaxed_cc_count, soft_cc_count, soft_threshold, COUNT_THRESHOLDS};
pub use holes::soft_betti1;

pub(crate) use adjacency::{adjacency_loss_faces, adjacency_signs, BoundaryFaces};
pub(crate) use count::{ladder_peaks, soft_cc_count_slice};
pub(crate) use holes::{hole_signature, soft_betti1_slice};

#[derive(Debug, Error, PartialEq)]
pub enum TopoLossError {
    #[error("{0} must be positive, got {1}")]
    NonPositiveSharpness(&'static str, f64),
    #[error("probability {1} at index {0} is outside [0, 1]")]
    OutOfRange(usize, f64),
    #[error("mask has no foreground instances")]
    EmptyForeground,
    #[error("prediction and ground truth shapes differ")]
    ShapeMismatch,
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

/// A scalar loss together with its gradient over some flat grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopoLossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau_t: f64,
    pub tau_h: f64,
    pub kappa: f64,
}

impl Default for TopoLossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.3,
            lambda3: 0.05,
            tau_t: 0.1,
            tau_h: 0.1,
            kappa: 1.0,
        }
    }
}

impl TopoLossWeights {
    pub fn validate(&self) -> Result<(), TopoLossError> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.tau_t, self.tau_h, self.kappa];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(TopoLossError::InvalidWeights("all weights must be finite".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(TopoLossError::InvalidWeights("lambdas must be non-negative".into()));
        }
        for (name, v) in [("tau_t", self.tau_t), ("tau_h", self.tau_h), ("kappa", self.kappa)] {
            if v <= 0.0 {
                return Err(TopoLossError::NonPositiveSharpness(name, v));
            }
        }
        Ok(())
    }

    /// `lambda1 * count + lambda2 * adj + lambda3 * hole`.
    pub fn combine(&self, l_count: f64, l_adj: f64, l_hole: f64) -> f64 {
        self.lambda1 * l_count + self.lambda2 * l_adj + self.lambda3 * l_hole
    }
}

/// Everything the losses need from a ground-truth mask, computed once.
#[derive(Debug, Clone)]
pub struct TopoTarget {
    pub(crate) mask: LabelMask,
    pub(crate) count: usize,
    pub(crate) adjacency: AdjacencySet,
    pub(crate) faces: BoundaryFaces,
    pub(crate) tooth_b1: Vec<usize>,
}

impl TopoTarget {
    pub fn new(mask: &LabelMask) -> Self {
        let dims = mask.dims();
        let count = label_where(dims, mask.foreground().bits(), Connectivity::Full26).count;
        let adjacency = extract_adjacency(mask).unwrap_or_default();
        let tooth_b1 = (1..=mask.num_classes())
            .map(|k| {
                let class = mask.class_mask(k);
                if class.is_empty() {
                    0
                } else {
                    betti_numbers(&crop_to_support(&class, 1)).b1
                }
            })
            .collect();
        Self {
            mask: mask.clone(),
            count,
            adjacency,
            faces: BoundaryFaces::new(mask),
            tooth_b1,
        }
    }

    pub fn mask(&self) -> &LabelMask {
        &self.mask
    }

    /// 26-connected component count of the ground-truth foreground.
    pub fn component_count(&self) -> usize {
        self.count
    }

    pub fn adjacency(&self) -> &AdjacencySet {
        &self.adjacency
    }

    /// Exact first Betti number of each tooth, indexed by `label - 1`.
    pub fn tooth_b1(&self) -> &[usize] {
        &self.tooth_b1
    }

    fn check(&self, dims: crate::grid::Dims, channels: usize) -> Result<(), TopoLossError> {
        if dims != self.mask.dims() || channels != self.mask.num_classes() as usize + 1 {
            return Err(TopoLossError::ShapeMismatch);
        }
        Ok(())
    }
}

/// `|soft count of the foreground - ground-truth count|`, gradient over all
/// probability channels (only the background channel is non-zero).
pub fn count_loss(probs: &ProbMap, target: &TopoTarget, tau_t: f64) -> Result<LossGrad, TopoLossError> {
    target.check(probs.dims(), probs.channels())?;
    if !(tau_t > 0.0) {
        return Err(TopoLossError::NonPositiveSharpness("tau_t", tau_t));
    }
    let fg = probs.foreground();
    let soft = soft_cc_count_slice(fg.dims(), fg.data(), tau_t);
    let diff = soft.value - target.count as f64;
    let s = sign0(diff);
    let mut grad = vec![0.0; probs.data().len()];
    // Foreground is 1 - p_0.
    for (g, sg) in grad.iter_mut().zip(&soft.grad) {
        *g = -s * sg;
    }
    Ok(LossGrad {
        value: diff.abs(),
        grad,
    })
}

/// `sum_k |soft_betti1(S_k) - b1(M_k)|` over tooth channels.
pub fn hole_loss(probs: &ProbMap, target: &TopoTarget, tau_h: f64) -> Result<LossGrad, TopoLossError> {
    target.check(probs.dims(), probs.channels())?;
    if !(tau_h > 0.0) {
        return Err(TopoLossError::NonPositiveSharpness("tau_h", tau_h));
    }
    let n = probs.dims().len();
    let dims = probs.dims();
    let per_tooth: Vec<LossGrad> = (1..probs.channels())
        .into_par_iter()
        .map(|k| soft_betti1_slice(dims, probs.channel(k), tau_h))
        .collect();
    let mut grad = vec![0.0; probs.data().len()];
    let mut value = 0.0;
    for (idx, term) in per_tooth.iter().enumerate() {
        let k = idx + 1;
        let diff = term.value - target.tooth_b1[idx] as f64;
        value += diff.abs();
        let s = sign0(diff);
        if s != 0.0 {
            for (g, tg) in grad[k * n..(k + 1) * n].iter_mut().zip(&term.grad) {
                *g = s * tg;
            }
        }
    }
    Ok(LossGrad { value, grad })
}

/// Result of [`topo_loss`]: the three terms, their weighted sum, and the
/// gradient of the sum with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TopoLossReport {
    pub l_count: f64,
    pub l_adj: f64,
    pub l_hole: f64,
    pub l_topo: f64,
    pub weights: TopoLossWeights,
    pub grad: Vec<f64>,
}

#[derive(Serialize)]
struct ReportJson {
    l_count: f64,
    l_adj: f64,
    l_hole: f64,
    l_topo: f64,
    weights: [f64; 3],
    tau_t: f64,
    tau_h: f64,
    kappa: f64,
}

impl TopoLossReport {
    pub fn to_json(&self) -> serde_json::Value {
        let w = &self.weights;
        serde_json::to_value(ReportJson {
            l_count: self.l_count,
            l_adj: self.l_adj,
            l_hole: self.l_hole,
            l_topo: self.l_topo,
            weights: [w.lambda1, w.lambda2, w.lambda3],
            tau_t: w.tau_t,
            tau_h: w.tau_h,
            kappa: w.kappa,
        })
        .expect("plain numbers serialise")
    }
}

/// Combined topological loss. Terms whose weight is exactly zero are skipped
/// and reported as 0.
pub fn topo_loss(
    logits: &LogitMap,
    target: &TopoTarget,
    weights: &TopoLossWeights,
) -> Result<TopoLossReport, TopoLossError> {
    weights.validate()?;
    target.check(logits.dims(), logits.channels())?;
    let probs = logits.softmax();
    let len = logits.data().len();
    let mut grad_probs = vec![0.0; len];
    let mut grad = vec![0.0; len];

    let mut l_count = 0.0;
    if weights.lambda1 > 0.0 {
        let r = count_loss(&probs, target, weights.tau_t)?;
        l_count = r.value;
        axpy(&mut grad_probs, weights.lambda1, &r.grad);
    }
    let mut l_adj = 0.0;
    if weights.lambda2 > 0.0 {
        let r = adjacency_loss_faces(logits, &target.mask, &target.adjacency, &target.faces, weights.kappa);
        l_adj = r.value;
        axpy(&mut grad, weights.lambda2, &r.grad);
    }
    let mut l_hole = 0.0;
    if weights.lambda3 > 0.0 {
        let r = hole_loss(&probs, target, weights.tau_h)?;
        l_hole = r.value;
        axpy(&mut grad_probs, weights.lambda3, &r.grad);
    }
    if weights.lambda1 > 0.0 || weights.lambda3 > 0.0 {
        let back = softmax_vjp(&probs, &grad_probs);
        for (g, b) in grad.iter_mut().zip(back) {
            *g += b;
        }
    }
    Ok(TopoLossReport {
        l_count,
        l_adj,
        l_hole,
        l_topo: weights.combine(l_count, l_adj, l_hole),
        weights: *weights,
        grad,
    })
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
