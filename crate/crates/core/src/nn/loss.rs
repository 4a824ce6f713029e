//! Cross-entropy and the combined training objective.

use serde::{Deserialize, Serialize};

use crate::grid::{LabelMask, LogitMap, ProbMap};
use crate::topo_loss::LossGrad;

/// Probability floor inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean over voxels of `-ln max(S[label(v)](v), 1e-12)`.
pub fn cross_entropy(probs: &ProbMap, mask: &LabelMask) -> f64 {
    let n = mask.dims().len();
    let p = probs.data();
    mask.labels()
        .iter()
        .enumerate()
        .map(|(v, &l)| -p[l as usize * n + v].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / n as f64
}

/// Cross-entropy of `softmax(logits)` with its gradient over the logits,
/// `(p - onehot) / N` (zero for voxels whose floored probability is active).
pub fn cross_entropy_logits(logits: &LogitMap, mask: &LabelMask) -> LossGrad {
    let probs = logits.softmax();
    let n = mask.dims().len();
    let ch = logits.channels();
    let p = probs.data();
    let mut grad = vec![0.0; p.len()];
    let inv = 1.0 / n as f64;
    for (v, &l) in mask.labels().iter().enumerate() {
        if p[l as usize * n + v] < PROB_FLOOR {
            continue;
        }
        for c in 0..ch {
            grad[c * n + v] = p[c * n + v] * inv;
        }
        grad[l as usize * n + v] -= inv;
    }
    LossGrad {
        value: cross_entropy(&probs, mask),
        grad,
    }
}

/// Components of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub quant: f64,
    pub topo: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `ce + alpha * quant + beta * topo`.
    pub fn combine(ce: f64, quant: f64, topo: f64, alpha: f64, beta: f64) -> Self {
        Self {
            ce,
            quant,
            topo,
            total: ce + alpha * quant + beta * topo,
        }
    }
}
