//! Segmentation and topology metrics over predicted / ground-truth label masks.
//!
//! Predicted instances are the 26-connected components of the predicted
//! foreground. They are matched one-to-one to ground-truth teeth by greedy
//! maximal overlap (ties to the smaller ground-truth label, then the earlier
//! instance); unmatched instances get fresh labels above `K`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::squared_distance_transform;
use crate::grid::{BinaryMask, LabelMask, FACE_OFFSETS};
use crate::phantom::crop_to_support;
use crate::topo_loss::{extract_adjacency, AdjacencySet};
use crate::topology::{betti_numbers, label_where, Connectivity};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no scans to evaluate")]
    EmptyScanList,
    #[error("ground truth has no tooth classes")]
    NoClasses,
    #[error("prediction and ground truth dims differ")]
    DimsMismatch,
}

/// Boundary tolerance in voxels.
pub const DEFAULT_BOUNDARY_TOLERANCE: f64 = 1.0;

fn overlap(x: &BinaryMask, y: &BinaryMask) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut nx = 0;
    let mut ny = 0;
    for (&a, &b) in x.bits().iter().zip(y.bits()) {
        inter += (a && b) as usize;
        nx += a as usize;
        ny += b as usize;
    }
    (inter, nx, ny)
}

/// `2 |X & Y| / (|X| + |Y|)`; 1 when both are empty.
pub fn dice(x: &BinaryMask, y: &BinaryMask) -> f64 {
    let (i, a, b) = overlap(x, y);
    if a + b == 0 {
        1.0
    } else {
        2.0 * i as f64 / (a + b) as f64
    }
}

/// `|X & Y| / |X | Y|`; 1 when both are empty.
pub fn iou(x: &BinaryMask, y: &BinaryMask) -> f64 {
    let (i, a, b) = overlap(x, y);
    if a + b == 0 {
        1.0
    } else {
        i as f64 / (a + b - i) as f64
    }
}

/// Foreground voxels with a face neighbour of another label; off-grid
/// neighbours count as background.
pub fn boundary_voxels(mask: &LabelMask) -> BinaryMask {
    let dims = mask.dims();
    let l = mask.labels();
    let bits = (0..dims.len())
        .map(|v| {
            l[v] != 0
                && FACE_OFFSETS
                    .iter()
                    .any(|&(dz, dy, dx)| dims.offset(v, dz, dy, dx).map_or(true, |u| l[u] != l[v]))
        })
        .collect();
    BinaryMask::new(dims, bits).expect("valid dims")
}

/// Fraction of `from` voxels within Euclidean distance `tol` of a `to` voxel.
fn within(from: &BinaryMask, to: &BinaryMask, tol: f64) -> f64 {
    let d2 = squared_distance_transform(to);
    let limit = tol * tol;
    let total = from.count();
    let hits = from
        .bits()
        .iter()
        .zip(&d2)
        .filter(|(&b, &d)| b && (d as f64) <= limit)
        .count();
    hits as f64 / total as f64
}

/// Harmonic mean of boundary precision and recall at tolerance `tol` voxels.
pub fn boundary_f1(pred: &LabelMask, gt: &LabelMask, tol: f64) -> f64 {
    let bp = boundary_voxels(pred);
    let bg = boundary_voxels(gt);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    f1(within(&bp, &bg, tol), within(&bg, &bp, tol))
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Relabel the predicted foreground as instances matched to ground truth.
pub fn match_instances(pred: &LabelMask, gt: &LabelMask) -> LabelMask {
    let dims = pred.dims();
    let cc = label_where(dims, pred.foreground().bits(), Connectivity::Full26);
    let k = gt.num_classes() as usize;
    let mut counts = vec![0usize; (cc.count + 1) * (k + 1)];
    for (v, &c) in cc.labels.iter().enumerate() {
        if c != 0 {
            counts[c as usize * (k + 1) + gt.labels()[v] as usize] += 1;
        }
    }
    let mut candidates: Vec<(usize, u16, u32)> = Vec::new();
    for c in 1..=cc.count {
        for t in 1..=k {
            let o = counts[c * (k + 1) + t];
            if o > 0 {
                candidates.push((o, t as u16, c as u32));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut inst_label = vec![0u16; cc.count + 1];
    let mut taken = vec![false; k + 1];
    for (_, t, c) in candidates {
        if inst_label[c as usize] == 0 && !taken[t as usize] {
            inst_label[c as usize] = t;
            taken[t as usize] = true;
        }
    }
    let mut next = k as u16;
    for c in 1..=cc.count {
        if inst_label[c] == 0 {
            next += 1;
            inst_label[c] = next;
        }
    }
    let labels = cc.labels.iter().map(|&c| inst_label[c as usize]).collect();
    LabelMask::new(dims, labels, next.max(k as u16)).expect("labels within the extended range")
}

fn adjacency_or_empty(mask: &LabelMask) -> AdjacencySet {
    extract_adjacency(mask).unwrap_or_default()
}

/// `1 - |A_S xor A_M| / |A_M|`; with empty `A_M`, 1 if `A_S` is empty too, else 0.
pub fn adjacency_consistency_sets(pred: &AdjacencySet, gt: &AdjacencySet) -> f64 {
    if gt.is_empty() {
        return if pred.is_empty() { 1.0 } else { 0.0 };
    }
    1.0 - pred.symmetric_difference_len(gt) as f64 / gt.len() as f64
}

/// Adjacency consistency of a prediction after instance matching.
pub fn adjacency_consistency(pred: &LabelMask, gt: &LabelMask) -> f64 {
    let matched = match_instances(pred, gt);
    adjacency_consistency_sets(&adjacency_or_empty(&matched), &adjacency_or_empty(gt))
}

fn tooth_b1(mask: &LabelMask, k: u16) -> usize {
    let class = mask.class_mask(k);
    if class.is_empty() {
        0
    } else {
        betti_numbers(&crop_to_support(&class, 1)).b1
    }
}

/// Fraction of ground-truth teeth whose matched prediction has a different
/// first Betti number.
pub fn cavity_error_rate(pred: &LabelMask, gt: &LabelMask) -> Result<f64, MetricsError> {
    let k = gt.num_classes();
    if k == 0 {
        return Err(MetricsError::NoClasses);
    }
    let matched = match_instances(pred, gt);
    let wrong = (1..=k).filter(|&t| tooth_b1(&matched, t) != tooth_b1(gt, t)).count();
    Ok(wrong as f64 / k as f64)
}

/// Whether the predicted instance count equals the ground-truth tooth count.
pub fn count_matches(pred: &LabelMask, gt: &LabelMask) -> bool {
    let instances = label_where(pred.dims(), pred.foreground().bits(), Connectivity::Full26).count;
    instances == gt.present_labels().len()
}

/// Fraction of scans with the correct number of predicted instances.
pub fn tooth_count_accuracy(pairs: &[(&LabelMask, &LabelMask)]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyScanList);
    }
    let ok = pairs.iter().filter(|(p, g)| count_matches(p, g)).count();
    Ok(ok as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToothMetrics {
    pub label: u16,
    pub dice: f64,
    pub b1_pred: usize,
    pub b1_true: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanMetrics {
    pub scan_id: String,
    pub dsc: f64,
    pub iou: f64,
    pub bf1: f64,
    pub count_correct: bool,
    pub acs: f64,
    pub cer: f64,
    pub teeth: Vec<ToothMetrics>,
}

/// All metrics for one scan.
pub fn evaluate_scan(scan_id: &str, pred: &LabelMask, gt: &LabelMask) -> Result<ScanMetrics, MetricsError> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::DimsMismatch);
    }
    if gt.num_classes() == 0 {
        return Err(MetricsError::NoClasses);
    }
    let matched = match_instances(pred, gt);
    let (pf, gf) = (pred.foreground(), gt.foreground());
    let teeth: Vec<ToothMetrics> = (1..=gt.num_classes())
        .map(|k| ToothMetrics {
            label: k,
            dice: dice(&matched.class_mask(k), &gt.class_mask(k)),
            b1_pred: tooth_b1(&matched, k),
            b1_true: tooth_b1(gt, k),
        })
        .collect();
    let cer = teeth.iter().filter(|t| t.b1_pred != t.b1_true).count() as f64 / teeth.len() as f64;
    Ok(ScanMetrics {
        scan_id: scan_id.to_string(),
        dsc: dice(&pf, &gf),
        iou: iou(&pf, &gf),
        bf1: boundary_f1(&matched, gt, DEFAULT_BOUNDARY_TOLERANCE),
        count_correct: count_matches(pred, gt),
        acs: adjacency_consistency_sets(&adjacency_or_empty(&matched), &adjacency_or_empty(gt)),
        cer,
        teeth,
    })
}

/// Scan-set summary: means of the per-scan values; `tca` is the fraction of
/// scans with the correct count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: f64,
    pub iou: f64,
    pub bf1: f64,
    pub tca: f64,
    pub acs: f64,
    pub cer: f64,
    pub scans: Vec<ScanMetrics>,
}

impl MetricsReport {
    pub fn aggregate(scans: Vec<ScanMetrics>) -> Result<Self, MetricsError> {
        if scans.is_empty() {
            return Err(MetricsError::EmptyScanList);
        }
        let n = scans.len() as f64;
        let mean = |f: &dyn Fn(&ScanMetrics) -> f64| scans.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            dsc: mean(&|s| s.dsc),
            iou: mean(&|s| s.iou),
            bf1: mean(&|s| s.bf1),
            tca: mean(&|s| s.count_correct as u8 as f64),
            acs: mean(&|s| s.acs),
            cer: mean(&|s| s.cer),
            scans,
        })
    }

    pub const COLUMNS: [&'static str; 6] = ["DSC", "IoU", "BF1", "TCA", "ACS", "CER"];

    /// Values in column order.
    pub fn row(&self) -> [f64; 6] {
        [self.dsc, self.iou, self.bf1, self.tca, self.acs, self.cer]
    }

    /// Aligned plain-text table (percentages), one row per scan plus the mean.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16}", "scan");
        for c in Self::COLUMNS {
            out.push_str(&format!("{c:>8}"));
        }
        out.push('\n');
        let line = |name: &str, v: [f64; 6]| {
            let mut s = format!("{name:<16}");
            for x in v {
                s.push_str(&format!("{:>8.1}", 100.0 * x));
            }
            s.push('\n');
            s
        };
        for s in &self.scans {
            out.push_str(&line(
                &s.scan_id,
                [s.dsc, s.iou, s.bf1, s.count_correct as u8 as f64, s.acs, s.cer],
            ));
        }
        out.push_str(&line("mean", self.row()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;

    #[test]
    fn dice_and_iou_cases() {
        let d = Dims::new(1, 1, 6);
        let x = BinaryMask::new(d, vec![true, true, true, true, false, false]).unwrap();
        let y = BinaryMask::new(d, vec![false, false, true, true, true, true]).unwrap();
        assert_eq!(dice(&x, &y), 0.5);
        assert!((iou(&x, &y) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&x, &x), 1.0);
        let e = BinaryMask::empty(d);
        assert_eq!(dice(&e, &e), 1.0);
        assert_eq!(iou(&e, &e), 1.0);
    }

    #[test]
    fn harmonic_mean() {
        assert!((f1(1.0, 0.5) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }
}
