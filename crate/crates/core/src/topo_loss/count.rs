//! Soft connected-component counting over a fixed threshold ladder.

use super::{sigmoid, LossGrad, TopoLossError};
use crate::grid::{Dims, Volume3D};
use crate::topology::components_with_peaks;

/// Number of thresholds in the counting ladder.
pub const COUNT_THRESHOLDS: usize = 10;

/// `t_i = 0.1 + i * 0.8 / 9` for `i = 0..10`.
pub fn count_thresholds() -> [f64; COUNT_THRESHOLDS] {
    let mut t = [0.0; COUNT_THRESHOLDS];
    for (i, ti) in t.iter_mut().enumerate() {
        *ti = 0.1 + i as f64 * 0.8 / 9.0;
    }
    t
}

/// Elementwise `sigmoid((p - t) / tau)`.
pub fn soft_threshold(p: &[f64], t: f64, tau: f64) -> Result<Vec<f64>, TopoLossError> {
    if !(tau > 0.0) {
        return Err(TopoLossError::NonPositiveSharpness("tau_t", tau));
    }
    Ok(p.iter().map(|&v| sigmoid((v - t) / tau)).collect())
}

/// Component peaks at every rung of the ladder, in ascending threshold order.
pub(crate) fn ladder_peaks(dims: Dims, p: &[f64]) -> Vec<Vec<usize>> {
    count_thresholds()
        .iter()
        .map(|&t| components_with_peaks(dims, p, t))
        .collect()
}

/// Soft component count of a soft mask.
///
/// The value is the mean of the exact 26-connected counts of `p >= t_i`. The
/// gradient is that of the relaxed count [`relaxed_cc_count`], which sends
/// `sigmoid'((p - t_i) / tau) / (10 tau)` to each component's peak voxel.
pub fn soft_cc_count(p: &Volume3D, tau_t: f64) -> Result<LossGrad, TopoLossError> {
    check_unit(p.data())?;
    if !(tau_t > 0.0) {
        return Err(TopoLossError::NonPositiveSharpness("tau_t", tau_t));
    }
    Ok(soft_cc_count_slice(p.dims(), p.data(), tau_t))
}

pub(crate) fn soft_cc_count_slice(dims: Dims, p: &[f64], tau_t: f64) -> LossGrad {
    let mut grad = vec![0.0; p.len()];
    let mut total = 0usize;
    let norm = 1.0 / COUNT_THRESHOLDS as f64;
    for (peaks, t) in ladder_peaks(dims, p).iter().zip(count_thresholds()) {
        total += peaks.len();
        for &v in peaks {
            let s = sigmoid((p[v] - t) / tau_t);
            grad[v] += s * (1.0 - s) / tau_t * norm;
        }
    }
    LossGrad {
        value: total as f64 * norm,
        grad,
    }
}

/// The smooth surrogate whose gradient [`soft_cc_count`] reports:
/// `sum_i sum_C sigmoid((p(peak_C) - t_i) / tau) / 10`, with components taken
/// from the hard thresholded masks.
pub fn relaxed_cc_count(dims: Dims, p: &[f64], tau_t: f64) -> f64 {
    let norm = 1.0 / COUNT_THRESHOLDS as f64;
    ladder_peaks(dims, p)
        .iter()
        .zip(count_thresholds())
        .map(|(peaks, t)| peaks.iter().map(|&v| sigmoid((p[v] - t) / tau_t)).sum::<f64>())
        .sum::<f64>()
        * norm
}

pub(crate) fn check_unit(p: &[f64]) -> Result<(), TopoLossError> {
    match p.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(TopoLossError::OutOfRange(i, p[i])),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_endpoints() {
        let t = count_thresholds();
        assert_eq!(t[0], 0.1);
        assert!((t[9] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn threshold_midpoint_and_sharpness() {
        assert_eq!(soft_threshold(&[0.3], 0.3, 0.1).unwrap(), vec![0.5]);
        let v = soft_threshold(&[0.7], 0.3, 0.1).unwrap()[0];
        assert!((v - 0.982_013_790_037_908).abs() < 1e-12);
        assert!(soft_threshold(&[0.5], 0.3, 0.0).is_err());
        let hard = soft_threshold(&[0.31, 0.29], 0.3, 1e-6).unwrap();
        assert!(hard[0] > 0.999 && hard[1] < 0.001);
    }

    #[test]
    fn empty_map_counts_zero() {
        let r = soft_cc_count(&Volume3D::zeros(Dims::cube(4)), 0.1).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad.iter().all(|&g| g == 0.0));
    }
}
