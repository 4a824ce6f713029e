//! Relaxed first Betti number and the hole (cavity) term.

use super::count::check_unit;
use super::{sigmoid, LossGrad, TopoLossError};
use crate::grid::{Dims, Volume3D};
use crate::topology::persistence_unchecked;

/// Soft count of tunnels alive at filtration value 0.5.
///
/// Each finite dimension-1 pair contributes
/// `sigmoid((0.5 - birth) / tau) * sigmoid((death - 0.5) / tau)`. Since
/// `birth = 1 - p(birth_voxel)` and `death = 1 - p(death_voxel)`, the gradient
/// lands on those two voxels only.
pub fn soft_betti1(p: &Volume3D, tau_h: f64) -> Result<LossGrad, TopoLossError> {
    check_unit(p.data())?;
    if !(tau_h > 0.0) {
        return Err(TopoLossError::NonPositiveSharpness("tau_h", tau_h));
    }
    Ok(soft_betti1_slice(p.dims(), p.data(), tau_h))
}

pub(crate) fn soft_betti1_slice(dims: Dims, p: &[f64], tau_h: f64) -> LossGrad {
    let diagram = persistence_unchecked(dims, p);
    let mut grad = vec![0.0; p.len()];
    let mut value = 0.0;
    for pair in diagram.in_dim(1) {
        let Some(dv) = pair.death_voxel else { continue };
        let a = sigmoid((0.5 - pair.birth) / tau_h);
        let b = sigmoid((pair.death - 0.5) / tau_h);
        value += a * b;
        grad[pair.birth_voxel] += a * (1.0 - a) / tau_h * b;
        grad[dv] -= a * b * (1.0 - b) / tau_h;
    }
    LossGrad { value, grad }
}

/// Critical voxels of every finite dimension-1 pair, for change detection.
pub(crate) fn hole_signature(dims: Dims, p: &[f64]) -> Vec<(usize, usize)> {
    persistence_unchecked(dims, p)
        .in_dim(1)
        .filter_map(|q| q.death_voxel.map(|d| (q.birth_voxel, d)))
        .collect()
}
