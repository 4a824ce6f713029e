//! Instance adjacency from Voronoi partitioning, and the boundary alignment term.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{sigmoid, LossGrad, TopoLossError};
use crate::distance::voronoi_labels;
use crate::grid::{BinaryMask, LabelMask, LogitMap, FACE_OFFSETS, FORWARD_FACE_OFFSETS};

/// Unordered tooth pairs `(i, j)` with `i < j`, kept sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacencySet(BTreeSet<(u16, u16)>);

impl AdjacencySet {
    pub fn new() -> Self {
        Self::default()
    }

    /// `{(i, i + 1) : 1 <= i < k}`.
    pub fn chain(k: u16) -> Self {
        Self((1..k).map(|i| (i, i + 1)).collect())
    }

    /// Inserts the unordered pair; self-pairs are ignored.
    pub fn insert(&mut self, a: u16, b: u16) -> bool {
        if a == b {
            return false;
        }
        self.0.insert((a.min(b), a.max(b)))
    }

    pub fn contains(&self, a: u16, b: u16) -> bool {
        self.0.contains(&(a.min(b), a.max(b)))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn pairs(&self) -> Vec<(u16, u16)> {
        self.0.iter().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(u16, u16)> {
        self.0.iter()
    }

    pub fn symmetric_difference_len(&self, other: &Self) -> usize {
        self.0.symmetric_difference(&other.0).count()
    }

    /// Relabel through `map[label]`.
    pub fn relabel(&self, map: &[u16]) -> Self {
        let mut out = Self::new();
        for &(a, b) in &self.0 {
            out.insert(map[a as usize], map[b as usize]);
        }
        out
    }
}

impl FromIterator<(u16, u16)> for AdjacencySet {
    fn from_iter<I: IntoIterator<Item = (u16, u16)>>(iter: I) -> Self {
        let mut s = Self::new();
        for (a, b) in iter {
            s.insert(a, b);
        }
        s
    }
}

/// Pairs of instances whose Voronoi cells share a face.
pub fn extract_adjacency(mask: &LabelMask) -> Result<AdjacencySet, TopoLossError> {
    let cells = voronoi_labels(mask).ok_or(TopoLossError::EmptyForeground)?;
    let dims = mask.dims();
    let mut out = AdjacencySet::new();
    for v in 0..dims.len() {
        for &(dz, dy, dx) in &FORWARD_FACE_OFFSETS {
            if let Some(u) = dims.offset(v, dz, dy, dx) {
                out.insert(cells[v], cells[u]);
            }
        }
    }
    Ok(out)
}

/// Voxels with a face neighbour of a different label.
pub fn boundary_neighbourhood(mask: &LabelMask) -> BinaryMask {
    let dims = mask.dims();
    let l = mask.labels();
    let bits = (0..dims.len())
        .map(|v| {
            FACE_OFFSETS
                .iter()
                .any(|&(dz, dy, dx)| dims.offset(v, dz, dy, dx).is_some_and(|u| l[u] != l[v]))
        })
        .collect();
    BinaryMask::new(dims, bits).expect("dims already validated")
}

/// Pointwise boundary field `sigmoid(k l_i) * sigmoid(k l_j)` on `neighbourhood`, 0 elsewhere.
pub fn soft_boundary(
    logit_i: &[f64],
    logit_j: &[f64],
    neighbourhood: &BinaryMask,
    kappa: f64,
) -> Result<Vec<f64>, TopoLossError> {
    if !(kappa > 0.0) {
        return Err(TopoLossError::NonPositiveSharpness("kappa", kappa));
    }
    let n = neighbourhood.dims().len();
    if logit_i.len() != n || logit_j.len() != n {
        return Err(TopoLossError::ShapeMismatch);
    }
    Ok((0..n)
        .map(|v| {
            if neighbourhood.bits()[v] {
                sigmoid(kappa * logit_i[v]) * sigmoid(kappa * logit_j[v])
            } else {
                0.0
            }
        })
        .collect())
}

/// Faces `(u, v)` between voxels of different ground-truth labels.
#[derive(Debug, Clone)]
pub(crate) struct BoundaryFaces {
    pub faces: Vec<(usize, usize)>,
}

impl BoundaryFaces {
    pub fn new(mask: &LabelMask) -> Self {
        let dims = mask.dims();
        let l = mask.labels();
        let mut faces = Vec::new();
        for v in 0..dims.len() {
            for &(dz, dy, dx) in &FORWARD_FACE_OFFSETS {
                if let Some(u) = dims.offset(v, dz, dy, dx) {
                    if l[u] != l[v] {
                        faces.push((v, u));
                    }
                }
            }
        }
        Self { faces }
    }
}

/// Boundary alignment loss over the ground-truth adjacency.
///
/// For every adjacent pair `(i, j)` and every face `(u, v)` of the ground-truth
/// label boundary, the predicted contact
/// `s_i(u) s_j(v) + s_j(u) s_i(v)` with `s_c = sigmoid(kappa * logit_c)` is
/// compared in L1 with the ground-truth contact
/// `[M(u) = i][M(v) = j] + [M(u) = j][M(v) = i]`.
pub(crate) fn adjacency_loss_faces(
    logits: &LogitMap,
    mask: &LabelMask,
    adjacency: &AdjacencySet,
    faces: &BoundaryFaces,
    kappa: f64,
) -> LossGrad {
    let n = logits.dims().len();
    let mut grad = vec![0.0; logits.data().len()];
    let mut value = 0.0;
    for_each_contact(logits, mask, adjacency, faces, kappa, |c| {
        value += c.diff.abs();
        let sign = sign_of(c.diff);
        if sign == 0.0 {
            return;
        }
        let ds = |s: f64| kappa * s * (1.0 - s);
        let (i, j, u, v) = (c.i, c.j, c.u, c.v);
        grad[i * n + u] += sign * ds(c.siu) * c.sjv;
        grad[j * n + v] += sign * c.siu * ds(c.sjv);
        grad[j * n + u] += sign * ds(c.sju) * c.siv;
        grad[i * n + v] += sign * c.sju * ds(c.siv);
    });
    LossGrad { value, grad }
}

/// Sign of every face residual, in evaluation order. The loss is smooth
/// wherever this pattern is locally constant.
pub(crate) fn adjacency_signs(
    logits: &LogitMap,
    mask: &LabelMask,
    adjacency: &AdjacencySet,
    faces: &BoundaryFaces,
    kappa: f64,
) -> Vec<i8> {
    let mut out = Vec::new();
    for_each_contact(logits, mask, adjacency, faces, kappa, |c| out.push(sign_of(c.diff) as i8));
    out
}

fn sign_of(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct Contact {
    i: usize,
    j: usize,
    u: usize,
    v: usize,
    siu: f64,
    sjv: f64,
    sju: f64,
    siv: f64,
    diff: f64,
}

fn for_each_contact(
    logits: &LogitMap,
    mask: &LabelMask,
    adjacency: &AdjacencySet,
    faces: &BoundaryFaces,
    kappa: f64,
    mut f: impl FnMut(Contact),
) {
    let n = logits.dims().len();
    let z = logits.data();
    let lab = mask.labels();
    for &(i, j) in adjacency.iter() {
        let (i, j) = (i as usize, j as usize);
        let s = |c: usize, w: usize| sigmoid(kappa * z[c * n + w]);
        let hit = |a: usize, b: usize| (lab[a] as usize == i && lab[b] as usize == j) as u8 as f64;
        for &(u, v) in &faces.faces {
            let (siu, sjv, sju, siv) = (s(i, u), s(j, v), s(j, u), s(i, v));
            let diff = siu * sjv + sju * siv - (hit(u, v) + hit(v, u));
            f(Contact {
                i,
                j,
                u,
                v,
                siu,
                sjv,
                sju,
                siv,
                diff,
            });
        }
    }
}

/// Boundary alignment loss of `logits` against the adjacency of `mask`.
pub fn adjacency_loss(logits: &LogitMap, mask: &LabelMask, kappa: f64) -> Result<LossGrad, TopoLossError> {
    if logits.dims() != mask.dims() || logits.channels() != mask.num_classes() as usize + 1 {
        return Err(TopoLossError::ShapeMismatch);
    }
    if !(kappa > 0.0) {
        return Err(TopoLossError::NonPositiveSharpness("kappa", kappa));
    }
    let adjacency = match extract_adjacency(mask) {
        Ok(a) => a,
        Err(TopoLossError::EmptyForeground) => AdjacencySet::new(),
        Err(e) => return Err(e),
    };
    Ok(adjacency_loss_faces(logits, mask, &adjacency, &BoundaryFaces::new(mask), kappa))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Dims;

    #[test]
    fn insert_normalises_order() {
        let mut a = AdjacencySet::new();
        assert!(a.insert(3, 1));
        assert!(!a.insert(1, 3));
        assert!(!a.insert(2, 2));
        assert_eq!(a.pairs(), vec![(1, 3)]);
    }

    #[test]
    fn mirrored_pair_has_one_adjacency() {
        let dims = Dims::new(1, 3, 7);
        let m = LabelMask::new(
            dims,
            (0..21).map(|i| match i % 7 { 1 => 1, 5 => 2, _ => 0 }).collect(),
            2,
        )
        .unwrap();
        assert_eq!(extract_adjacency(&m).unwrap().pairs(), vec![(1, 2)]);
        // Midplane column x = 3 is equidistant and goes to the smaller label.
        let cells = voronoi_labels(&m).unwrap();
        assert_eq!(cells[3], 1);
    }

    #[test]
    fn soft_boundary_values() {
        let nb = BinaryMask::new(Dims::new(1, 1, 2), vec![true, false]).unwrap();
        let b = soft_boundary(&[4.0, 4.0], &[4.0, 4.0], &nb, 1.0).unwrap();
        assert!((b[0] - 0.964_351_08).abs() < 1e-8);
        assert_eq!(b[1], 0.0);
        let b = soft_boundary(&[4.0, 0.0], &[-60.0, 0.0], &nb, 1.0).unwrap();
        assert!(b[0] < 1e-20);
    }
}
