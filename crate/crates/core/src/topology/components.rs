use std::collections::VecDeque;

use crate::grid::{full_offsets, BinaryMask, Dims, FACE_OFFSETS};

/// Voxel adjacency used for component labelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbours only.
    Face6,
    /// Face, edge and corner neighbours.
    Full26,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<(isize, isize, isize)> {
        match self {
            Connectivity::Face6 => FACE_OFFSETS.to_vec(),
            Connectivity::Full26 => full_offsets().collect(),
        }
    }
}

/// Component labels: 0 for background, `1..=count` assigned in scan order of
/// each component's first voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabels {
    pub count: usize,
    pub labels: Vec<u32>,
}

impl ComponentLabels {
    /// Voxel count per component, indexed by `label - 1`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }
}

pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentLabels {
    label_where(mask.dims(), mask.bits(), connectivity)
}

pub(crate) fn label_where(dims: Dims, bits: &[bool], connectivity: Connectivity) -> ComponentLabels {
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; dims.len()];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for seed in 0..dims.len() {
        if !bits[seed] || labels[seed] != 0 {
            continue;
        }
        count += 1;
        labels[seed] = count;
        queue.push_back(seed);
        while let Some(v) = queue.pop_front() {
            for &(dz, dy, dx) in &offsets {
                if let Some(n) = dims.offset(v, dz, dy, dx) {
                    if bits[n] && labels[n] == 0 {
                        labels[n] = count;
                        queue.push_back(n);
                    }
                }
            }
        }
    }
    ComponentLabels {
        count: count as usize,
        labels,
    }
}

/// Number of 26-connected components of `values >= threshold`, and for each
/// component its maximum-value voxel (ties to the smallest index).
pub(crate) fn components_with_peaks(dims: Dims, values: &[f64], threshold: f64) -> Vec<usize> {
    let bits: Vec<bool> = values.iter().map(|&v| v >= threshold).collect();
    let cc = label_where(dims, &bits, Connectivity::Full26);
    let mut peaks: Vec<Option<usize>> = vec![None; cc.count];
    for (v, &l) in cc.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let slot = &mut peaks[l as usize - 1];
        match slot {
            Some(best) if values[*best] >= values[v] => {}
            _ => *slot = Some(v),
        }
    }
    peaks.into_iter().map(|p| p.expect("component has a voxel")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_mask_has_no_components() {
        let m = BinaryMask::empty(Dims::cube(4));
        assert_eq!(connected_components(&m, Connectivity::Full26).count, 0);
        assert_eq!(connected_components(&m, Connectivity::Face6).count, 0);
    }

    #[test]
    fn three_blocks() {
        let m = BinaryMask::from_fn(Dims::cube(16), |z, y, x| {
            let block = |o: usize| (o..o + 2).contains(&z) && (o..o + 2).contains(&y) && (o..o + 2).contains(&x);
            block(1) || block(6) || block(12)
        });
        assert_eq!(connected_components(&m, Connectivity::Full26).count, 3);
        assert_eq!(connected_components(&m, Connectivity::Face6).count, 3);
    }

    #[test]
    fn corner_contact() {
        let mut m = BinaryMask::empty(Dims::cube(3));
        m.set(0, 0, 0, true);
        m.set(1, 1, 1, true);
        assert_eq!(connected_components(&m, Connectivity::Full26).count, 1);
        assert_eq!(connected_components(&m, Connectivity::Face6).count, 2);
    }

    #[test]
    fn labels_follow_scan_order() {
        let mut m = BinaryMask::empty(Dims::new(1, 1, 5));
        m.set(0, 0, 0, true);
        m.set(0, 0, 2, true);
        m.set(0, 0, 4, true);
        let cc = connected_components(&m, Connectivity::Full26);
        assert_eq!(cc.labels, vec![1, 0, 2, 0, 3]);
        assert_eq!(cc.sizes(), vec![1, 1, 1]);
    }

    #[test]
    fn peaks_pick_max_then_lowest_index() {
        let dims = Dims::new(1, 1, 5);
        let vals = [0.7, 0.9, 0.9, 0.0, 0.6];
        let peaks = components_with_peaks(dims, &vals, 0.5);
        assert_eq!(peaks, vec![1, 4]);
    }
}
