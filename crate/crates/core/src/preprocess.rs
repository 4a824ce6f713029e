//! Intensity normalisation and topology-preserving augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{Dims, GridError, LabelMask, Volume3D};

/// Output of [`normalize_intensity`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub volume: Volume3D,
    /// Set when the clipped input had zero spread; `volume` is then all zeros.
    pub constant_input: bool,
}

/// Nearest-rank percentile bounds: the 0.5th percentile rounds its rank down
/// and the 99.5th rounds up, so both bounds are attained by input voxels.
pub fn percentile_bounds(data: &[f64]) -> (f64, f64) {
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let last = (sorted.len() - 1) as f64;
    let lo = sorted[(0.005 * last).floor() as usize];
    let hi = sorted[(0.995 * last).ceil() as usize];
    (lo, hi)
}

/// Clip to the 0.5th/99.5th percentiles, then standardise to zero mean and
/// unit (population) standard deviation.
pub fn normalize_intensity(vol: &Volume3D) -> Normalized {
    let (lo, hi) = percentile_bounds(vol.data());
    let clipped: Vec<f64> = vol.data().iter().map(|&v| v.clamp(lo, hi)).collect();
    let n = clipped.len() as f64;
    let mean = clipped.iter().sum::<f64>() / n;
    let var = clipped.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if lo == hi || sd == 0.0 {
        log::warn!("normalize_intensity: constant volume, returning zeros");
        return Normalized {
            volume: Volume3D::zeros(vol.dims()),
            constant_input: true,
        };
    }
    let data = clipped.into_iter().map(|v| (v - mean) / sd).collect();
    Normalized {
        volume: Volume3D::new(vol.dims(), data).expect("finite after standardisation"),
        constant_input: false,
    }
}

/// One of the 48 rigid symmetries of the voxel lattice: output axis `a` reads
/// input axis `perm[a]`, reversed when `flip[a]` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orientation {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

impl Orientation {
    pub const IDENTITY: Orientation = Orientation {
        perm: [0, 1, 2],
        flip: [false; 3],
    };

    /// All 48 orientations; index 0 is the identity.
    pub fn all() -> Vec<Orientation> {
        PERMS
            .iter()
            .flat_map(|&perm| {
                (0..8u8).map(move |bits| Orientation {
                    perm,
                    flip: [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0],
                })
            })
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn output_dims(&self, dims: Dims) -> Dims {
        let a = dims.as_array();
        Dims::new(a[self.perm[0]], a[self.perm[1]], a[self.perm[2]])
    }

    /// For each output voxel, the flat index of the input voxel it copies.
    fn source_indices(&self, dims: Dims) -> Vec<usize> {
        let out = self.output_dims(dims);
        let src_extent = dims.as_array();
        (0..out.len())
            .map(|o| {
                let (z, y, x) = out.coords(o);
                let oc = [z, y, x];
                let mut src = [0usize; 3];
                for a in 0..3 {
                    let axis = self.perm[a];
                    src[axis] = if self.flip[a] {
                        src_extent[axis] - 1 - oc[a]
                    } else {
                        oc[a]
                    };
                }
                dims.index(src[0], src[1], src[2])
            })
            .collect()
    }

    pub fn apply_volume(&self, vol: &Volume3D) -> Volume3D {
        let data = self.source_indices(vol.dims()).iter().map(|&i| vol.data()[i]).collect();
        Volume3D::new(self.output_dims(vol.dims()), data).expect("permuted finite data")
    }

    pub fn apply_mask(&self, mask: &LabelMask) -> LabelMask {
        let labels = self.source_indices(mask.dims()).iter().map(|&i| mask.labels()[i]).collect();
        LabelMask::new(self.output_dims(mask.dims()), labels, mask.num_classes()).expect("labels unchanged")
    }
}

/// Apply the same seeded random orientation to a volume and its mask.
pub fn augment(vol: &Volume3D, mask: &LabelMask, seed: u64) -> Result<(Volume3D, LabelMask, Orientation), GridError> {
    if vol.dims() != mask.dims() {
        return Err(GridError::DimsMismatch(vol.dims(), mask.dims()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let o = Orientation::all()[rng.gen_range(0..48)];
    Ok((o.apply_volume(vol), o.apply_mask(mask), o))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_volume_warns() {
        let r = normalize_intensity(&Volume3D::filled(Dims::cube(3), 2.5));
        assert!(r.constant_input);
        assert!(r.volume.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn outlier_is_clipped() {
        let mut data: Vec<f64> = (0..1000).map(|i| (i % 10) as f64).collect();
        data[17] = 1e9;
        let vol = Volume3D::new(Dims::new(10, 10, 10), data).unwrap();
        let (_, hi) = percentile_bounds(vol.data());
        assert_eq!(hi, 9.0);
        let out = normalize_intensity(&vol).volume;
        let max = out.data().iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(out.data()[17], max);
        assert!(max < 2.0);
    }

    #[test]
    fn orientations_are_distinct() {
        let all = Orientation::all();
        assert_eq!(all.len(), 48);
        assert!(all[0].is_identity());
        let d = Dims::new(2, 3, 4);
        let v = Volume3D::from_fn(d, |z, y, x| (z * 100 + y * 10 + x) as f64).unwrap();
        let mut seen: Vec<Vec<u64>> = all
            .iter()
            .map(|o| o.apply_volume(&v).data().iter().map(|x| x.to_bits()).collect())
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 48);
    }
}
