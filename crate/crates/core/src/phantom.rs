//! Synthetic dentition phantoms with analytically known topology.
//!
//! Teeth are axis-aligned ellipsoids whose centres sit on a circular arc in the
//! axial plane `z = (depth - 1) / 2`. The arc is parameterised by its centre
//! `(y, x)` and radius; tooth `k` sits at angle `theta_k` measured from `+y`
//! towards `+x`, and consecutive teeth are spaced so that their in-plane
//! extents are separated by `gap + 1` voxels along the chord. Holed teeth get
//! a cylindrical tunnel along `y` through their centre. A tunnel along `z`
//! would remove the ellipsoid's apex and let the Voronoi cells of the two
//! neighbours meet above it.
//!
//! Intensities are `contrast * foreground + noise`, with noise drawn from a
//! ChaCha20 stream seeded by `seed` and mapped to standard normals by the
//! ziggurat sampler of `rand_distr`.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BinaryMask, Dims, LabelMask, Volume3D};
use crate::topology::{betti_numbers, label_where, Connectivity};
use crate::topo_loss::{extract_adjacency, AdjacencySet};

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("tooth count must be positive")]
    NoTeeth,
    #[error("expected {expected} semi-axis triples, got {actual}")]
    SemiAxesCount { expected: usize, actual: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("tooth {tooth} does not fit inside the grid with a one-voxel margin")]
    DoesNotFit { tooth: u16 },
    #[error("arc radius {radius} is too small for the tooth spacing {spacing}")]
    ArcTooTight { radius: f64, spacing: f64 },
    #[error("no arc layout fits {teeth} teeth in {dims:?}")]
    NoLayout { teeth: u16, dims: Dims },
    #[error("generated dentition violates its topology contract: {0}")]
    Topology(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub tooth_count: u16,
    pub dims: Dims,
    /// Arc centre as `[y, x]` in voxel coordinates.
    pub arc_center: [f64; 2],
    pub arc_radius: f64,
    /// One `[z, y, x]` semi-axis triple per tooth.
    pub semi_axes: Vec<[f64; 3]>,
    pub gap: f64,
    pub holed_teeth: Vec<u16>,
    #[serde(default = "default_hole_radius")]
    pub hole_radius: f64,
    pub noise_sigma: f64,
    pub contrast: f64,
    pub seed: u64,
}

fn default_hole_radius() -> f64 {
    1.0
}

/// Tooth centre and semi-axes after layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToothPlacement {
    pub label: u16,
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl PhantomSpec {
    /// Spec with an automatically fitted arc. The arc centre is placed outside
    /// the grid on the `-y` side so that only consecutive teeth share Voronoi
    /// faces. Among layouts whose angular sectors are at least three voxels
    /// wide at the grid edge, the most curved one is chosen.
    pub fn fitted(
        tooth_count: u16,
        dims: Dims,
        semi_axes: [f64; 3],
        gap: f64,
        holed_teeth: Vec<u16>,
        seed: u64,
    ) -> Result<Self, PhantomError> {
        let mut spec = PhantomSpec {
            tooth_count,
            dims,
            arc_center: [0.0, (dims.width as f64 - 1.0) / 2.0],
            arc_radius: 1.0,
            semi_axes: vec![semi_axes; tooth_count as usize],
            gap,
            holed_teeth,
            hole_radius: default_hole_radius(),
            noise_sigma: 0.1,
            contrast: 1.0,
            seed,
        };
        if tooth_count == 0 {
            return Err(PhantomError::NoTeeth);
        }
        if tooth_count == 1 {
            spec.arc_radius = (dims.height as f64 - 1.0) / 2.0 + 1.0;
            spec.arc_center[0] = -1.0;
            spec.layout()?;
            return Ok(spec);
        }
        const MIN_SECTOR: f64 = 3.0;
        const MAX_TRIED_LAYOUTS: usize = 32;
        let h = dims.height as f64;
        // (curved enough, sector width or -radius), best first.
        let mut candidates: Vec<((bool, f64), f64, f64)> = Vec::new();
        let mut cy = -0.5;
        while cy >= -2.0 * h {
            let mut radius = 2.0;
            while radius <= 4.0 * h {
                spec.arc_center[0] = cy;
                spec.arc_radius = radius;
                if let Ok(placements) = spec.layout() {
                    let min_step = placements
                        .windows(2)
                        .map(|w| angle_of(&spec, &w[1]) - angle_of(&spec, &w[0]))
                        .fold(f64::INFINITY, f64::min);
                    let sector = -cy * min_step;
                    let key = if sector >= MIN_SECTOR {
                        (true, -radius)
                    } else {
                        (false, sector)
                    };
                    candidates.push((key, cy, radius));
                }
                radius += 0.25;
            }
            cy -= 0.5;
        }
        candidates.sort_by(|a, b| b.0 .0.cmp(&a.0 .0).then(b.0 .1.total_cmp(&a.0 .1)));
        // Tight layouts can let non-consecutive Voronoi cells meet; keep the
        // first candidate whose dentition honours the contract.
        for &(_, cy, radius) in candidates.iter().take(MAX_TRIED_LAYOUTS) {
            spec.arc_center[0] = cy;
            spec.arc_radius = radius;
            match generate_phantom(&spec) {
                Ok(_) => return Ok(spec),
                Err(PhantomError::Topology(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(PhantomError::NoLayout {
            teeth: tooth_count,
            dims,
        })
    }

    fn validate(&self) -> Result<(), PhantomError> {
        if self.tooth_count == 0 {
            return Err(PhantomError::NoTeeth);
        }
        if self.semi_axes.len() != self.tooth_count as usize {
            return Err(PhantomError::SemiAxesCount {
                expected: self.tooth_count as usize,
                actual: self.semi_axes.len(),
            });
        }
        let bad = |what: &str| Err(PhantomError::InvalidParameter(what.to_string()));
        if self.dims.is_empty() {
            return bad("grid dimensions must be positive");
        }
        if !(self.gap >= 1.0) {
            return bad("gap must be at least one voxel");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be finite and non-negative");
        }
        if !(self.contrast > 0.0) || !self.contrast.is_finite() {
            return bad("contrast must be positive");
        }
        if !(self.arc_radius > 0.0) || !self.arc_center.iter().all(|c| c.is_finite()) {
            return bad("arc geometry must be finite with positive radius");
        }
        if !(self.hole_radius > 0.0) {
            return bad("hole_radius must be positive");
        }
        if self.semi_axes.iter().flatten().any(|&a| !(a >= 1.0) || !a.is_finite()) {
            return bad("semi-axes must be at least one voxel");
        }
        if let Some(&t) = self
            .holed_teeth
            .iter()
            .find(|&&t| t == 0 || t > self.tooth_count)
        {
            return Err(PhantomError::InvalidParameter(format!(
                "holed tooth {t} is not a tooth label"
            )));
        }
        Ok(())
    }

    /// Tooth centres along the arc, checked against the grid bounds.
    pub fn layout(&self) -> Result<Vec<ToothPlacement>, PhantomError> {
        self.validate()?;
        let k = self.tooth_count as usize;
        let in_plane = |a: &[f64; 3]| a[1].max(a[2]);
        let mut steps = Vec::with_capacity(k.saturating_sub(1));
        for i in 0..k.saturating_sub(1) {
            let spacing = in_plane(&self.semi_axes[i]) + in_plane(&self.semi_axes[i + 1]) + self.gap + 1.0;
            if spacing > 2.0 * self.arc_radius {
                return Err(PhantomError::ArcTooTight {
                    radius: self.arc_radius,
                    spacing,
                });
            }
            steps.push(2.0 * (spacing / (2.0 * self.arc_radius)).asin());
        }
        let total: f64 = steps.iter().sum();
        let zc = (self.dims.depth as f64 - 1.0) / 2.0;
        let mut theta = -total / 2.0;
        let mut placements = Vec::with_capacity(k);
        for i in 0..k {
            let center = [
                zc,
                self.arc_center[0] + self.arc_radius * theta.cos(),
                self.arc_center[1] + self.arc_radius * theta.sin(),
            ];
            let axes = self.semi_axes[i];
            let extent = [self.dims.depth, self.dims.height, self.dims.width];
            for d in 0..3 {
                if center[d] - axes[d] < 1.0 || center[d] + axes[d] > extent[d] as f64 - 2.0 {
                    return Err(PhantomError::DoesNotFit { tooth: i as u16 + 1 });
                }
            }
            placements.push(ToothPlacement {
                label: i as u16 + 1,
                center,
                semi_axes: axes,
            });
            if i < steps.len() {
                theta += steps[i];
            }
        }
        Ok(placements)
    }
}

fn angle_of(spec: &PhantomSpec, t: &ToothPlacement) -> f64 {
    (t.center[2] - spec.arc_center[1]).atan2(t.center[1] - spec.arc_center[0])
}

/// A generated phantom and its ground-truth topology.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume3D,
    pub mask: LabelMask,
    pub adjacency: AdjacencySet,
    /// First Betti number per tooth, indexed by `label - 1`.
    pub tooth_b1: Vec<usize>,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    let placements = spec.layout()?;
    let dims = spec.dims;
    let mut mask = LabelMask::background(dims, spec.tooth_count);
    {
        let labels = mask.labels_mut();
        for t in &placements {
            let holed = spec.holed_teeth.contains(&t.label);
            let lo = |d: usize| (t.center[d] - t.semi_axes[d]).floor().max(0.0) as usize;
            let hi = |d: usize, n: usize| ((t.center[d] + t.semi_axes[d]).ceil() as usize).min(n - 1);
            for z in lo(0)..=hi(0, dims.depth) {
                for y in lo(1)..=hi(1, dims.height) {
                    for x in lo(2)..=hi(2, dims.width) {
                        let dz = (z as f64 - t.center[0]) / t.semi_axes[0];
                        let dy = (y as f64 - t.center[1]) / t.semi_axes[1];
                        let dx = (x as f64 - t.center[2]) / t.semi_axes[2];
                        if dz * dz + dy * dy + dx * dx > 1.0 {
                            continue;
                        }
                        if holed {
                            let rz = z as f64 - t.center[0];
                            let rx = x as f64 - t.center[2];
                            if rz * rz + rx * rx <= spec.hole_radius * spec.hole_radius {
                                continue;
                            }
                        }
                        labels[dims.index(z, y, x)] = t.label;
                    }
                }
            }
        }
    }

    let mut tooth_b1 = Vec::with_capacity(placements.len());
    for t in &placements {
        let class = mask.class_mask(t.label);
        let cc = label_where(dims, class.bits(), Connectivity::Full26);
        if cc.count != 1 {
            return Err(PhantomError::Topology(format!(
                "tooth {} has {} components",
                t.label, cc.count
            )));
        }
        let b = betti_numbers(&crop_to_support(&class, 1));
        let expected = usize::from(spec.holed_teeth.contains(&t.label));
        if b.b1 != expected || b.b2 != 0 {
            return Err(PhantomError::Topology(format!(
                "tooth {} has b1 = {}, b2 = {} (expected b1 = {expected})",
                t.label, b.b1, b.b2
            )));
        }
        tooth_b1.push(b.b1);
    }
    if label_where(dims, mask.foreground().bits(), Connectivity::Full26).count != placements.len() {
        return Err(PhantomError::Topology("neighbouring teeth touch".into()));
    }
    let adjacency = extract_adjacency(&mask).expect("phantom has teeth");
    let chain = AdjacencySet::chain(spec.tooth_count);
    if adjacency != chain {
        return Err(PhantomError::Topology(format!(
            "adjacency {:?} is not the chain",
            adjacency.pairs()
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let data = mask
        .labels()
        .iter()
        .map(|&l| {
            let base = if l != 0 { spec.contrast } else { 0.0 };
            let noise: f64 = StandardNormal.sample(&mut rng);
            base + spec.noise_sigma * noise
        })
        .collect();
    let volume = Volume3D::new(dims, data).expect("finite phantom intensities");
    Ok(Phantom {
        volume,
        mask,
        adjacency,
        tooth_b1,
    })
}

/// Crop a mask to the bounding box of its support plus `margin` voxels.
/// Betti numbers are unchanged as long as the margin is at least one voxel.
pub(crate) fn crop_to_support(mask: &BinaryMask, margin: usize) -> BinaryMask {
    let dims = mask.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &b) in mask.bits().iter().enumerate() {
        if b {
            any = true;
            let (z, y, x) = dims.coords(i);
            for (d, c) in [z, y, x].into_iter().enumerate() {
                lo[d] = lo[d].min(c);
                hi[d] = hi[d].max(c);
            }
        }
    }
    if !any {
        return BinaryMask::empty(Dims::cube(1));
    }
    let size: Vec<usize> = (0..3).map(|d| hi[d] - lo[d] + 1 + 2 * margin).collect();
    let out_dims = Dims::new(size[0], size[1], size[2]);
    BinaryMask::from_fn(out_dims, |z, y, x| {
        let src = [z as isize, y as isize, x as isize];
        let mut c = [0usize; 3];
        for d in 0..3 {
            let v = src[d] + lo[d] as isize - margin as isize;
            let n = dims.as_array()[d] as isize;
            if v < 0 || v >= n {
                return false;
            }
            c[d] = v as usize;
        }
        mask.get(c[0], c[1], c[2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_teeth_rejected() {
        assert_eq!(
            PhantomSpec::fitted(0, Dims::cube(16), [3.0; 3], 2.0, vec![], 1).unwrap_err(),
            PhantomError::NoTeeth
        );
    }

    #[test]
    fn out_of_bounds_tooth_is_named() {
        let spec = PhantomSpec {
            tooth_count: 2,
            dims: Dims::cube(16),
            arc_center: [2.0, 7.5],
            arc_radius: 6.0,
            semi_axes: vec![[3.0, 2.0, 2.0]; 2],
            gap: 1.0,
            holed_teeth: vec![],
            hole_radius: 1.0,
            noise_sigma: 0.0,
            contrast: 1.0,
            seed: 0,
        };
        let mut far = spec.clone();
        far.arc_radius = 40.0;
        far.arc_center = [-30.0, 7.5];
        assert!(generate_phantom(&far).is_ok());
        far.arc_center = [-30.0, 14.0];
        assert_eq!(generate_phantom(&far).unwrap_err(), PhantomError::DoesNotFit { tooth: 2 });
    }

    #[test]
    fn single_holed_tooth() {
        let spec = PhantomSpec::fitted(1, Dims::cube(16), [5.0, 3.5, 3.5], 2.0, vec![1], 3).unwrap();
        let p = generate_phantom(&spec).unwrap();
        assert_eq!(p.tooth_b1, vec![1]);
        assert!(p.adjacency.is_empty());
    }

    #[test]
    fn deterministic_bytes() {
        let spec = PhantomSpec::fitted(3, Dims::cube(24), [4.0, 2.5, 2.5], 2.0, vec![2], 9).unwrap();
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.mask, b.mask);
        let bits = |v: &Volume3D| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.volume), bits(&b.volume));
    }

    #[test]
    fn crop_keeps_betti() {
        let m = BinaryMask::from_fn(Dims::new(3, 9, 9), |z, y, x| {
            z == 1 && (4..7).contains(&y) && (4..7).contains(&x) && !(y == 5 && x == 5)
        });
        let c = crop_to_support(&m, 1);
        assert_eq!(c.dims(), Dims::new(3, 5, 5));
        assert_eq!(betti_numbers(&c), betti_numbers(&m));
    }
}
