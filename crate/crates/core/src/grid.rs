//! Dense 3D grid containers.
//!
//! All grids are stored row-major with `x` (width) varying fastest, so the
//! flat index of voxel `(z, y, x)` is `(z * height + y) * width + x`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid dimensions must be positive, got {0:?}")]
    EmptyDims([usize; 3]),
    #[error("data length {actual} does not match dims {dims:?} (expected {expected})")]
    LengthMismatch {
        dims: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at voxel index {0}")]
    NonFinite(usize),
    #[error("label {label} at voxel index {index} exceeds class count {num_classes}")]
    LabelOutOfRange {
        index: usize,
        label: u16,
        num_classes: u16,
    },
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimsMismatch(Dims, Dims),
    #[error("probability map channel {channel} at voxel {index} is invalid: {reason}")]
    InvalidProbability {
        channel: usize,
        index: usize,
        reason: &'static str,
    },
}

/// Grid extent as `(depth, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(depth: usize, height: usize, width: usize) -> Self {
        Self {
            depth,
            height,
            width,
        }
    }

    pub const fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    #[inline]
    pub const fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    #[inline]
    pub const fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.width;
        let rest = index / self.width;
        (rest / self.height, rest % self.height, x)
    }

    /// Index of the voxel displaced by `(dz, dy, dx)`, or `None` off-grid.
    #[inline]
    pub fn offset(&self, index: usize, dz: isize, dy: isize, dx: isize) -> Option<usize> {
        let (z, y, x) = self.coords(index);
        let nz = z as isize + dz;
        let ny = y as isize + dy;
        let nx = x as isize + dx;
        if nz < 0
            || ny < 0
            || nx < 0
            || nz >= self.depth as isize
            || ny >= self.height as isize
            || nx >= self.width as isize
        {
            return None;
        }
        Some(self.index(nz as usize, ny as usize, nx as usize))
    }

    fn check(&self) -> Result<(), GridError> {
        if self.depth == 0 || self.height == 0 || self.width == 0 {
            return Err(GridError::EmptyDims(self.as_array()));
        }
        Ok(())
    }
}

/// Face (6-connected) neighbour offsets.
pub const FACE_OFFSETS: [(isize, isize, isize); 6] = [
    (-1, 0, 0),
    (1, 0, 0),
    (0, -1, 0),
    (0, 1, 0),
    (0, 0, -1),
    (0, 0, 1),
];

/// The three "forward" face offsets; each undirected face pair is visited once.
pub const FORWARD_FACE_OFFSETS: [(isize, isize, isize); 3] = [(1, 0, 0), (0, 1, 0), (0, 0, 1)];

/// All 26 neighbour offsets in lexicographic `(dz, dy, dx)` order.
pub fn full_offsets() -> impl Iterator<Item = (isize, isize, isize)> {
    (-1..=1isize).flat_map(|dz| {
        (-1..=1isize).flat_map(move |dy| {
            (-1..=1isize)
                .map(move |dx| (dz, dy, dx))
                .filter(|&o| o != (0, 0, 0))
        })
    })
}

/// Dense scalar grid (intensity volume or single-class soft mask).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self, GridError> {
        dims.check()?;
        if data.len() != dims.len() {
            return Err(GridError::LengthMismatch {
                dims: dims.as_array(),
                expected: dims.len(),
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        assert!(value.is_finite());
        assert!(!dims.is_empty(), "grid dimensions must be positive");
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self, GridError> {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.depth {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.dims.index(z, y, x)]
    }

    /// Binarize with `value >= threshold`.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            bits: self.data.iter().map(|&v| v >= threshold).collect(),
        }
    }
}

/// Dense grid of instance labels; 0 is background, `1..=num_classes` are teeth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    dims: Dims,
    labels: Vec<u16>,
    num_classes: u16,
}

impl LabelMask {
    pub fn new(dims: Dims, labels: Vec<u16>, num_classes: u16) -> Result<Self, GridError> {
        dims.check()?;
        if labels.len() != dims.len() {
            return Err(GridError::LengthMismatch {
                dims: dims.as_array(),
                expected: dims.len(),
                actual: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > num_classes) {
            return Err(GridError::LabelOutOfRange {
                index,
                label,
                num_classes,
            });
        }
        Ok(Self {
            dims,
            labels,
            num_classes,
        })
    }

    pub fn background(dims: Dims, num_classes: u16) -> Self {
        assert!(!dims.is_empty(), "grid dimensions must be positive");
        Self {
            dims,
            labels: vec![0; dims.len()],
            num_classes,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u16 {
        self.labels[self.dims.index(z, y, x)]
    }

    pub(crate) fn labels_mut(&mut self) -> &mut [u16] {
        &mut self.labels
    }

    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            bits: self.labels.iter().map(|&l| l != 0).collect(),
        }
    }

    pub fn class_mask(&self, class: u16) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            bits: self.labels.iter().map(|&l| l == class).collect(),
        }
    }

    /// Sorted distinct non-zero labels that occur in the mask.
    pub fn present_labels(&self) -> Vec<u16> {
        let mut seen = vec![false; self.num_classes as usize + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=self.num_classes).filter(|&l| seen[l as usize]).collect()
    }
}

/// One bit per voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self, GridError> {
        dims.check()?;
        if bits.len() != dims.len() {
            return Err(GridError::LengthMismatch {
                dims: dims.as_array(),
                expected: dims.len(),
                actual: bits.len(),
            });
        }
        Ok(Self { dims, bits })
    }

    pub fn empty(dims: Dims) -> Self {
        assert!(!dims.is_empty(), "grid dimensions must be positive");
        Self {
            dims,
            bits: vec![false; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut mask = Self::empty(dims);
        for z in 0..dims.depth {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    mask.bits[dims.index(z, y, x)] = f(z, y, x);
                }
            }
        }
        mask
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.bits[self.dims.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, value: bool) {
        let i = self.dims.index(z, y, x);
        self.bits[i] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D {
            dims: self.dims,
            data: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Per-class soft segmentation: `channels = K + 1`, channel 0 is background.
///
/// Stored channel-major: `data[c * voxels + v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    dims: Dims,
    channels: usize,
    data: Vec<f64>,
}

impl ProbMap {
    /// Validating constructor: every value in `[0, 1]`, channel sums equal 1 within 1e-6.
    pub fn new(dims: Dims, channels: usize, data: Vec<f64>) -> Result<Self, GridError> {
        dims.check()?;
        let n = dims.len();
        if data.len() != n * channels || channels == 0 {
            return Err(GridError::LengthMismatch {
                dims: dims.as_array(),
                expected: n * channels,
                actual: data.len(),
            });
        }
        for c in 0..channels {
            for v in 0..n {
                let p = data[c * n + v];
                if !(0.0..=1.0).contains(&p) {
                    return Err(GridError::InvalidProbability {
                        channel: c,
                        index: v,
                        reason: "value outside [0, 1]",
                    });
                }
            }
        }
        for v in 0..n {
            let s: f64 = (0..channels).map(|c| data[c * n + v]).sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(GridError::InvalidProbability {
                    channel: 0,
                    index: v,
                    reason: "channel sum differs from 1",
                });
            }
        }
        Ok(Self { dims, channels, data })
    }

    /// One-hot encoding of a label mask.
    pub fn one_hot(mask: &LabelMask) -> Self {
        let n = mask.dims().len();
        let channels = mask.num_classes() as usize + 1;
        let mut data = vec![0.0; n * channels];
        for (v, &l) in mask.labels().iter().enumerate() {
            data[l as usize * n + v] = 1.0;
        }
        Self {
            dims: mask.dims(),
            channels,
            data,
        }
    }

    pub(crate) fn from_raw(dims: Dims, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims.len() * channels);
        Self { dims, channels, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.channels - 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_volume(&self, c: usize) -> Volume3D {
        Volume3D {
            dims: self.dims,
            data: self.channel(c).to_vec(),
        }
    }

    /// Soft foreground `1 - p_background`.
    pub fn foreground(&self) -> Volume3D {
        Volume3D {
            dims: self.dims,
            data: self.channel(0).iter().map(|&p| 1.0 - p).collect(),
        }
    }

    /// Hard labelling by per-voxel argmax; ties go to the lower class index.
    pub fn argmax(&self) -> LabelMask {
        let n = self.dims.len();
        let labels = (0..n)
            .map(|v| {
                let mut best = 0usize;
                let mut best_p = self.data[v];
                for c in 1..self.channels {
                    let p = self.data[c * n + v];
                    if p > best_p {
                        best = c;
                        best_p = p;
                    }
                }
                best as u16
            })
            .collect();
        LabelMask {
            dims: self.dims,
            labels,
            num_classes: (self.channels - 1) as u16,
        }
    }
}

/// Raw per-class scores before softmax, channel-major like [`ProbMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    dims: Dims,
    channels: usize,
    data: Vec<f64>,
}

impl LogitMap {
    pub fn new(dims: Dims, channels: usize, data: Vec<f64>) -> Result<Self, GridError> {
        dims.check()?;
        if channels < 1 || data.len() != dims.len() * channels {
            return Err(GridError::LengthMismatch {
                dims: dims.as_array(),
                expected: dims.len() * channels,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Self { dims, channels, data })
    }

    /// Logits that put `+magnitude` on each voxel's label and `-magnitude` elsewhere.
    pub fn saturated(mask: &LabelMask, magnitude: f64) -> Self {
        let n = mask.dims().len();
        let channels = mask.num_classes() as usize + 1;
        let mut data = vec![-magnitude; n * channels];
        for (v, &l) in mask.labels().iter().enumerate() {
            data[l as usize * n + v] = magnitude;
        }
        Self {
            dims: mask.dims(),
            channels,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.dims.len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Per-voxel softmax over channels (max-shifted for stability).
    pub fn softmax(&self) -> ProbMap {
        let n = self.dims.len();
        let mut out = vec![0.0; self.data.len()];
        for v in 0..n {
            let m = (0..self.channels)
                .map(|c| self.data[c * n + v])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..self.channels {
                let e = (self.data[c * n + v] - m).exp();
                out[c * n + v] = e;
                sum += e;
            }
            for c in 0..self.channels {
                out[c * n + v] /= sum;
            }
        }
        ProbMap::from_raw(self.dims, self.channels, out)
    }
}

/// Pull a gradient with respect to softmax outputs back to the logits:
/// `dz_c = p_c * (g_c - sum_k p_k g_k)`.
pub fn softmax_vjp(probs: &ProbMap, grad_probs: &[f64]) -> Vec<f64> {
    let n = probs.dims().len();
    let ch = probs.channels();
    let p = probs.data();
    let mut out = vec![0.0; p.len()];
    for v in 0..n {
        let dot: f64 = (0..ch).map(|c| p[c * n + v] * grad_probs[c * n + v]).sum();
        for c in 0..ch {
            out[c * n + v] = p[c * n + v] * (grad_probs[c * n + v] - dot);
        }
    }
    out
}
