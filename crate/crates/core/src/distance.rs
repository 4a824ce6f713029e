//! Exact Euclidean distance transforms and nearest-instance (Voronoi) labelling.
//!
//! Squared distances are computed with the separable lower-envelope-of-parabolas
//! scheme in integer arithmetic, so results are exact.

use crate::grid::{BinaryMask, Dims, LabelMask};

/// Squared distance for voxels with no site anywhere in the grid.
pub const NO_SITE: i64 = i64::MAX;

/// Squared Euclidean distance from every voxel to the nearest `true` voxel.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<i64> {
    let mut f: Vec<i64> = mask.bits().iter().map(|&b| if b { 0 } else { NO_SITE }).collect();
    edt_in_place(mask.dims(), &mut f);
    f
}

pub(crate) fn edt_in_place(dims: Dims, f: &mut [i64]) {
    let Dims {
        depth,
        height,
        width,
    } = dims;
    let longest = depth.max(height).max(width);
    let mut line = vec![0i64; longest];
    let mut out = vec![0i64; longest];
    let mut env = Envelope::with_capacity(longest);

    for z in 0..depth {
        for y in 0..height {
            let base = dims.index(z, y, 0);
            line[..width].copy_from_slice(&f[base..base + width]);
            env.transform(&line[..width], &mut out[..width]);
            f[base..base + width].copy_from_slice(&out[..width]);
        }
    }
    for z in 0..depth {
        for x in 0..width {
            for y in 0..height {
                line[y] = f[dims.index(z, y, x)];
            }
            env.transform(&line[..height], &mut out[..height]);
            for y in 0..height {
                f[dims.index(z, y, x)] = out[y];
            }
        }
    }
    for y in 0..height {
        for x in 0..width {
            for z in 0..depth {
                line[z] = f[dims.index(z, y, x)];
            }
            env.transform(&line[..depth], &mut out[..depth]);
            for z in 0..depth {
                f[dims.index(z, y, x)] = out[z];
            }
        }
    }
}

/// Rational boundary `num / den` with `den > 0`; `den == 0` encodes +inf.
#[derive(Clone, Copy)]
struct Boundary {
    num: i64,
    den: i64,
}

impl Boundary {
    const POS_INF: Boundary = Boundary { num: 1, den: 0 };

    fn le(self, other: Boundary) -> bool {
        match (self.den, other.den) {
            (_, 0) => true,
            (0, _) => false,
            _ => self.num as i128 * other.den as i128 <= other.num as i128 * self.den as i128,
        }
    }

    fn lt_int(self, q: i64) -> bool {
        self.den != 0 && (self.num as i128) < q as i128 * self.den as i128
    }
}

struct Envelope {
    sites: Vec<i64>,
    // bounds[k] is the left boundary of parabola k; bounds[0] is -inf and
    // never compared.
    bounds: Vec<Boundary>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            sites: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    /// `out[q] = min_p (q - p)^2 + f[p]` over sites with finite `f[p]`.
    fn transform(&mut self, f: &[i64], out: &mut [i64]) {
        self.sites.clear();
        self.bounds.clear();
        for (q, &fq) in f.iter().enumerate() {
            if fq == NO_SITE {
                continue;
            }
            let q = q as i64;
            loop {
                let Some(&v) = self.sites.last() else {
                    break;
                };
                let fv = f[v as usize];
                let s = Boundary {
                    num: (fq + q * q) - (fv + v * v),
                    den: 2 * (q - v),
                };
                let k = self.sites.len() - 1;
                if k > 0 && s.le(self.bounds[k]) {
                    self.sites.pop();
                    self.bounds.pop();
                    continue;
                }
                break;
            }
            if self.sites.is_empty() {
                self.bounds.push(Boundary::POS_INF);
            } else {
                let v = *self.sites.last().unwrap();
                let fv = f[v as usize];
                self.bounds.push(Boundary {
                    num: (fq + q * q) - (fv + v * v),
                    den: 2 * (q - v),
                });
            }
            self.sites.push(q);
        }
        if self.sites.is_empty() {
            out.fill(NO_SITE);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            let q = q as i64;
            while k + 1 < self.sites.len() && self.bounds[k + 1].lt_int(q) {
                k += 1;
            }
            let p = self.sites[k];
            *o = (q - p) * (q - p) + f[p as usize];
        }
    }
}

/// Nearest-instance label for every voxel (background included).
///
/// Distances are exact squared Euclidean distances to each instance's voxel
/// set; ties go to the smaller label. Returns `None` when the mask has no
/// foreground.
pub fn voronoi_labels(mask: &LabelMask) -> Option<Vec<u16>> {
    let present = mask.present_labels();
    if present.is_empty() {
        return None;
    }
    let n = mask.dims().len();
    let mut best = vec![NO_SITE; n];
    let mut label = vec![0u16; n];
    for &k in &present {
        let d = squared_distance_transform(&mask.class_mask(k));
        // Labels are visited in ascending order, so a strict comparison keeps
        // the smaller label on ties.
        for v in 0..n {
            if d[v] < best[v] {
                best[v] = d[v];
                label[v] = k;
            }
        }
    }
    Some(label)
}
