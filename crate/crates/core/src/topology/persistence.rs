//! Persistent homology (dimensions 0 and 1) of voxel fields.
//!
//! The complex is the full cubical complex of the grid, with the voxels as
//! top-dimensional cubes. A probability field `p` is filtered by the sublevel
//! sets of `g = 1 - p`, so high-probability structure enters first. Every cell
//! takes the value of its best incident voxel (the one with the smallest `g`),
//! its *anchor*. Cells are ordered by anchor rank (voxels sorted by `g`
//! ascending, ties by lexicographic `(z, y, x)`), then by cell dimension, then
//! by cell position on the refined grid.
//!
//! Dimension 0 is computed with union-find over vertices and edges. Dimension 1
//! is computed by persistent cohomology over the edges that did not kill a
//! component (clearing), reducing coboundary columns from the youngest edge to
//! the oldest.

use std::fmt::Write as _;

use thiserror::Error;

use crate::grid::{Dims, Volume3D};

#[derive(Debug, Error, PartialEq)]
pub enum PersistenceError {
    #[error("field value {value} at voxel {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("malformed diagram line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// One homological feature of the filtration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PersistencePair {
    pub dim: u8,
    pub birth: f64,
    /// `f64::INFINITY` for essential classes.
    pub death: f64,
    /// Flat index of the anchor voxel of the creating cell.
    pub birth_voxel: usize,
    /// Flat index of the anchor voxel of the destroying cell.
    pub death_voxel: Option<usize>,
}

impl PersistencePair {
    pub fn is_essential(&self) -> bool {
        self.death_voxel.is_none()
    }

    pub fn persistence(&self) -> f64 {
        self.death - self.birth
    }

    /// `birth <= t < death`.
    pub fn alive_at(&self, t: f64) -> bool {
        self.birth <= t && t < self.death
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceDiagram {
    dims: Dims,
    pairs: Vec<PersistencePair>,
}

impl PersistenceDiagram {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn pairs(&self) -> &[PersistencePair] {
        &self.pairs
    }

    pub fn in_dim(&self, dim: u8) -> impl Iterator<Item = &PersistencePair> {
        self.pairs.iter().filter(move |p| p.dim == dim)
    }

    /// Number of `dim`-dimensional classes alive at filtration value `t`.
    pub fn betti_at(&self, dim: u8, t: f64) -> usize {
        self.in_dim(dim).filter(|p| p.alive_at(t)).count()
    }

    /// One line per pair: `dim birth death bz by bx dz dy dx`. Essential pairs
    /// print `+inf` and `-1 -1 -1` for the death voxel.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let (bz, by, bx) = self.dims.coords(p.birth_voxel);
            let _ = write!(out, "{} {:?} ", p.dim, p.birth);
            match p.death_voxel {
                Some(d) => {
                    let (dz, dy, dx) = self.dims.coords(d);
                    let _ = writeln!(out, "{:?} {bz} {by} {bx} {dz} {dy} {dx}", p.death);
                }
                None => {
                    let _ = writeln!(out, "+inf {bz} {by} {bx} -1 -1 -1");
                }
            }
        }
        out
    }

    pub fn from_text(dims: Dims, text: &str) -> Result<Self, PersistenceError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: &str| PersistenceError::Parse {
                line: i + 1,
                reason: reason.to_string(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 9 {
                return Err(err("expected 9 fields"));
            }
            let dim: u8 = f[0].parse().map_err(|_| err("bad dim"))?;
            let birth: f64 = f[1].parse().map_err(|_| err("bad birth"))?;
            let coord = |s: &str| s.parse::<usize>().map_err(|_| err("bad coordinate"));
            let birth_voxel = dims.index(coord(f[3])?, coord(f[4])?, coord(f[5])?);
            let (death, death_voxel) = if f[2] == "+inf" {
                (f64::INFINITY, None)
            } else {
                let d: f64 = f[2].parse().map_err(|_| err("bad death"))?;
                (d, Some(dims.index(coord(f[6])?, coord(f[7])?, coord(f[8])?)))
            };
            pairs.push(PersistencePair {
                dim,
                birth,
                death,
                birth_voxel,
                death_voxel,
            });
        }
        Ok(Self { dims, pairs })
    }
}

const UNSET: u32 = u32::MAX;

struct Refined {
    rd: usize,
    rh: usize,
    rw: usize,
}

impl Refined {
    fn new(dims: Dims) -> Self {
        Self {
            rd: 2 * dims.depth + 1,
            rh: 2 * dims.height + 1,
            rw: 2 * dims.width + 1,
        }
    }

    fn len(&self) -> usize {
        self.rd * self.rh * self.rw
    }

    #[inline]
    fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.rh + y) * self.rw + x
    }

    #[inline]
    fn coords(&self, c: usize) -> (usize, usize, usize) {
        let x = c % self.rw;
        let r = c / self.rw;
        (r / self.rh, r % self.rh, x)
    }
}

fn find(parent: &mut [u32], mut a: u32) -> u32 {
    while parent[a as usize] != a {
        let up = parent[parent[a as usize] as usize];
        parent[a as usize] = up;
        a = up;
    }
    a
}

/// Persistence pairs of dimensions 0 and 1 for a probability field.
///
/// Pairs with zero persistence are omitted.
pub fn persistence(field: &Volume3D) -> Result<PersistenceDiagram, PersistenceError> {
    if let Some((index, &value)) = field
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(PersistenceError::OutOfRange { index, value });
    }
    Ok(compute(field.dims(), field.data()))
}

pub(crate) fn compute(dims: Dims, p: &[f64]) -> PersistenceDiagram {
    let n = dims.len();
    let g: Vec<f64> = p.iter().map(|&v| 1.0 - v).collect();
    // Order by p descending; this agrees with g ascending but never merges
    // distinct p values that round to the same g.
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| p[b as usize].total_cmp(&p[a as usize]).then(a.cmp(&b)));

    let rf = Refined::new(dims);
    let ncells = rf.len();
    let mut pos = vec![UNSET; ncells];
    let mut anchor_at = vec![0u32; ncells];

    let (vd, vh, vw) = (dims.depth + 1, dims.height + 1, dims.width + 1);
    let vert = |z: usize, y: usize, x: usize| ((z / 2 * vh + y / 2) * vw + x / 2) as u32;
    let mut parent: Vec<u32> = vec![UNSET; vd * vh * vw];
    // Filtration position of the oldest vertex in each root's component.
    let mut root_birth: Vec<u32> = vec![UNSET; vd * vh * vw];

    let mut pairs = Vec::new();
    let mut positive_edges: Vec<u32> = Vec::new();
    let mut next = 0u32;
    let mut buckets: [Vec<usize>; 4] = Default::default();

    for &v in &order {
        let v = v as usize;
        let (z, y, x) = dims.coords(v);
        let (cz, cy, cx) = (2 * z + 1, 2 * y + 1, 2 * x + 1);
        for b in buckets.iter_mut() {
            b.clear();
        }
        for rz in cz - 1..=cz + 1 {
            for ry in cy - 1..=cy + 1 {
                for rx in cx - 1..=cx + 1 {
                    let c = rf.index(rz, ry, rx);
                    if pos[c] == UNSET {
                        buckets[(rz & 1) + (ry & 1) + (rx & 1)].push(c);
                    }
                }
            }
        }
        for dim in 0..4 {
            for i in 0..buckets[dim].len() {
                let c = buckets[dim][i];
                let here = next;
                pos[c] = here;
                anchor_at[here as usize] = v as u32;
                next += 1;
                let (rz, ry, rx) = rf.coords(c);
                match dim {
                    0 => {
                        let u = vert(rz, ry, rx);
                        parent[u as usize] = u;
                        root_birth[u as usize] = here;
                    }
                    1 => {
                        let (a, b) = if rz & 1 == 1 {
                            (vert(rz - 1, ry, rx), vert(rz + 1, ry, rx))
                        } else if ry & 1 == 1 {
                            (vert(rz, ry - 1, rx), vert(rz, ry + 1, rx))
                        } else {
                            (vert(rz, ry, rx - 1), vert(rz, ry, rx + 1))
                        };
                        let ra = find(&mut parent, a);
                        let rb = find(&mut parent, b);
                        if ra == rb {
                            positive_edges.push(c as u32);
                            continue;
                        }
                        let (elder, younger) = if root_birth[ra as usize] < root_birth[rb as usize] {
                            (ra, rb)
                        } else {
                            (rb, ra)
                        };
                        let birth_voxel = anchor_at[root_birth[younger as usize] as usize] as usize;
                        let birth = g[birth_voxel];
                        let death = g[v];
                        if death > birth {
                            pairs.push(PersistencePair {
                                dim: 0,
                                birth,
                                death,
                                birth_voxel,
                                death_voxel: Some(v),
                            });
                        }
                        parent[younger as usize] = elder;
                    }
                    _ => {}
                }
            }
        }
    }

    // The whole grid is connected: exactly one essential component.
    if let Some(&first) = order.first() {
        let first = first as usize;
        pairs.push(PersistencePair {
            dim: 0,
            birth: g[first],
            death: f64::INFINITY,
            birth_voxel: first,
            death_voxel: None,
        });
    }

    reduce_dim1(&rf, &pos, &anchor_at, &g, &positive_edges, &mut pairs);

    PersistenceDiagram { dims, pairs }
}

fn reduce_dim1(
    rf: &Refined,
    pos: &[u32],
    anchor_at: &[u32],
    g: &[f64],
    positive_edges: &[u32],
    pairs: &mut Vec<PersistencePair>,
) {
    let mut owner = vec![UNSET; pos.len()];
    let mut columns: Vec<Vec<u32>> = Vec::new();
    let mut work: Vec<u32> = Vec::with_capacity(16);
    let mut scratch: Vec<u32> = Vec::with_capacity(16);

    for &edge in positive_edges.iter().rev() {
        let edge = edge as usize;
        let (z, y, x) = rf.coords(edge);
        work.clear();
        let mut push = |zz: isize, yy: isize, xx: isize| {
            if zz >= 0
                && yy >= 0
                && xx >= 0
                && (zz as usize) < rf.rd
                && (yy as usize) < rf.rh
                && (xx as usize) < rf.rw
            {
                work.push(pos[rf.index(zz as usize, yy as usize, xx as usize)]);
            }
        };
        let (zi, yi, xi) = (z as isize, y as isize, x as isize);
        if z & 1 == 1 {
            push(zi, yi - 1, xi);
            push(zi, yi + 1, xi);
            push(zi, yi, xi - 1);
            push(zi, yi, xi + 1);
        } else if y & 1 == 1 {
            push(zi - 1, yi, xi);
            push(zi + 1, yi, xi);
            push(zi, yi, xi - 1);
            push(zi, yi, xi + 1);
        } else {
            push(zi - 1, yi, xi);
            push(zi + 1, yi, xi);
            push(zi, yi - 1, xi);
            push(zi, yi + 1, xi);
        }
        work.sort_unstable();

        while let Some(&pivot) = work.first() {
            let o = owner[pivot as usize];
            if o == UNSET {
                break;
            }
            symmetric_difference(&work, &columns[o as usize], &mut scratch);
            std::mem::swap(&mut work, &mut scratch);
        }

        let birth_voxel = anchor_at[pos[edge] as usize] as usize;
        let birth = g[birth_voxel];
        match work.first() {
            Some(&pivot) => {
                owner[pivot as usize] = columns.len() as u32;
                columns.push(work.clone());
                let death_voxel = anchor_at[pivot as usize] as usize;
                let death = g[death_voxel];
                if death > birth {
                    pairs.push(PersistencePair {
                        dim: 1,
                        birth,
                        death,
                        birth_voxel,
                        death_voxel: Some(death_voxel),
                    });
                }
            }
            None => pairs.push(PersistencePair {
                dim: 1,
                birth,
                death: f64::INFINITY,
                birth_voxel,
                death_voxel: None,
            }),
        }
    }
}

fn symmetric_difference(a: &[u32], b: &[u32], out: &mut Vec<u32>) {
    out.clear();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
}

/// Number of 1-dimensional classes alive at filtration value 0.5, i.e. the
/// first Betti number of `{p >= 0.5}`.
pub fn betti1_at_half(field: &Volume3D) -> Result<usize, PersistenceError> {
    let diagram = persistence(field)?;
    let p = field.data();
    Ok(diagram
        .in_dim(1)
        .filter(|pair| {
            p[pair.birth_voxel] >= 0.5 && pair.death_voxel.map_or(true, |d| p[d] < 0.5)
        })
        .count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BinaryMask;

    fn ring() -> Volume3D {
        BinaryMask::from_fn(Dims::new(3, 5, 5), |z, y, x| {
            z == 1 && (1..4).contains(&y) && (1..4).contains(&x) && !(y == 2 && x == 2)
        })
        .to_volume()
    }

    #[test]
    fn solid_blob_has_one_essential_component() {
        let f = BinaryMask::from_fn(Dims::cube(6), |z, y, x| {
            (1..4).contains(&z) && (1..5).contains(&y) && (2..4).contains(&x)
        })
        .to_volume();
        let d = persistence(&f).unwrap();
        let dim0: Vec<_> = d.in_dim(0).collect();
        assert_eq!(dim0.len(), 1);
        assert_eq!(dim0[0].birth, 0.0);
        assert!(dim0[0].is_essential());
        assert_eq!(d.in_dim(1).filter(|p| p.death > p.birth).count(), 0);
    }

    #[test]
    fn ring_has_one_hole_from_zero_to_one() {
        let d = persistence(&ring()).unwrap();
        let holes: Vec<_> = d.in_dim(1).collect();
        assert_eq!(holes.len(), 1);
        assert_eq!(holes[0].birth, 0.0);
        assert_eq!(holes[0].death, 1.0);
        assert_eq!(betti1_at_half(&ring()).unwrap(), 1);
    }

    #[test]
    fn betti1_at_half_trivial_cases() {
        assert_eq!(betti1_at_half(&Volume3D::zeros(Dims::cube(4))).unwrap(), 0);
        let blob = BinaryMask::from_fn(Dims::cube(4), |z, _, _| z < 2).to_volume();
        assert_eq!(betti1_at_half(&blob).unwrap(), 0);
    }

    #[test]
    fn rejects_out_of_range() {
        let v = Volume3D::filled(Dims::cube(2), 1.5);
        assert!(matches!(persistence(&v), Err(PersistenceError::OutOfRange { .. })));
    }

    #[test]
    fn two_blobs_merge_at_background_level() {
        let f = BinaryMask::from_fn(Dims::new(1, 1, 5), |_, _, x| x == 0 || x == 4).to_volume();
        let d = persistence(&f).unwrap();
        let finite: Vec<_> = d.in_dim(0).filter(|p| !p.is_essential()).collect();
        assert_eq!(finite.len(), 1);
        assert_eq!((finite[0].birth, finite[0].death), (0.0, 1.0));
        assert_eq!(finite[0].birth_voxel, 4);
    }

    #[test]
    fn text_roundtrip() {
        let d = persistence(&ring()).unwrap();
        let text = d.to_text();
        assert!(text.contains("+inf"));
        let back = PersistenceDiagram::from_text(d.dims(), &text).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn symmetric_difference_merges() {
        let mut out = Vec::new();
        symmetric_difference(&[1, 3, 5], &[3, 4], &mut out);
        assert_eq!(out, vec![1, 4, 5]);
    }
}
