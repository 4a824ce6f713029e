use super::components::{label_where, Connectivity};
use crate::grid::{BinaryMask, Dims};

/// Betti numbers of the closed-cube complex of a binary mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct BettiTriple {
    pub b0: usize,
    pub b1: usize,
    pub b2: usize,
}

/// Euler characteristic `V - E + F - C` of the union of the closed unit cubes
/// of all foreground voxels.
///
/// A lattice cell is present when any voxel incident to it is foreground. The
/// cells live on the refined grid of size `(2d+1) x (2h+1) x (2w+1)`; a cell's
/// dimension is the number of odd coordinates.
pub fn euler_characteristic(mask: &BinaryMask) -> i64 {
    let dims = mask.dims();
    let bits = mask.bits();
    let (rd, rh, rw) = (2 * dims.depth + 1, 2 * dims.height + 1, 2 * dims.width + 1);
    let mut counts = [0i64; 4];
    for cz in 0..rd {
        let zs = incident_range(cz, dims.depth);
        for cy in 0..rh {
            let ys = incident_range(cy, dims.height);
            for cx in 0..rw {
                let xs = incident_range(cx, dims.width);
                let present = zs.clone().any(|z| {
                    ys.clone()
                        .any(|y| xs.clone().any(|x| bits[dims.index(z, y, x)]))
                });
                if present {
                    counts[(cz & 1) + (cy & 1) + (cx & 1)] += 1;
                }
            }
        }
    }
    counts[0] - counts[1] + counts[2] - counts[3]
}

/// Voxel coordinates incident to refined coordinate `c` along an axis of length `n`.
pub(crate) fn incident_range(c: usize, n: usize) -> std::ops::Range<usize> {
    if c % 2 == 1 {
        let v = (c - 1) / 2;
        v..v + 1
    } else {
        (c / 2).saturating_sub(1)..(c / 2 + 1).min(n)
    }
}

/// Bounded 6-connected components of the complement (cavities).
pub fn cavity_count(mask: &BinaryMask) -> usize {
    let dims = mask.dims();
    // Pad by one background layer so everything reachable from outside is a
    // single component touching the padding.
    let padded = Dims::new(dims.depth + 2, dims.height + 2, dims.width + 2);
    let mut bits = vec![true; padded.len()];
    for z in 0..dims.depth {
        for y in 0..dims.height {
            for x in 0..dims.width {
                bits[padded.index(z + 1, y + 1, x + 1)] = !mask.get(z, y, x);
            }
        }
    }
    let cc = label_where(padded, &bits, Connectivity::Face6);
    // Voxel 0 of the padded grid is background padding, so label 1 is the
    // unbounded component.
    cc.count.saturating_sub(1)
}

/// `b0` = 26-connected foreground components, `b2` = cavities, `b1` from the
/// Euler–Poincaré relation.
pub fn betti_numbers(mask: &BinaryMask) -> BettiTriple {
    let b0 = label_where(mask.dims(), mask.bits(), Connectivity::Full26).count;
    let b2 = cavity_count(mask);
    let chi = euler_characteristic(mask);
    let b1 = b0 as i64 + b2 as i64 - chi;
    debug_assert!(b1 >= 0, "negative b1 from chi = {chi}");
    BettiTriple {
        b0,
        b1: b1.max(0) as usize,
        b2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(n: usize, inner: usize, off: usize) -> BinaryMask {
        BinaryMask::from_fn(Dims::cube(n), |z, y, x| {
            (off..off + inner).contains(&z) && (off..off + inner).contains(&y) && (off..off + inner).contains(&x)
        })
    }

    #[test]
    fn incident_ranges() {
        assert_eq!(incident_range(0, 3), 0..1);
        assert_eq!(incident_range(1, 3), 0..1);
        assert_eq!(incident_range(2, 3), 0..2);
        assert_eq!(incident_range(5, 3), 2..3);
        assert_eq!(incident_range(6, 3), 2..3);
    }

    #[test]
    fn single_voxel() {
        let mut m = BinaryMask::empty(Dims::cube(3));
        m.set(1, 1, 1, true);
        assert_eq!(euler_characteristic(&m), 1);
    }

    #[test]
    fn two_face_adjacent_voxels() {
        let mut m = BinaryMask::empty(Dims::cube(3));
        m.set(1, 1, 0, true);
        m.set(1, 1, 1, true);
        assert_eq!(euler_characteristic(&m), 1);
    }

    #[test]
    fn empty_has_zero_chi() {
        assert_eq!(euler_characteristic(&BinaryMask::empty(Dims::cube(2))), 0);
        assert_eq!(
            betti_numbers(&BinaryMask::empty(Dims::cube(2))),
            BettiTriple { b0: 0, b1: 0, b2: 0 }
        );
    }

    #[test]
    fn solid_cube() {
        assert_eq!(betti_numbers(&cube(5, 3, 1)), BettiTriple { b0: 1, b1: 0, b2: 0 });
    }

    #[test]
    fn ring_plate() {
        let m = BinaryMask::from_fn(Dims::new(1, 3, 3), |_, y, x| !(y == 1 && x == 1));
        assert_eq!(euler_characteristic(&m), 0);
        assert_eq!(betti_numbers(&m), BettiTriple { b0: 1, b1: 1, b2: 0 });
    }

    #[test]
    fn hollow_shell() {
        let m = BinaryMask::from_fn(Dims::cube(3), |z, y, x| !(z == 1 && y == 1 && x == 1));
        assert_eq!(euler_characteristic(&m), 2);
        assert_eq!(betti_numbers(&m), BettiTriple { b0: 1, b1: 0, b2: 1 });
    }

    #[test]
    fn shell_touching_grid_border_still_encloses() {
        // The grid border is not part of the complement's unbounded region
        // unless reachable through background; padding makes this explicit.
        let m = BinaryMask::from_fn(Dims::cube(5), |z, y, x| {
            let inside = |c: usize| (1..4).contains(&c);
            inside(z) && inside(y) && inside(x) && !(z == 2 && y == 2 && x == 2)
        });
        assert_eq!(cavity_count(&m), 1);
    }
}
