use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topoquant::grid::{BinaryMask, Dims, Volume3D};
use topoquant::topology::{
    betti1_at_half, betti_numbers, connected_components, euler_characteristic, persistence,
    Connectivity,
};

/// Independent Euler characteristic: enumerate the closure of every
/// foreground cube as refined-grid cells and count distinct cells per dimension.
fn brute_force_chi(mask: &BinaryMask) -> i64 {
    let dims = mask.dims();
    let mut cells = HashSet::new();
    for z in 0..dims.depth {
        for y in 0..dims.height {
            for x in 0..dims.width {
                if !mask.get(z, y, x) {
                    continue;
                }
                for a in 0..3 {
                    for b in 0..3 {
                        for c in 0..3 {
                            cells.insert((2 * z + a, 2 * y + b, 2 * x + c));
                        }
                    }
                }
            }
        }
    }
    cells
        .iter()
        .map(|&(a, b, c)| {
            let dim = (a % 2) + (b % 2) + (c % 2);
            if dim % 2 == 0 {
                1
            } else {
                -1
            }
        })
        .sum()
}

fn random_mask(rng: &mut ChaCha8Rng, dims: Dims) -> BinaryMask {
    let density: f64 = rng.gen_range(0.15..0.85);
    BinaryMask::from_fn(dims, |_, _, _| rng.gen::<f64>() < density)
}

#[test]
fn euler_matches_brute_force_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..40 {
        let m = random_mask(&mut rng, Dims::new(5, 6, 7));
        assert_eq!(euler_characteristic(&m), brute_force_chi(&m));
    }
}

#[test]
fn euler_poincare_and_persistence_agree_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..60 {
        let m = random_mask(&mut rng, Dims::cube(8));
        let b = betti_numbers(&m);
        assert_eq!(b.b0 as i64 - b.b1 as i64 + b.b2 as i64, euler_characteristic(&m));
        let field = m.to_volume();
        let d = persistence(&field).unwrap();
        assert_eq!(d.betti_at(0, 0.5), b.b0);
        assert_eq!(d.betti_at(1, 0.5), b.b1);
        assert_eq!(betti1_at_half(&field).unwrap(), b.b1);
    }
}

#[test]
fn threshold_consistency_on_random_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let dims = Dims::cube(8);
        let field = Volume3D::from_fn(dims, |_, _, _| rng.gen::<f64>()).unwrap();
        let d = persistence(&field).unwrap();
        for i in 1..=9 {
            let t = i as f64 / 10.0;
            let mask = BinaryMask::new(dims, field.data().iter().map(|&p| 1.0 - p <= t).collect())
                .unwrap();
            let b = betti_numbers(&mask);
            assert_eq!(d.betti_at(0, t), b.b0, "b0 at t={t}");
            assert_eq!(d.betti_at(1, t), b.b1, "b1 at t={t}");
        }
        for p in d.pairs() {
            assert!(p.birth <= p.death);
            assert!((0.0..=1.0).contains(&p.birth));
            assert!(p.death.is_infinite() || (0.0..=1.0).contains(&p.death));
        }
        assert_eq!(d.in_dim(0).filter(|p| p.is_essential()).count(), 1);
        assert_eq!(d.in_dim(1).filter(|p| p.is_essential()).count(), 0);
    }
}

#[test]
fn labelling_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = random_mask(&mut rng, Dims::cube(10));
    let a = connected_components(&m, Connectivity::Full26);
    let b = connected_components(&m.clone(), Connectivity::Full26);
    assert_eq!(a, b);
}

#[test]
fn torus_and_shell_topology() {
    // Square annulus extruded through z is a solid torus: b1 = 1.
    let torus = BinaryMask::from_fn(Dims::new(4, 7, 7), |z, y, x| {
        (1..3).contains(&z) && (1..6).contains(&y) && (1..6).contains(&x) && !((2..5).contains(&y) && (2..5).contains(&x))
    });
    let b = betti_numbers(&torus);
    assert_eq!((b.b0, b.b1, b.b2), (1, 1, 0));
    let d = persistence(&torus.to_volume()).unwrap();
    assert_eq!(d.betti_at(1, 0.5), 1);

    // Two linked-free separate rings give b1 = 2.
    let rings = BinaryMask::from_fn(Dims::new(3, 5, 9), |z, y, x| {
        let ring = |ox: usize| (ox..ox + 3).contains(&x) && (1..4).contains(&y) && !(y == 2 && x == ox + 1);
        z == 1 && (ring(1) || ring(5))
    });
    assert_eq!(betti_numbers(&rings).b1, 2);
    assert_eq!(betti1_at_half(&rings.to_volume()).unwrap(), 2);
}
