use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;
use topoquant::grid::{BinaryMask, Dims, LabelMask, Volume3D};
use topoquant::phantom::{generate_phantom, PhantomError, PhantomSpec};
use topoquant::preprocess::{augment, normalize_intensity, Orientation};
use topoquant::topo_loss::extract_adjacency;
use topoquant::topology::{betti_numbers, connected_components, Connectivity};
use topoquant::volume_io::{decode, encode, read_volume, write_volume, VolumeGrid, VolumeIoError};

/// Nearest-instance adjacency by exhaustive distance evaluation.
fn brute_adjacency(mask: &LabelMask) -> BTreeSet<(u16, u16)> {
    let dims = mask.dims();
    let sites: Vec<(i64, i64, i64, u16)> = (0..dims.len())
        .filter(|&i| mask.labels()[i] != 0)
        .map(|i| {
            let (z, y, x) = dims.coords(i);
            (z as i64, y as i64, x as i64, mask.labels()[i])
        })
        .collect();
    let cell: Vec<u16> = (0..dims.len())
        .map(|i| {
            let (z, y, x) = dims.coords(i);
            let mut best = (i64::MAX, u16::MAX);
            for &(a, b, c, l) in &sites {
                let d = (a - z as i64).pow(2) + (b - y as i64).pow(2) + (c - x as i64).pow(2);
                if (d, l) < best {
                    best = (d, l);
                }
            }
            best.1
        })
        .collect();
    let mut out = BTreeSet::new();
    for i in 0..dims.len() {
        for (dz, dy, dx) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
            if let Some(j) = dims.offset(i, dz, dy, dx) {
                if cell[i] != cell[j] {
                    out.insert((cell[i].min(cell[j]), cell[i].max(cell[j])));
                }
            }
        }
    }
    out
}

fn brute_chi(mask: &BinaryMask) -> i64 {
    let d = mask.dims();
    let mut cells = HashSet::new();
    for i in 0..d.len() {
        if mask.bits()[i] {
            let (z, y, x) = d.coords(i);
            for a in 0..3 {
                for b in 0..3 {
                    for c in 0..3 {
                        cells.insert((2 * z + a, 2 * y + b, 2 * x + c));
                    }
                }
            }
        }
    }
    cells
        .iter()
        .map(|&(a, b, c)| if (a % 2 + b % 2 + c % 2) % 2 == 0 { 1 } else { -1 })
        .sum()
}

#[test]
fn eight_tooth_dentition_is_a_chain() {
    let spec = PhantomSpec::fitted(8, Dims::cube(64), [8.0, 2.5, 2.5], 2.0, vec![], 42).unwrap();
    let p = generate_phantom(&spec).unwrap();
    let fg = p.mask.foreground();
    assert_eq!(connected_components(&fg, Connectivity::Full26).count, 8);
    assert_eq!(p.mask.present_labels(), (1..=8).collect::<Vec<u16>>());
    let adj = extract_adjacency(&p.mask).unwrap();
    assert_eq!(adj.pairs(), (1..8).map(|i| (i, i + 1)).collect::<Vec<_>>());
}

#[test]
fn voronoi_adjacency_matches_brute_force() {
    let spec = PhantomSpec::fitted(4, Dims::cube(24), [4.0, 2.0, 2.0], 1.0, vec![2], 5).unwrap();
    let p = generate_phantom(&spec).unwrap();
    let brute = brute_adjacency(&p.mask);
    assert_eq!(extract_adjacency(&p.mask).unwrap().pairs(), brute.into_iter().collect::<Vec<_>>());
}

#[test]
fn single_holed_tooth_has_one_tunnel() {
    let spec = PhantomSpec::fitted(1, Dims::cube(16), [5.0, 3.0, 3.0], 2.0, vec![1], 0).unwrap();
    let p = generate_phantom(&spec).unwrap();
    let tooth = p.mask.class_mask(1);
    let b0 = connected_components(&tooth, Connectivity::Full26).count as i64;
    let b2 = betti_numbers(&tooth).b2 as i64;
    assert_eq!((b0, b2), (1, 0));
    assert_eq!(b0 + b2 - brute_chi(&tooth), 1);
}

#[test]
fn zero_teeth_is_rejected() {
    let mut spec = PhantomSpec::fitted(2, Dims::cube(24), [4.0, 2.0, 2.0], 1.0, vec![], 0).unwrap();
    spec.tooth_count = 0;
    spec.semi_axes.clear();
    assert_eq!(generate_phantom(&spec).unwrap_err(), PhantomError::NoTeeth);
}

#[test]
fn phantom_intensity_is_contrast_plus_noise() {
    let mut spec = PhantomSpec::fitted(2, Dims::cube(20), [4.0, 2.0, 2.0], 1.0, vec![], 3).unwrap();
    spec.noise_sigma = 0.0;
    spec.contrast = 2.5;
    let p = generate_phantom(&spec).unwrap();
    for (v, &l) in p.volume.data().iter().zip(p.mask.labels()) {
        assert_eq!(*v, if l == 0 { 0.0 } else { 2.5 });
    }
    spec.noise_sigma = 0.2;
    let noisy = generate_phantom(&spec).unwrap();
    let resid: Vec<f64> = noisy
        .volume
        .data()
        .iter()
        .zip(p.volume.data())
        .map(|(a, b)| a - b)
        .collect();
    let sd = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
    assert!((sd - 0.2).abs() < 0.01, "noise sd {sd}");
}

#[test]
fn every_orientation_preserves_topology() {
    let spec = PhantomSpec::fitted(4, Dims::new(20, 24, 28), [4.0, 2.0, 2.0], 1.0, vec![3], 8).unwrap();
    let p = generate_phantom(&spec).unwrap();
    let summary = |m: &LabelMask| {
        let count = connected_components(&m.foreground(), Connectivity::Full26).count;
        let adj = extract_adjacency(m).unwrap().len();
        let b1: usize = (1..=m.num_classes()).map(|k| betti_numbers(&m.class_mask(k)).b1).sum();
        (count, adj, b1)
    };
    let reference = summary(&p.mask);
    assert_eq!(reference, (4, 3, 1));
    for o in Orientation::all() {
        let m = o.apply_mask(&p.mask);
        assert_eq!(summary(&m), reference, "{o:?}");
        assert_eq!(m.present_labels(), p.mask.present_labels());
    }
}

#[test]
fn augment_is_seeded_and_identity_is_a_noop() {
    let spec = PhantomSpec::fitted(2, Dims::cube(20), [4.0, 2.0, 2.0], 1.0, vec![], 1).unwrap();
    let p = generate_phantom(&spec).unwrap();
    let a = augment(&p.volume, &p.mask, 77).unwrap();
    let b = augment(&p.volume, &p.mask, 77).unwrap();
    assert_eq!(a, b);
    assert_eq!(Orientation::IDENTITY.apply_volume(&p.volume), p.volume);
    assert_eq!(Orientation::IDENTITY.apply_mask(&p.mask), p.mask);
    let other = LabelMask::background(Dims::cube(3), 1);
    assert!(augment(&p.volume, &other, 0).is_err());
}

#[test]
fn volume_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec::fitted(3, Dims::cube(20), [4.0, 2.0, 2.0], 1.0, vec![2], 4).unwrap();
    let p = generate_phantom(&spec).unwrap();
    let vpath = dir.path().join("scan.tqvx");
    let mpath = dir.path().join("mask.tqvx");
    write_volume(&vpath, &p.volume.clone().into()).unwrap();
    write_volume(&mpath, &p.mask.clone().into()).unwrap();
    let v = read_volume(&vpath).unwrap().into_scalar().unwrap();
    let bits = |x: &Volume3D| x.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&v), bits(&p.volume));
    assert_eq!(read_volume(&mpath).unwrap().into_labels().unwrap(), p.mask);
    assert!(matches!(
        read_volume(&vpath).unwrap().into_labels(),
        Err(VolumeIoError::WrongKind { .. })
    ));
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 2, "no temporary files left behind");
}

#[test]
fn declared_dims_beyond_payload_is_truncation() {
    let mut bytes = encode(&VolumeGrid::Scalar(Volume3D::zeros(Dims::cube(2))));
    bytes[13] = 3;
    assert!(matches!(decode(&bytes), Err(VolumeIoError::Truncated { .. })));
}

fn finite_volume() -> impl Strategy<Value = Volume3D> {
    (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(d, h, w)| {
        proptest::collection::vec(-1e6f64..1e6, d * h * w)
            .prop_map(move |data| Volume3D::new(Dims::new(d, h, w), data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scalar_round_trip_is_bit_exact(v in finite_volume()) {
        let back = decode(&encode(&v.clone().into())).unwrap().into_scalar().unwrap();
        prop_assert_eq!(
            back.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn label_round_trip(labels in proptest::collection::vec(0u16..6, 27)) {
        let m = LabelMask::new(Dims::cube(3), labels, 5).unwrap();
        prop_assert_eq!(decode(&encode(&m.clone().into())).unwrap().into_labels().unwrap(), m);
    }

    #[test]
    fn normalisation_is_standard_and_idempotent(v in finite_volume()) {
        let once = normalize_intensity(&v);
        prop_assume!(!once.constant_input);
        let d = once.volume.data();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-6);
        prop_assert!((sd - 1.0).abs() < 1e-6);
        let twice = normalize_intensity(&once.volume);
        for (a, b) in twice.volume.data().iter().zip(d) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
