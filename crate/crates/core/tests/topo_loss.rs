use proptest::prelude::*;
use topoquant::grid::{BinaryMask, Dims, LabelMask, LogitMap, ProbMap, Volume3D};
use topoquant::phantom::{generate_phantom, Phantom, PhantomSpec};
use topoquant::topo_loss::{
    adjacency_loss, boundary_neighbourhood, count_loss, extract_adjacency, hole_loss, soft_betti1, soft_boundary,
    soft_cc_count, soft_threshold, topo_loss, TopoLossWeights, TopoTarget,
};
use topoquant::topology::{connected_components, Connectivity};

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn phantom(k: u16, holed: Vec<u16>) -> Phantom {
    let spec = PhantomSpec::fitted(k, Dims::cube(24), [5.0, 2.5, 2.5], 1.0, holed, 3).unwrap();
    generate_phantom(&spec).unwrap()
}

fn blocks(dims: Dims, boxes: &[([usize; 3], [usize; 3], u16)], classes: u16) -> LabelMask {
    let mut labels = vec![0u16; dims.len()];
    for &(lo, hi, l) in boxes {
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    labels[dims.index(z, y, x)] = l;
                }
            }
        }
    }
    LabelMask::new(dims, labels, classes).unwrap()
}

#[test]
fn soft_threshold_midpoint_and_four_widths() {
    let tau = 0.05;
    let out = soft_threshold(&[0.3, 0.3 + 4.0 * tau], 0.3, tau).unwrap();
    assert_eq!(out[0], 0.5);
    assert!((out[1] - logistic(4.0)).abs() < 1e-12);
    assert!((out[1] - 0.98201).abs() < 1e-5);
    let sharp = soft_threshold(&[0.2, 0.4], 0.3, 1e-4).unwrap();
    assert!(sharp[0] < 1e-12 && sharp[1] > 1.0 - 1e-12);
}

#[test]
fn soft_counts_on_hard_and_constant_fields() {
    let dims = Dims::cube(12);
    let three = blocks(
        dims,
        &[([1, 1, 1], [3, 3, 3], 1), ([6, 6, 6], [8, 8, 8], 1), ([1, 8, 1], [4, 11, 4], 1)],
        1,
    );
    assert_eq!(soft_cc_count(&three.foreground().to_volume(), 0.1).unwrap().value, 3.0);

    let blob = blocks(dims, &[([3, 3, 3], [7, 7, 7], 1)], 1);
    let field = Volume3D::new(dims, blob.labels().iter().map(|&l| if l > 0 { 0.6 } else { 0.0 }).collect()).unwrap();
    let v = soft_cc_count(&field, 0.1).unwrap().value;
    assert!((v - 0.6).abs() < 1e-12, "{v}");

    let zero = soft_cc_count(&Volume3D::zeros(dims), 0.1).unwrap();
    assert_eq!(zero.value, 0.0);
    assert!(zero.grad.iter().all(|&g| g == 0.0));
}

#[test]
fn count_loss_identity_arithmetic_and_sign_flip() {
    let dims = Dims::cube(12);
    let gt = blocks(dims, &[([1, 1, 1], [4, 4, 4], 1), ([7, 7, 7], [10, 10, 10], 2)], 2);
    let target = TopoTarget::new(&gt);
    assert_eq!(count_loss(&ProbMap::one_hot(&gt), &target, 0.1).unwrap().value, 0.0);

    let first = ([1, 1, 1], [4, 4, 4], 1);
    let over = blocks(dims, &[first, ([7, 7, 7], [10, 10, 10], 2), ([1, 8, 1], [3, 11, 3], 1)], 2);
    let under = blocks(dims, &[first], 2);
    let hi = count_loss(&ProbMap::one_hot(&over), &target, 0.1).unwrap();
    let lo = count_loss(&ProbMap::one_hot(&under), &target, 0.1).unwrap();
    assert_eq!(hi.value, 1.0);
    assert_eq!(lo.value, 1.0);
    // The first block's peak is its lowest-index voxel in both predictions.
    let peak = dims.index(1, 1, 1);
    assert!(hi.grad[peak] != 0.0);
    assert_eq!(hi.grad[peak].signum(), -lo.grad[peak].signum());
}

#[test]
fn adjacency_extraction_on_phantoms() {
    let chain = phantom(3, vec![]);
    assert_eq!(extract_adjacency(&chain.mask).unwrap().pairs(), vec![(1, 2), (2, 3)]);
    let single = phantom(1, vec![]);
    assert!(extract_adjacency(&single.mask).unwrap().is_empty());
}

#[test]
fn soft_boundary_product_and_masking() {
    let dims = Dims::new(1, 1, 2);
    let mut nb = BinaryMask::empty(dims);
    nb.set(0, 0, 0, true);
    let out = soft_boundary(&[4.0, 4.0], &[4.0, 4.0], &nb, 1.0).unwrap();
    assert!((out[0] - logistic(4.0).powi(2)).abs() < 1e-12);
    assert!((out[0] - 0.96436).abs() < 1e-5);
    assert_eq!(out[1], 0.0);
    let gone = soft_boundary(&[4.0, 0.0], &[-800.0, 0.0], &nb, 1.0).unwrap();
    assert_eq!(gone[0], 0.0);
}

#[test]
fn adjacency_loss_saturated_and_single() {
    let p = phantom(2, vec![]);
    let boundary = boundary_neighbourhood(&p.mask).count() as f64;
    let good = adjacency_loss(&LogitMap::saturated(&p.mask, 8.0), &p.mask, 1.0).unwrap();
    assert!(good.value / boundary < 0.01, "{}", good.value / boundary);

    let one = phantom(1, vec![]);
    let lone = adjacency_loss(&LogitMap::saturated(&one.mask, 8.0), &one.mask, 1.0).unwrap();
    assert_eq!(lone.value, 0.0);
}

#[test]
fn merging_touching_teeth_raises_adjacency_loss() {
    // Generated teeth never share a face, so use two touching boxes.
    let dims = Dims::cube(8);
    let gt = blocks(dims, &[([2, 2, 1], [6, 6, 4], 1), ([2, 2, 4], [6, 6, 7], 2)], 2);
    let merged = blocks(dims, &[([2, 2, 1], [6, 6, 7], 1)], 2);
    let good = adjacency_loss(&LogitMap::saturated(&gt, 8.0), &gt, 1.0).unwrap();
    let bad = adjacency_loss(&LogitMap::saturated(&merged, 8.0), &gt, 1.0).unwrap();
    let contact_faces = 16.0;
    let per_face = 1.0 - logistic(8.0).powi(2);
    assert!(good.value / contact_faces < 0.01);
    assert!(good.value >= contact_faces * per_face);
    assert!(bad.value > good.value + contact_faces * 0.9);
}

/// An 8-voxel ring in a 5x5x3 box: ring voxels at `ring`, the centre at `centre`.
fn ring_field(ring: f64, centre: f64) -> Volume3D {
    Volume3D::from_fn(Dims::new(3, 5, 5), |z, y, x| {
        let inner = z == 1 && (1..=3).contains(&y) && (1..=3).contains(&x);
        match (inner, y == 2 && x == 2) {
            (true, true) => centre,
            (true, false) => ring,
            _ => 0.0,
        }
    })
    .unwrap()
}

#[test]
fn soft_betti1_of_rings_and_blobs() {
    let s5 = logistic(5.0);
    let ring = soft_betti1(&ring_field(1.0, 0.0), 0.1).unwrap().value;
    assert!((ring - s5 * s5).abs() < 1e-12, "{ring}");
    let partial = soft_betti1(&ring_field(0.8, 0.2), 0.1).unwrap().value;
    assert!((partial - logistic(3.0).powi(2)).abs() < 1e-12, "{partial}");
    let blob = soft_betti1(&ring_field(1.0, 1.0), 0.1).unwrap();
    assert_eq!(blob.value, 0.0);
}

#[test]
fn hole_loss_residual_and_spurious_tunnel() {
    let clean = phantom(3, vec![]);
    let target = TopoTarget::new(&clean.mask);
    let base = hole_loss(&ProbMap::one_hot(&clean.mask), &target, 0.1).unwrap().value;
    assert!(base < 3.0 * 0.02, "{base}");

    let holed = phantom(3, vec![2]);
    let with_tunnel = hole_loss(&ProbMap::one_hot(&holed.mask), &target, 0.1).unwrap().value;
    let increase = with_tunnel - base;
    assert!(increase > 0.5 && increase <= 1.0, "{increase}");

    let empty = LabelMask::background(Dims::cube(4), 0);
    let none = hole_loss(&ProbMap::one_hot(&empty), &TopoTarget::new(&empty), 0.1).unwrap();
    assert_eq!(none.value, 0.0);
}

#[test]
fn combined_loss_zero_weights_and_saturated_truth() {
    let p = phantom(3, vec![1]);
    let target = TopoTarget::new(&p.mask);
    let logits = LogitMap::saturated(&p.mask, 8.0);
    let off = TopoLossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        ..TopoLossWeights::default()
    };
    let r = topo_loss(&logits, &target, &off).unwrap();
    assert_eq!(r.l_topo, 0.0);
    assert!(r.grad.iter().all(|&g| g == 0.0));

    let r = topo_loss(&logits, &target, &TopoLossWeights::default()).unwrap();
    let boundary = boundary_neighbourhood(&p.mask).count() as f64;
    assert_eq!(r.l_count, 0.0);
    assert!(r.l_adj < 0.01 * boundary);
    assert!(r.l_hole < 3.0 * 0.02);
}

fn random_labels(dims: Dims, classes: u16) -> impl Strategy<Value = LabelMask> {
    proptest::collection::vec(prop_oneof![3 => Just(0u16), 2 => 1..=classes], dims.len())
        .prop_map(move |l| LabelMask::new(dims, l, classes).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_masks_have_integer_soft_counts(mask in random_labels(Dims::cube(6), 1)) {
        let fg = mask.foreground();
        let soft = soft_cc_count(&fg.to_volume(), 0.1).unwrap().value;
        prop_assert_eq!(soft, connected_components(&fg, Connectivity::Full26).count as f64);
    }

    #[test]
    fn count_and_hole_terms_ignore_label_permutation(
        mask in random_labels(Dims::cube(6), 3),
        perm in Just(vec![1u16, 2, 3]).prop_shuffle(),
    ) {
        let map: Vec<u16> = std::iter::once(0).chain(perm.iter().copied()).collect();
        let relabelled: Vec<u16> = mask.labels().iter().map(|&l| map[l as usize]).collect();
        let permuted = LabelMask::new(mask.dims(), relabelled, 3).unwrap();
        let (a, b) = (TopoTarget::new(&mask), TopoTarget::new(&permuted));
        let (pa, pb) = (ProbMap::one_hot(&mask), ProbMap::one_hot(&permuted));
        prop_assert_eq!(count_loss(&pa, &a, 0.1).unwrap().value, count_loss(&pb, &b, 0.1).unwrap().value);
        let (ha, hb) = (hole_loss(&pa, &a, 0.1).unwrap().value, hole_loss(&pb, &b, 0.1).unwrap().value);
        prop_assert!((ha - hb).abs() < 1e-12);
    }
}
