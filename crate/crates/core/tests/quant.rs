use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topoquant::grid::Dims;
use topoquant::nn::Tape;
use topoquant::quant::{
    integer_reference_conv, quant_loss, quantize, quantize_scalar, ste_backward, to_int8, QuantScheme, RangeCalibrator,
    MIN_SCALE, QMAX,
};

#[test]
fn rounding_and_clamp_examples() {
    let s = QuantScheme::per_tensor(0.1);
    let q = quantize(&[0.37, -0.25, 100.0, -100.0], &s).unwrap();
    let want = [0.4, -0.3, 12.7, -12.7];
    for (a, b) in q.iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn straight_through_masks_saturated_inputs() {
    let s = QuantScheme::per_tensor(0.1);
    let x = [0.5, 12.7, 12.71, -30.0, -1.0];
    let g = ste_backward(&[1.0, 2.0, 3.0, 4.0, 5.0], &x, &s).unwrap();
    assert_eq!(g, vec![1.0, 2.0, 0.0, 0.0, 5.0]);
}

#[test]
fn calibrator_recurrence_and_limits() {
    let mut c = RangeCalibrator::new(0.99).unwrap();
    c.update(&[1.0, -0.5]);
    c.update(&[0.0, -2.0]);
    let by_hand = 0.99 * (0.99 * 0.0 + 0.01 * 1.0) + 0.01 * 2.0;
    assert!((c.running_absmax - by_hand).abs() < 1e-15);
    assert!((c.running_absmax - 0.0299).abs() < 1e-12);

    let mut steady = RangeCalibrator::new(0.99).unwrap();
    for _ in 0..5000 {
        steady.update(&[1.27]);
    }
    assert!((steady.running_absmax / QMAX - 0.01).abs() < 1e-12);
    assert!((steady.finalize().scales[0] - 0.01).abs() < 1e-12);

    let mut zero = RangeCalibrator::new(0.99).unwrap();
    zero.update(&[0.0; 4]);
    let s = zero.finalize();
    assert_eq!(s.scales, vec![MIN_SCALE]);
    assert_eq!(quantize(&[0.0, 0.0], &s).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn quant_loss_examples() {
    let on_grid = [0.3, -0.7, 1.2];
    let q = quantize(&on_grid, &QuantScheme::per_tensor(0.1)).unwrap();
    let (v, _) = quant_loss(&[(&q, &q)]).unwrap();
    assert_eq!(v, 0.0);

    let w = [0.37];
    let qw = [quantize_scalar(0.37, 0.1)];
    let (v, g) = quant_loss(&[(&w, &qw)]).unwrap();
    assert!((v - 0.0009).abs() < 1e-15);
    assert!((g[0][0] + 0.06).abs() < 1e-12);
}

/// Float convolution of dequantised operands through the autodiff tape.
fn float_conv(xq: &[i8], sx: f64, dims: Dims, cin: usize, wq: &[i8], sw: &[f64], bias: &[f64]) -> Vec<f64> {
    let per = wq.len() / sw.len();
    let x: Vec<f64> = xq.iter().map(|&v| v as f64 * sx).collect();
    let w: Vec<f64> = wq.iter().enumerate().map(|(i, &v)| v as f64 * sw[i / per]).collect();
    let mut tape = Tape::new();
    let (x, w, b) = (tape.leaf(x), tape.leaf(w), tape.leaf(bias.to_vec()));
    let y = tape.conv3d(x, w, b, cin, dims);
    tape.value(y).to_vec()
}

#[test]
fn single_tap_kernel_is_exact() {
    let dims = Dims::cube(3);
    let xq: Vec<i8> = (0..27).map(|i| (i as i8 - 13) * 9).collect();
    let mut wq = vec![0i8; 27];
    wq[13] = -77;
    let (sx, sw) = (0.25, [0.125]);
    let int = integer_reference_conv(&xq, sx, [3, 3, 3], 1, &wq, &sw, &[0.0]).unwrap();
    assert_eq!(int, float_conv(&xq, sx, dims, 1, &wq, &sw, &[0.0]));
}

#[test]
fn zero_weights_give_zero_output() {
    let xq = vec![100i8; 2 * 64];
    let out = integer_reference_conv(&xq, 0.1, [4, 4, 4], 2, &vec![0; 3 * 2 * 27], &[0.1, 0.2, 0.3], &[0.0; 3]).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn integer_path_matches_float_path_on_random_volumes() {
    let dims = Dims::cube(8);
    let (cin, cout) = (2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f64> = (0..cin * dims.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let w: Vec<f64> = (0..cout * cin * 27).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let sx = x.iter().fold(0.0f64, |m, v| m.max(v.abs())) / QMAX;
    let scheme = QuantScheme::from_weights(&w, cout);
    let wq: Vec<i8> = w
        .iter()
        .enumerate()
        .map(|(i, &v)| to_int8(&[v], scheme.scale_at(i, w.len()))[0])
        .collect();
    let bias = [0.1, -0.2, 0.3];
    let xq = to_int8(&x, sx);
    let int = integer_reference_conv(&xq, sx, dims.as_array(), cin, &wq, &scheme.scales, &bias).unwrap();
    let flt = float_conv(&xq, sx, dims, cin, &wq, &scheme.scales, &bias);
    let worst = int.iter().zip(&flt).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-10, "{worst}");
}

proptest! {
    #[test]
    fn quantiser_properties(x in -1e3f64..1e3, s in 1e-4f64..10.0) {
        let q = quantize_scalar(x, s);
        prop_assert_eq!(quantize_scalar(q, s), q);
        prop_assert_eq!(quantize_scalar(-x, s), -q);
        prop_assert!(q.abs() <= QMAX * s * (1.0 + 1e-15));
        if (x / s).abs() <= QMAX {
            prop_assert!((x - q).abs() <= s / 2.0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn per_channel_scales_cover_each_channel(w in proptest::collection::vec(-5.0f64..5.0, 54)) {
        let scheme = QuantScheme::from_weights(&w, 2);
        let q = quantize(&w, &scheme).unwrap();
        for (i, (a, b)) in w.iter().zip(&q).enumerate() {
            let s = scheme.scale_at(i, w.len());
            prop_assert!((a - b).abs() <= s / 2.0 * (1.0 + 1e-12));
        }
    }
}
