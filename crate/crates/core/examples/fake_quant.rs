//! Fake quantisation, straight-through gradients, calibration and the
//! integer reference convolution.
//!
//! cargo run --example fake_quant

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topoquant::grid::Dims;
use topoquant::nn::Tape;
use topoquant::quant::{
    integer_reference_conv, quant_loss, quantize, ste_backward, to_int8, QuantScheme, RangeCalibrator, QMAX,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scheme = QuantScheme::per_tensor(0.1);
    let x = [0.37, -0.25, 3.0, 12.9, -40.0];
    let q = quantize(&x, &scheme)?;
    let g = ste_backward(&[1.0; 5], &x, &scheme)?;
    println!("x      {x:?}\nQ(x)   {q:?}\nSTE    {g:?}");
    let (l, _) = quant_loss(&[(&x, &q)])?;
    println!("quant loss {l:.4}");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cal = RangeCalibrator::new(0.99)?;
    for step in 1..=500 {
        let batch: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
        cal.update(&batch);
        if step % 100 == 0 {
            println!("step {step}: activation scale {:.5}", cal.finalize().scales[0]);
        }
    }

    // Per-channel weights, then the integer path against the float path.
    let dims = Dims::cube(8);
    let (cin, cout) = (2, 3);
    let xs: Vec<f64> = (0..cin * dims.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let w: Vec<f64> = (0..cout * cin * 27).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let b = vec![0.05, -0.1, 0.2];
    let sx = xs.iter().fold(0.0f64, |m, v| m.max(v.abs())) / QMAX;
    let ws = QuantScheme::from_weights(&w, cout);
    println!("per-channel weight scales {:?}", ws.scales);
    let wi: Vec<i8> = w.iter().enumerate().map(|(i, &v)| to_int8(&[v], ws.scale_at(i, w.len()))[0]).collect();
    let int = integer_reference_conv(&to_int8(&xs, sx), sx, dims.as_array(), cin, &wi, &ws.scales, &b)?;

    let mut tape = Tape::new();
    let xv = tape.leaf(quantize(&xs, &QuantScheme::per_tensor(sx))?);
    let wv = tape.leaf(quantize(&w, &ws)?);
    let bv = tape.leaf(b.clone());
    let y = tape.conv3d(xv, wv, bv, cin, dims);
    let worst = int.iter().zip(tape.value(y)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("integer vs fake-quant convolution: max abs difference {worst:.2e}");
    Ok(())
}
