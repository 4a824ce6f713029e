//! Generate a synthetic dentition and print its ground-truth topology.
//!
//! cargo run --example phantom -- [size] [teeth] [gap] [seed]

use std::time::Instant;

use topoquant::grid::Dims;
use topoquant::phantom::{generate_phantom, PhantomSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let size = arg(0, 48.0) as usize;
    let teeth = arg(1, 8.0) as u16;
    let gap = arg(2, 1.0);
    let seed = arg(3, 42.0) as u64;

    let start = Instant::now();
    let spec = PhantomSpec::fitted(teeth, Dims::cube(size), [size as f64 / 8.0, 2.5, 2.5], gap, vec![teeth.div_ceil(2)], seed)?;
    println!(
        "arc centre ({:.2}, {:.2}), radius {:.2}, fitted in {:?}",
        spec.arc_center[0],
        spec.arc_center[1],
        spec.arc_radius,
        start.elapsed()
    );
    let start = Instant::now();
    let phantom = generate_phantom(&spec)?;
    println!("generated and verified in {:?}", start.elapsed());
    println!("adjacency: {:?}", phantom.adjacency.pairs());
    println!("per-tooth b1: {:?}", phantom.tooth_b1);
    for (label, t) in spec.layout()?.iter().enumerate() {
        let voxels = phantom.mask.labels().iter().filter(|&&l| l as usize == label + 1).count();
        println!(
            "tooth {}: centre ({:.1}, {:.1}, {:.1}), {voxels} voxels",
            t.label, t.center[0], t.center[1], t.center[2]
        );
    }
    Ok(())
}
