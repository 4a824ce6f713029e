//! Segmentation and topology metrics for typical prediction errors.
//!
//! cargo run --example metrics

use topoquant::grid::{Dims, LabelMask};
use topoquant::metrics::{evaluate_scan, MetricsReport};
use topoquant::phantom::{generate_phantom, PhantomSpec};

fn relabel(mask: &LabelMask, f: impl Fn(u16) -> u16) -> LabelMask {
    let labels = mask.labels().iter().map(|&l| f(l)).collect();
    LabelMask::new(mask.dims(), labels, mask.num_classes()).expect("same shape")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = PhantomSpec::fitted(6, Dims::cube(40), [5.0, 2.5, 2.5], 1.0, vec![3], 11)?;
    let gt = generate_phantom(&spec)?.mask;

    // Shave the outermost x slab of every tooth.
    let d = gt.dims();
    let shaved: Vec<u16> = (0..d.len())
        .map(|i| {
            let (z, y, x) = d.coords(i);
            let l = gt.labels()[i];
            let edge = x + 1 < d.width && gt.get(z, y, x + 1) != l;
            if edge { 0 } else { l }
        })
        .collect();

    let cases = [
        ("identity", gt.clone()),
        ("shaved", LabelMask::new(d, shaved, gt.num_classes())?),
        ("merged 3+4", relabel(&gt, |l| if l == 4 { 3 } else { l })),
        ("swapped 1<->2", relabel(&gt, |l| match l { 1 => 2, 2 => 1, l => l })),
        ("missing 6", relabel(&gt, |l| if l == 6 { 0 } else { l })),
    ];
    println!("{:<14}{}", "", MetricsReport::COLUMNS.map(|c| format!("{c:>6}")).join(""));
    for (name, pred) in cases {
        let report = MetricsReport::aggregate(vec![evaluate_scan(name, &pred, &gt)?])?;
        let row: Vec<String> = report.row().iter().map(|v| format!("{:6.1}", 100.0 * v)).collect();
        println!("{name:<14}{}", row.join(""));
    }
    Ok(())
}
