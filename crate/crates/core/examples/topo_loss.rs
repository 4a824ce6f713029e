//! Topological loss terms on a phantom and on corrupted predictions.
//!
//! cargo run --example topo_loss -- [seed]

use topoquant::grid::{Dims, LabelMask, LogitMap};
use topoquant::phantom::{generate_phantom, PhantomSpec};
use topoquant::topo_loss::{topo_loss, TopoLossWeights, TopoTarget};

fn report(name: &str, pred: &LabelMask, target: &TopoTarget, w: &TopoLossWeights) -> Result<(), Box<dyn std::error::Error>> {
    let r = topo_loss(&LogitMap::saturated(pred, 8.0), target, w)?;
    println!(
        "{name:<14} count {:.4}  adj {:.4}  hole {:.4}  total {:.4}",
        r.l_count, r.l_adj, r.l_hole, r.l_topo
    );
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let spec = PhantomSpec::fitted(4, Dims::cube(32), [5.0, 2.5, 2.5], 1.0, vec![2], seed)?;
    let phantom = generate_phantom(&spec)?;
    let gt = phantom.mask;
    let target = TopoTarget::new(&gt);
    let w = TopoLossWeights::default();
    println!("truth: {} teeth, adjacency {:?}, b1 {:?}", target.component_count(), target.adjacency().pairs(), target.tooth_b1());

    report("truth", &gt, &target, &w)?;

    // Relabel tooth 2 as tooth 1: one tooth fewer and a wrong contact.
    let merged: Vec<u16> = gt.labels().iter().map(|&l| if l == 2 { 1 } else { l }).collect();
    report("merged 1+2", &LabelMask::new(gt.dims(), merged, gt.num_classes())?, &target, &w)?;

    // Drop tooth 4 entirely.
    let missing: Vec<u16> = gt.labels().iter().map(|&l| if l == 4 { 0 } else { l }).collect();
    report("missing 4", &LabelMask::new(gt.dims(), missing, gt.num_classes())?, &target, &w)?;

    // Fill the tunnel of tooth 2: background voxels enclosed by it across x and z.
    let d = gt.dims();
    let filled: Vec<u16> = (0..d.len())
        .map(|i| if gt.labels()[i] == 0 && enclosed(&gt, i, 2) { 2 } else { gt.labels()[i] })
        .collect();
    report("filled hole", &LabelMask::new(d, filled, gt.num_classes())?, &target, &w)?;
    Ok(())
}

/// Whether `label` lies on both sides of voxel `i` along x and along z.
fn enclosed(mask: &LabelMask, i: usize, label: u16) -> bool {
    let d = mask.dims();
    let (z, y, x) = d.coords(i);
    let along_x = (0..x).any(|v| mask.get(z, y, v) == label) && (x + 1..d.width).any(|v| mask.get(z, y, v) == label);
    let along_z = (0..z).any(|v| mask.get(v, y, x) == label) && (z + 1..d.depth).any(|v| mask.get(v, y, x) == label);
    along_x && along_z
}
