//! Persistence diagram of a noisy ring, checked against the Euler oracle.
//!
//! cargo run --example persistence -- [size] [seed]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topoquant::grid::{Dims, Volume3D};
use topoquant::topology::{betti_numbers, cavity_count, euler_characteristic, persistence};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let size: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(16);
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // A thick ring in the z = mid plane, plus noise that creates short-lived features.
    let c = (size as f64 - 1.0) / 2.0;
    let r = size as f64 / 4.0;
    let field = Volume3D::from_fn(Dims::cube(size), |z, y, x| {
        let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
        let ring: f64 = if (d - r).abs() <= 1.5 && (z as f64 - c).abs() <= 1.5 { 0.9 } else { 0.1 };
        (ring + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0)
    })?;

    let diagram = persistence(&field)?;
    let mut long: Vec<_> = diagram.pairs().iter().filter(|p| p.persistence() > 0.3).collect();
    long.sort_by(|a, b| b.persistence().total_cmp(&a.persistence()));
    println!("{} pairs, {} with persistence > 0.3:", diagram.pairs().len(), long.len());
    for p in long {
        println!("  dim {} born {:.3} dies {:.3}", p.dim, p.birth, p.death);
    }

    let mask = field.threshold(0.5);
    let oracle = betti_numbers(&mask);
    println!(
        "at 0.5: persistence b0 {} b1 {}, oracle b0 {} b1 {} b2 {}, cavities {}, chi {}",
        diagram.betti_at(0, 0.5),
        diagram.betti_at(1, 0.5),
        oracle.b0,
        oracle.b1,
        oracle.b2,
        cavity_count(&mask),
        euler_characteristic(&mask)
    );
    Ok(())
}
