//! Compare every training mode on a small phantom benchmark.
//!
//! cargo run --example ablation -- [steps]

use topoquant::experiment::{ablate, scans_from_specs, ExperimentConfig, Mode};

const CONFIG: &str = r#"{
  "schema_version": 1,
  "seed": 9,
  "dataset": {"train": 6, "test": 4, "tooth_count": 3, "size": [24, 24, 24], "semi_axes": [5.0, 2.5, 2.5]},
  "net": {"hidden_widths": [4, 8]},
  "train": {"lr": 0.01, "batch_size": 1, "val_scans": 1, "init_output_prior": true}
}"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let mut cfg = ExperimentConfig::from_json(CONFIG)?;
    cfg.train.max_steps = Some(steps);
    cfg.train.topo_warmup_steps = steps / 2;
    let (train_specs, test_specs) = cfg.dataset.resolve(cfg.seed)?;
    let train = scans_from_specs(&train_specs, "train")?;
    let test = scans_from_specs(&test_specs, "test")?;
    let report = ablate(&cfg, &Mode::ALL, &train, &test, None)?;
    print!("{}", report.to_table());
    match report.check_direction() {
        Ok(summary) => println!("direction holds: {summary}"),
        Err(e) => println!("{e}"),
    }
    Ok(())
}
