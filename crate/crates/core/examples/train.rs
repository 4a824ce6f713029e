//! Train the segmenter on small phantoms and evaluate it on held-out scans.
//!
//! cargo run --example train -- [mode] [steps]

use std::time::Instant;

use topoquant::experiment::{evaluate_net, load_dataset, gen_phantoms, train_mode, ExperimentConfig, Mode};
use topoquant::nn::{encode_checkpoint, WeightEncoding};

const CONFIG: &str = r#"{
  "schema_version": 1,
  "seed": 5,
  "dataset": {"train": 6, "test": 3, "tooth_count": 3, "size": [24, 24, 24], "semi_axes": [5.0, 2.5, 2.5]},
  "net": {"hidden_widths": [4, 8]},
  "train": {"lr": 0.01, "batch_size": 1, "val_scans": 1, "init_output_prior": true}
}"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode: Mode = args.first().map(|s| s.parse()).transpose()?.unwrap_or(Mode::QatTopo);
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(60);

    let mut cfg = ExperimentConfig::from_json(CONFIG)?;
    cfg.train.max_steps = Some(steps);
    let dir = tempfile::tempdir()?;
    gen_phantoms(&cfg, dir.path(), false)?;
    let (train_scans, test_scans) = load_dataset(&cfg, dir.path())?;

    let start = Instant::now();
    let run = train_mode(&cfg, mode, &train_scans)?;
    println!("{mode}: {} steps in {:.1?}", run.outcome.steps, start.elapsed());
    for r in &run.outcome.log {
        println!(
            "  epoch {:>3}  ce {:.4}  quant {:9.3}  topo {:.4}  val dice {:.3}",
            r.epoch, r.l_ce, r.l_quant, r.l_topo, r.val_dice
        );
    }
    let report = evaluate_net(&run.net, &test_scans)?;
    print!("{}", report.to_table());
    println!(
        "checkpoint: {} bytes as f64, {} bytes as int8",
        encode_checkpoint(&run.net, WeightEncoding::F64).len(),
        encode_checkpoint(&run.net, WeightEncoding::Int8).len()
    );
    Ok(())
}
