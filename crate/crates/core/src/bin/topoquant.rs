use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use topoquant::experiment::{
    ablate_cmd, bench_cmd, ensure_gradients_pass, eval_cmd, gen_phantoms, gradcheck_cmd, train_cmd, ExperimentConfig,
    ExperimentError, Mode, BENCH_RUNS,
};
use topoquant::gradcheck::{GradcheckOptions, Term};

#[derive(Parser)]
#[command(name = "topoquant", version, about = "Topology-aware quantised segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON). Defaults to the built-in benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, ExperimentError> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let cfg = match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved config as JSON.
    PrintConfig {
        #[command(flatten)]
        common: Common,
    },
    /// Generate the phantom dataset and its manifest.
    GenPhantoms {
        #[command(flatten)]
        common: Common,
        /// Dataset directory [default: <output_dir>/data].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train one mode and write a checkpoint and log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// float, qat, qat+count, qat+adj, qat+hole or qat+topo.
        #[arg(long)]
        mode: String,
        /// Run directory [default: <output_dir>/<mode>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        /// Omit to score the ground truth against itself.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score several modes.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated modes [default: all].
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        /// [default: <output_dir>/ablation]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fail (exit 3) unless qat+topo matches or beats qat on TCA, ACS and CER.
        #[arg(long)]
        assert_direction: bool,
    },
    /// Finite-difference checks of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Comma-separated terms [default: all].
        #[arg(long, value_delimiter = ',')]
        terms: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Test hook: corrupt one term's gradient.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Inference timing and checkpoint sizes.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = BENCH_RUNS)]
        runs: usize,
    },
}

fn parse_term(s: &str) -> Result<Term, ExperimentError> {
    Term::parse(s).ok_or_else(|| ExperimentError::Usage(format!("unknown gradient term {s:?}")))
}

fn default_dir(cfg: &ExperimentConfig, given: Option<PathBuf>, leaf: &str) -> PathBuf {
    given.unwrap_or_else(|| cfg.output_dir.join(leaf))
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::PrintConfig { common } => {
            println!("{}", serde_json::to_string_pretty(&common.resolve()?)?);
        }
        Command::GenPhantoms { common, out, force } => {
            let cfg = common.resolve()?;
            let out = default_dir(&cfg, out, "data");
            let manifest = gen_phantoms(&cfg, &out, force)?;
            println!("wrote {} scans to {}", manifest.scans.len(), out.display());
        }
        Command::Train {
            common,
            data,
            mode,
            out,
        } => {
            let cfg = common.resolve()?;
            let mode: Mode = mode.parse()?;
            let out = default_dir(&cfg, out, mode.name());
            let run = train_cmd(&cfg, &data, mode, &out)?;
            if let Some(last) = run.outcome.log.last() {
                println!(
                    "{mode}: {} steps, ce {:.4}, val dice {:.4}; outputs in {}",
                    run.outcome.steps,
                    last.l_ce,
                    last.val_dice,
                    out.display()
                );
            }
        }
        Command::Eval { checkpoint, data, out } => {
            let result = eval_cmd(checkpoint.as_deref(), &data, &out)?;
            print!("{}", result.report.to_table());
        }
        Command::Ablate {
            common,
            data,
            modes,
            out,
            assert_direction,
        } => {
            let cfg = common.resolve()?;
            let modes = modes.iter().map(|m| m.parse()).collect::<Result<Vec<Mode>, _>>()?;
            let out = default_dir(&cfg, out, "ablation");
            match ablate_cmd(&cfg, &data, &modes, &out, assert_direction) {
                Ok(report) => {
                    print!("{}", report.to_table());
                    if assert_direction {
                        println!("direction: {}", report.check_direction()?);
                    }
                }
                Err(e @ ExperimentError::Assertion(_)) => {
                    if let Ok(t) = std::fs::read_to_string(out.join(topoquant::experiment::ABLATION_TABLE)) {
                        print!("{t}");
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Command::Gradcheck {
            seeds,
            terms,
            out,
            corrupt,
        } => {
            let terms = terms.iter().map(|t| parse_term(t)).collect::<Result<Vec<_>, _>>()?;
            let opts = GradcheckOptions {
                seeds,
                corrupt: corrupt.as_deref().map(parse_term).transpose()?,
                ..GradcheckOptions::default()
            };
            let report = gradcheck_cmd(&opts, &terms, out.as_deref())?;
            print!("{}", report.to_table());
            ensure_gradients_pass(&report)?;
        }
        Command::Bench {
            checkpoint,
            data,
            out,
            runs,
        } => {
            let report = bench_cmd(&checkpoint, &data, &out, runs)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn init_threads() -> Result<(), ExperimentError> {
    let Ok(v) = std::env::var("TOPOQUANT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ExperimentError::Usage(format!("TOPOQUANT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ExperimentError::Usage(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
