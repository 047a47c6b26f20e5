use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use oes::cli::config::parse_tolerance;
use oes::cli::{self, Checkpoint, ExperimentConfig, Overrides};
use oes::Error;

#[derive(Parser)]
#[command(name = "oes", version, about = "Train and evaluate energy-shaping controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a controller and write checkpoint, metrics and manifest.
    Train(Common),
    /// Evaluate a trained checkpoint on fresh initial conditions.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: <out>/checkpoint.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of trajectories per target.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Export potential and damping-gain grids of a checkpoint.
    Landscape {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep the effort weight over seeds for both controllers.
    Pareto(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long, env = "OES_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "OES_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "OES_WORKERS")]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, env = "OES_OUT")]
    out: Option<PathBuf>,
    /// Solver tolerances as RTOL:ATOL.
    #[arg(long, env = "OES_TOLERANCE", value_parser = tolerance_arg)]
    tolerance: Option<(f64, f64)>,
}

fn tolerance_arg(s: &str) -> Result<(f64, f64), String> {
    parse_tolerance(s).map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let path = c.config.as_ref().ok_or_else(|| Failure::Usage("--config is required".into()))?;
    if !path.exists() {
        return Err(Failure::Usage(format!("config file {} not found", path.display())));
    }
    let mut cfg = ExperimentConfig::load(path)?;
    Overrides { seed: c.seed, workers: c.workers, output_dir: c.out.clone(), tolerance: c.tolerance }.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(cfg: &ExperimentConfig, path: Option<PathBuf>) -> Result<Checkpoint, Failure> {
    let path = path.unwrap_or_else(|| cfg.output_dir.join("checkpoint.json"));
    let mut ck = Checkpoint::load(&path)?;
    cli::check_compatible(&ck, cfg)?;
    ck.config.eval = cfg.eval.clone();
    ck.config.landscape = cfg.landscape.clone();
    ck.config.workers = cfg.workers;
    Ok(ck)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            info!("training {:?} controller, config sha256 {}", cfg.mode, cfg.hash()?);
            let art = cli::cmd_train(&cfg)?;
            if let Some(last) = art.outcome.history.last() {
                println!(
                    "iterations {} loss {:.6} terminal {:.6} integral {:.6} converged {}",
                    art.outcome.history.len(),
                    last.loss,
                    last.terminal,
                    last.integral,
                    art.outcome.converged
                );
            }
            println!("checkpoint {}", art.checkpoint.display());
        }
        Command::Eval { common, checkpoint, n } => {
            let cfg = load_config(&common)?;
            let ck = load_checkpoint(&cfg, checkpoint)?;
            let s = cli::cmd_eval(&ck, n, &cfg.output_dir, common.tolerance)?;
            let failed = s.records.iter().filter(|r| r.is_err()).count();
            println!(
                "trajectories {} failed {} mean_terminal {:.6} mean_integral {:.6}",
                s.records.len(),
                failed,
                s.mean_terminal,
                s.mean_integral
            );
            println!("summary {}", s.summary_csv.display());
        }
        Command::Landscape { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let ck = load_checkpoint(&cfg, checkpoint)?;
            let f = cli::cmd_landscape(&ck, &cfg.output_dir)?;
            println!("potential {}", f.potential.display());
        }
        Command::Pareto(c) => {
            let cfg = load_config(&c)?;
            let s = cli::cmd_pareto(&cfg)?;
            for d in &s.dominance {
                println!(
                    "gamma {:.3} oes ({:.4}, {:.4}) pdplus ({:.4}, {:.4}) oes_dominated {}",
                    d.gamma, d.oes.0, d.oes.1, d.pdplus.0, d.pdplus.1, d.oes_dominated
                );
            }
            println!("pareto {}", s.csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
