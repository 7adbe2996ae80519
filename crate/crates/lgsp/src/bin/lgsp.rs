//! Subcommand front end over the library harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lgsp::harness::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "lgsp", about = "Spatial prompting experiments on synthetic data")]
struct Cli {
    /// Worker threads for parallel sections (0 = library default).
    /// LGSP_THREADS is an equivalent environment variable.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config file (flat key=value lines)
    #[arg(long)]
    config: PathBuf,
    /// Seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the config
    Datagen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the dataset directory (defaults to data.dir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train base + novel sessions end to end and write a run directory
    Run(ConfigArgs),
    /// Train the base session only
    TrainBase(ConfigArgs),
    /// Resume a run directory and train the remaining novel sessions
    TrainNovel {
        #[arg(long)]
        run: PathBuf,
    },
    /// Re-evaluate a run directory's cumulative test set
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Token-pool saturation sweep over sweep.pool_sizes
    SweepPool(ConfigArgs),
    /// Finite-difference verification of every trainable group
    GradCheck(ConfigArgs),
    /// Ring masks as PGM + raw tensors (from a run, or fresh from config)
    ExportMasks {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention / prompt heatmap exports from a finished run
    ExportHeatmaps {
        #[arg(long)]
        run: PathBuf,
        /// cls | prompts | masks | local_prompts
        #[arg(long)]
        what: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>, threads: Option<usize>) -> lgsp::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let mut cli = Cli::parse();
    if cli.threads.is_none() {
        if let Ok(value) = std::env::var("LGSP_THREADS") {
            match value.parse() {
                Ok(n) => cli.threads = Some(n),
                Err(_) => {
                    eprintln!("lgsp: LGSP_THREADS must be an integer, got {value:?}");
                    return ExitCode::FAILURE;
                }
            }
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lgsp: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> lgsp::Result<()> {
    let threads = cli.threads;
    match cli.command {
        Command::Datagen { config, seed, out } => {
            let cfg = load_config(&config, seed, threads)?;
            let dir = harness::datagen_cmd(&cfg, out.as_deref())?;
            println!("dataset written to {}", dir.display());
        }
        Command::Run(args) => {
            let cfg = load_config(&args.config, args.seed, threads)?;
            let record = harness::run_cmd(&cfg, &args.out)?;
            for row in &record.rows {
                println!("session {}: acc {:.4}", row.session, row.acc);
            }
            println!("avg {:.4}", record.average());
            println!("run directory: {}", args.out.display());
        }
        Command::TrainBase(args) => {
            let cfg = load_config(&args.config, args.seed, threads)?;
            let record = harness::train_base_cmd(&cfg, &args.out)?;
            println!("base session acc {:.4}", record.rows[0].acc);
        }
        Command::TrainNovel { run } => {
            let record = harness::train_novel_cmd(&run)?;
            for row in &record.rows {
                println!("session {}: acc {:.4}", row.session, row.acc);
            }
        }
        Command::Eval { run } => {
            harness::eval_cmd(&run)?;
            println!("wrote eval_metrics.csv and per_class.csv in {}", run.display());
        }
        Command::SweepPool(args) => {
            let cfg = load_config(&args.config, args.seed, threads)?;
            let rows = harness::sweep_pool_cmd(&cfg, &args.out)?;
            for r in &rows {
                println!(
                    "pool {}: base {:.4} novel {:.4} overall {:.4}",
                    r.pool_size, r.base_acc, r.novel_acc, r.overall_acc
                );
            }
        }
        Command::GradCheck(args) => {
            let cfg = load_config(&args.config, args.seed, threads)?;
            let report = harness::grad_check_cmd(&cfg, &args.out)?;
            for e in &report.entries {
                println!(
                    "{}: max rel err {:.3e} (tol {:.0e}) {}",
                    e.name,
                    e.max_rel_err,
                    e.tolerance,
                    if e.pass { "ok" } else { "FAIL" }
                );
            }
            if !report.all_pass() {
                return Err(lgsp::LgspError::InvalidArgument(
                    "gradient check failed".into(),
                ));
            }
        }
        Command::ExportMasks { run, config, out } => {
            let count = match (run, config) {
                (Some(run_dir), _) => {
                    let (_, model) = harness::load_run_model(&run_dir)?;
                    lgsp::harness::export::export_masks(&model, &out)?
                }
                (None, Some(config)) => {
                    let cfg = load_config(&config, None, threads)?;
                    let model = lgsp::model::LgspModel::init(cfg.model_config())?;
                    lgsp::harness::export::export_masks(&model, &out)?
                }
                (None, None) => {
                    return Err(lgsp::LgspError::Config(
                        "export-masks needs --run or --config".into(),
                    ))
                }
            };
            println!("wrote {count} masks to {}", out.display());
        }
        Command::ExportHeatmaps { run, what, out } => {
            let (cfg, model) = harness::load_run_model(&run)?;
            let sample = harness::export_input(&cfg)?;
            let count = match what.as_str() {
                "masks" => lgsp::harness::export::export_masks(&model, &out)?,
                "local_prompts" => {
                    lgsp::harness::export::export_local_prompts(&model, &sample, &out)?
                }
                "cls" | "prompts" => {
                    lgsp::harness::export::export_attention(&model, &sample, &what, &out)?
                }
                other => {
                    return Err(lgsp::LgspError::Config(format!(
                        "unknown export target {other:?}"
                    )))
                }
            };
            println!("wrote {count} files to {}", out.display());
        }
    }
    Ok(())
}
