use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use maff_cli::commands::{check_strict, cmd_build_db, cmd_eval, cmd_infer, cmd_synth, cmd_train};
use maff_cli::config::RunConfig;
use maff_cli::selftest::cmd_selftest;
use maff_cli::{exit_code, EXIT_OK};
use maff_core::fusion::FusionMode;
use maff_core::Result;

#[derive(Parser, Debug)]
#[command(name = "maff", version, about = "Pillar detector with lidar/RGB attention fusion")]
struct Cli {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `model.fusion`.
    #[arg(long, global = true, value_parser = parse_fusion)]
    fusion: Option<FusionMode>,
    /// eval: fail when a recall position is unreachable.
    #[arg(long, global = true)]
    strict: bool,
    /// Worker threads for per-frame work.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic frames in KITTI layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Crop every vehicle of the training set into a sample database.
    BuildDb {
        /// Defaults to `data.gt_database`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and write `checkpoint.bin` and `loss.csv` into `--out`.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write one result file per frame.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// KITTI-layout root; defaults to `data.val_dir`.
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score result files against label files.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Also write `report.txt` and `report.machine` here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra TP/FP table thresholds.
        #[arg(long = "score-threshold")]
        score_thresholds: Vec<f64>,
    },
    /// Check layer sizes and the loss fixture.
    Selftest,
    /// Print the effective configuration.
    PrintConfig,
}

fn parse_fusion(s: &str) -> std::result::Result<FusionMode, String> {
    s.parse::<FusionMode>().map_err(|e| e.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::default();
            c.apply_env(|k| std::env::var_os(k));
            c
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(f) = cli.fusion {
        cfg.model.fusion = f;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let workers = cli.workers.max(1);
    match cli.cmd {
        Command::Synth { out, frames } => {
            if let Some(n) = frames {
                cfg.synth.frames = n;
            }
            cfg.validate()?;
            cmd_synth(&cfg, &out)?;
        }
        Command::BuildDb { out } => {
            cfg.validate()?;
            let out = match out.or_else(|| cfg.data.gt_database.clone()) {
                Some(p) => p,
                None => return Err(maff_core::Error::Config("build-db needs --out or data.gt_database".into())),
            };
            cmd_build_db(&cfg, &out)?;
        }
        Command::Train { out, steps } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cfg.validate()?;
            let s = cmd_train(&cfg, &out)?;
            println!("trained {} steps, final loss {}; wrote {} and {}", s.steps, s.last.total, s.checkpoint.display(), s.loss_log.display());
        }
        Command::Infer { checkpoint, frames, out } => {
            cfg.validate()?;
            let n = cmd_infer(&cfg, &checkpoint, frames.as_deref(), &out, workers)?;
            println!("wrote {n} result files to {}", out.display());
        }
        Command::Eval { results, labels, out, score_thresholds } => {
            cfg.eval.score_thresholds.extend(score_thresholds);
            cfg.validate()?;
            let report = cmd_eval(&cfg, &results, &labels, out.as_deref(), workers)?;
            print!("{}", report.to_table());
            println!();
            print!("{}", report.to_machine());
            if cli.strict {
                check_strict(&report)?;
            }
        }
        Command::Selftest => cmd_selftest()?,
        Command::PrintConfig => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
