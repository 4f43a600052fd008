use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pose6d::app;
use pose6d::config::{Mode, RunConfig};

/// Worker thread count; defaults to all cores.
const WORKERS_ENV: &str = "POSE6D_WORKERS";

#[derive(Parser)]
#[command(
    name = "pose6d",
    version,
    about = "Geometric 6D object pose estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Rgb,
    Rgbd,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the pose of every object instance in a dataset.
    Estimate {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score estimates against ground truth.
    Evaluate {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset with exact ground truth.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Composite plausible occluders into single-object frames.
    Augment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Histogram where on each object's surface occlusion happens.
    AnalyzeOcclusion {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(
    path: Option<&Path>,
    mode: Option<ModeArg>,
    seed: Option<u64>,
) -> pose6d::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = mode {
        cfg.mode = match m {
            ModeArg::Rgb => Mode::Rgb,
            ModeArg::Rgbd => Mode::Rgbd,
        };
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> pose6d::Result<String> {
    match cli.command {
        Command::Estimate {
            mode,
            config,
            dataset,
            out,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), mode, seed)?;
            let s = app::run_estimate(&dataset, &cfg, &out)?;
            Ok(format!(
                "estimated\tframes={}\tobjects={}\tfailed={}",
                s.frames, s.objects, s.failed
            ))
        }
        Command::Evaluate {
            mode,
            config,
            dataset,
            estimates,
            out,
        } => {
            let cfg = load_config(config.as_deref(), mode, None)?;
            let r = app::run_evaluate(&dataset, &estimates, &cfg, &out)?;
            Ok(format!(
                "evaluated\tobjects={}\t{}={:.4}",
                r.objects.len(),
                r.criterion.name(),
                r.rate()
            ))
        }
        Command::Synth {
            config,
            out,
            seed,
            scenes,
        } => {
            let mut cfg = load_config(config.as_deref(), None, seed)?;
            if let Some(n) = scenes {
                cfg.synth.scenes = n;
            }
            let d = app::run_synth(&cfg, &out)?;
            Ok(format!("synthesized\tframes={}", d.frames.len()))
        }
        Command::Augment {
            config,
            dataset,
            out,
        } => {
            let cfg = load_config(config.as_deref(), None, None)?;
            let d = app::run_augment(&dataset, &cfg, &out)?;
            Ok(format!("augmented\tframes={}", d.frames.len()))
        }
        Command::AnalyzeOcclusion {
            config,
            dataset,
            out,
        } => {
            let cfg = load_config(config.as_deref(), None, None)?;
            let h = app::run_analyze_occlusion(&dataset, &cfg, &out)?;
            Ok(format!("analyzed\tclasses={}", h.len()))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n = match v.parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error\tUsage\t{WORKERS_ENV} must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        };
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error\tUsage\tcannot start {n} workers: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace(['\t', '\n'], " ");
            eprintln!("error\t{}\t{msg}", e.kind());
            ExitCode::from(1)
        }
    }
}
