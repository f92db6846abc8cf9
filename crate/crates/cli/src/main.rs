use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use depthpost_core::harness::{
    ablation_csv, cmd_ablate, cmd_eval, cmd_predict, cmd_train_cpn, cmd_train_dcn, Ini,
    PredictRequest, RunConfig, TrainOutcome,
};
use depthpost_core::metrics::Aggregation;

#[derive(Parser)]
#[command(
    name = "depthpost",
    version,
    about = "Depth completion with a learned conditional prior"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by the commands that read a run configuration.
#[derive(Args)]
struct RunArgs {
    /// Run configuration (sectioned key = value file); defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides [run] seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides [run] out
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DcnMode {
    Supervised,
    Unsupervised,
    Stereo,
}

impl DcnMode {
    fn as_str(self) -> &'static str {
        match self {
            DcnMode::Supervised => "supervised",
            DcnMode::Unsupervised => "unsupervised",
            DcnMode::Stereo => "stereo",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the conditional prior network on dense depth
    TrainCpn {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the completion network
    TrainDcn {
        #[arg(long, value_enum)]
        mode: DcnMode,
        /// Frozen prior checkpoint (unsupervised and stereo modes)
        #[arg(long)]
        cpn: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a completion checkpoint on a manifest; prints CSV
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        density: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// per_image or per_pixel
        #[arg(long, default_value = "per_image")]
        aggregation: String,
        /// Also write the CSV to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep (gamma, eta) x alpha with short unsupervised runs
    Ablate {
        #[arg(long)]
        cpn: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Predict dense depth for one frame
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// RGB image (PNG)
        #[arg(long)]
        image: PathBuf,
        /// Sparse depth (16-bit PNG, 0 = no sample)
        #[arg(long)]
        sparse: PathBuf,
        /// Ground-truth depth for the error map
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Prior checkpoint; prints the posterior score when given
        #[arg(long)]
        cpn: Option<PathBuf>,
        /// Supplies [losses] gamma, eta and alpha for the score
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum ModeArg<'a> {
    /// Used when the config names no mode; a different mode is rejected later.
    Default(&'a str),
    Force(&'a str),
}

fn load_config(run: &RunArgs, mode: ModeArg<'_>, cpn: Option<&Path>) -> Result<RunConfig> {
    let mut ini = match &run.config {
        Some(path) => Ini::load(path)?,
        None => Ini::default(),
    };
    let has_mode = ini
        .sections
        .get("run")
        .is_some_and(|s| s.contains_key("mode"));
    match mode {
        ModeArg::Force(m) => ini.set("run", "mode", m),
        ModeArg::Default(m) if !has_mode => ini.set("run", "mode", m),
        ModeArg::Default(_) => {}
    }
    if let Some(seed) = run.seed {
        ini.set("run", "seed", seed);
    }
    if let Some(out) = &run.out {
        ini.set("run", "out", out.display());
    }
    if let Some(cpn) = cpn {
        ini.set("run", "cpn_checkpoint", cpn.display());
    }
    Ok(RunConfig::from_ini(&ini)?)
}

fn report(outcome: &TrainOutcome) {
    println!(
        "best step {} val rmse {:.3} mm, last val rmse {:.3} mm -> {}",
        outcome.best_step,
        outcome.best.rmse_mm,
        outcome.last.rmse_mm,
        outcome.checkpoint.display()
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainCpn { run } => {
            let cfg = load_config(&run, ModeArg::Default("cpn"), None)?;
            report(&cmd_train_cpn(&cfg)?);
        }
        Command::TrainDcn { mode, cpn, run } => {
            let cfg = load_config(&run, ModeArg::Force(mode.as_str()), cpn.as_deref())?;
            report(&cmd_train_dcn(&cfg, None)?);
        }
        Command::Eval {
            checkpoint,
            manifest,
            density,
            seed,
            aggregation,
            out,
        } => {
            let how = Aggregation::parse(&aggregation)?;
            let csv = cmd_eval(&checkpoint, &manifest, density, seed, how)?;
            if let Some(out) = out {
                std::fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
            }
            print!("{csv}");
        }
        Command::Ablate { cpn, run } => {
            let cfg = load_config(&run, ModeArg::Default("unsupervised"), cpn.as_deref())?;
            let csv = ablation_csv(&cmd_ablate(&cfg)?);
            let path = cfg.out.join("ablation.csv");
            std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
            print!("{csv}");
        }
        Command::Predict {
            checkpoint,
            image,
            sparse,
            gt,
            cpn,
            config,
            out,
        } => {
            let cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::defaults(),
            };
            let req = PredictRequest {
                checkpoint,
                image,
                sparse,
                ground_truth: gt,
                cpn_checkpoint: cpn,
                norms: cfg.norms,
                alpha: cfg.weights.alpha,
                out,
            };
            let res = cmd_predict(&req)?;
            println!("depth {}", res.depth_png.display());
            if let Some(p) = &res.error_png {
                println!("error_map {}", p.display());
            }
            if let Some(score) = res.posterior {
                println!("posterior_score {score:?}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("depthpost: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
