use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser};
use ggrad::harness::{execute, preset, ExperimentConfig, Subcommand, PRESETS};
use ggrad::{Error, Result};

#[derive(Parser)]
#[command(name = "ggrad", version, about = "Communicating-learner experiments on MNIST")]
enum Cli {
    /// Decentralized gossip training with collective inference.
    Gossip(RunArgs),
    /// Student trained on teacher-selected hard examples.
    Curriculum(RunArgs),
    /// Two agents learning a discrete message channel.
    Language(RunArgs),
    /// Train and cache the curriculum teacher.
    TrainTeacher(RunArgs),
    /// Accuracy of a saved checkpoint.
    Eval(RunArgs),
    /// List the preset names.
    Presets,
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file; the subcommand's defaults when omitted.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset instead of a file.
    #[arg(long)]
    preset: Option<String>,
    /// Master seed overriding the configured one.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

fn load(sub: Subcommand, args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::from_file(path, Some(sub))?,
        (None, Some(name)) => {
            let cfg = preset(name)?;
            if cfg.experiment != sub {
                return Err(Error::Config {
                    key: "preset".into(),
                    message: format!("`{name}` is a {} preset", cfg.experiment.as_str()),
                });
            }
            cfg
        }
        (None, None) => ExperimentConfig::new(sub).resolved()?,
    };
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
        cfg = cfg.resolved()?;
    }
    Ok(cfg)
}

fn run(sub: Subcommand, args: &RunArgs) -> Result<()> {
    let cfg = load(sub, args)?;
    let out = execute(&cfg, &args.out)?;
    for (k, v) in &out.summary.entries {
        println!("{k}: {v}");
    }
    println!("manifest: {}", out.manifest.display());
    println!("summary: {}", out.summary_path.display());
    Ok(())
}

fn main() -> ExitCode {
    let (sub, args) = match Cli::parse() {
        Cli::Gossip(a) => (Subcommand::Gossip, a),
        Cli::Curriculum(a) => (Subcommand::Curriculum, a),
        Cli::Language(a) => (Subcommand::Language, a),
        Cli::TrainTeacher(a) => (Subcommand::TrainTeacher, a),
        Cli::Eval(a) => (Subcommand::Eval, a),
        Cli::Presets => {
            for name in PRESETS {
                println!("{name}");
            }
            return ExitCode::SUCCESS;
        }
    };
    match run(sub, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
