use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use acelab_core::experiment::{Experiment, ExperimentConfig, Stage, Summary};
use clap::{Parser, Subcommand};

/// Run the Two-Moons counterfactual-augmentation pipeline, or one stage of it.
#[derive(Parser, Debug)]
#[command(name = "acelab", version)]
struct Cli {
    /// JSON config; the packaged default is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Stage to run when no subcommand is given: a stage name or `all`.
    #[arg(long)]
    stage: Option<String>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    GenData,
    TrainClassifier,
    TrainPce,
    Augment,
    Finetune,
    Evaluate,
    Attack,
    /// Retrain the explainer three times, zeroing one loss weight each time.
    Ablate,
    /// Merge every stage's metrics into summary.json.
    Report,
    /// Every stage in order.
    All,
    /// Print the packaged default config.
    DefaultConfig,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::GenData => Stage::GenData,
            Command::TrainClassifier => Stage::TrainClassifier,
            Command::TrainPce => Stage::TrainPce,
            Command::Augment => Stage::Augment,
            Command::Finetune => Stage::Finetune,
            Command::Evaluate => Stage::Evaluate,
            Command::Attack => Stage::Attack,
            Command::Ablate => Stage::Ablate,
            Command::Report => Stage::Report,
            Command::All | Command::DefaultConfig => return None,
        })
    }
}

fn print_summary(s: &Summary) {
    let rows = [
        ("baseline test accuracy", "evaluate", "baseline", "test", "accuracy"),
        ("fine-tuned test accuracy", "evaluate", "finetuned", "test", "accuracy"),
        ("baseline AiD mean PE", "evaluate", "baseline", "aid", "mean_pe"),
        ("fine-tuned AiD mean PE", "evaluate", "finetuned", "aid", "mean_pe"),
        ("baseline near-OOD AUC", "evaluate", "baseline", "near_ood", "auc"),
        ("fine-tuned near-OOD AUC", "evaluate", "finetuned", "near_ood", "auc"),
        ("far-OOD density AUC", "evaluate", "pce", "far_ood", "density_auc"),
        ("far-OOD abstention", "evaluate", "selective", "far_ood", "abstention_rate"),
        ("iD abstention", "evaluate", "selective", "test", "abstention_rate"),
        ("explainer self-reconstruction L1", "train-pce", "pce", "train", "self_reconstruction_l1"),
        ("explainer KL ratio", "train-pce", "pce", "curve", "kl_ratio"),
    ];
    for (label, stage, model, set, metric) in rows {
        if let Some(v) = s.get(stage, model, set, metric) {
            println!("{label:<34} {v:.4}");
        }
    }
}

fn run(cli: Cli) -> acelab_core::Result<()> {
    if matches!(cli.command, Some(Command::DefaultConfig)) {
        print!("{}", acelab_core::experiment::DEFAULT_CONFIG);
        return Ok(());
    }
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::packaged_default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let exp = Experiment::new(config, cli.out)?;
    let from_flag = match cli.stage.as_deref() {
        None | Some("all") => None,
        Some(name) => Some(Stage::parse(name).ok_or_else(|| acelab_core::Error::Config {
            keys: vec![format!("--stage: unknown stage `{name}`")],
        })?),
    };
    let stage = match cli.command {
        Some(c) => c.stage(),
        None => from_flag,
    };
    let start = Instant::now();
    match stage {
        Some(Stage::Report) => print_summary(&exp.report()?),
        Some(s) => {
            exp.run(s)?;
            eprintln!("{} finished in {:.1}s", s.name(), start.elapsed().as_secs_f64());
        }
        None => {
            for s in &Stage::ALL[..Stage::ALL.len() - 1] {
                let t = Instant::now();
                exp.run(*s)?;
                eprintln!("{} finished in {:.1}s", s.name(), t.elapsed().as_secs_f64());
            }
            print_summary(&exp.report()?);
            eprintln!("pipeline finished in {:.1}s", start.elapsed().as_secs_f64());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
