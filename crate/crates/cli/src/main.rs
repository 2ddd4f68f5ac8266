use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diffboost::pipeline::{run_ablation, run_pipeline, write_report, RunConfig, Stage};

#[derive(Debug, Parser)]
#[command(name = "diffboost", version, about = "Diffusion-based augmentation for medical image segmentation")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory, overriding the configuration.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Skip stages whose outputs already match the configuration.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Every stage, then the report.
    Run,
    /// Build the synthetic corpus and segmentation task (or ingest external data).
    Data,
    /// Train the denoiser on the corpus.
    Pretrain,
    /// Adapt the pretrained denoiser to the segmentation task.
    Finetune,
    /// Fill the augmentation cache with generated variants.
    Generate,
    /// Train segmentation models for every configured method.
    TrainSeg,
    /// Score conditional generation on held-out cases.
    EvalGen,
    /// Score the segmentation models on their validation folds.
    EvalSeg,
    /// Sweep one setting: n, alpha, patch_size or backbone.
    Ablate {
        #[arg(long)]
        param: String,
        /// Comma-separated values; defaults to the standard sweep.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Consolidate finished evaluations into report/.
    Report,
    /// Print the effective configuration.
    ShowConfig,
}

fn load_config(cli: &Cli) -> diffboost::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.run_dir {
        config.run_dir = dir.clone();
    }
    config.resume |= cli.resume;
    config.validate()?;
    Ok(config)
}

fn stage_only(mut config: RunConfig, stage: Stage) -> diffboost::Result<()> {
    config.stages = vec![stage];
    let out = run_pipeline(&config)?;
    for s in &out.executed {
        println!("ran {s}");
    }
    for s in &out.skipped {
        println!("up to date {s}");
    }
    Ok(())
}

fn execute(cli: &Cli) -> diffboost::Result<()> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Run => {
            let mut config = config;
            config.stages.clear();
            let out = run_pipeline(&config)?;
            println!("executed: {}", join(&out.executed));
            println!("skipped: {}", join(&out.skipped));
            println!("report: {}", out.run_dir.join("report").display());
        }
        Command::Data => stage_only(config, Stage::Data)?,
        Command::Pretrain => stage_only(config, Stage::Pretrain)?,
        Command::Finetune => stage_only(config, Stage::Finetune)?,
        Command::Generate => stage_only(config, Stage::Generate)?,
        Command::TrainSeg => stage_only(config, Stage::TrainSeg)?,
        Command::EvalGen => stage_only(config, Stage::EvalGen)?,
        Command::EvalSeg => stage_only(config, Stage::EvalSeg)?,
        Command::Ablate { param, values } => {
            let table = run_ablation(&config, param, values)?;
            println!("value,cases,dice_mean,dice_std,hd95_mean,assd_mean,plateau");
            for r in &table.rows {
                println!(
                    "{},{},{:.4},{:.4},{:.4},{:.4},{}",
                    r.value, r.cases, r.dice_mean, r.dice_std, r.hd95_mean, r.assd_mean, r.plateau
                );
            }
            println!("sweep: {}", table.dir.join("sweep.csv").display());
        }
        Command::Report => {
            write_report(&config.run_dir)?;
            let summary = config.run_dir.join("report").join("summary.txt");
            let text = std::fs::read_to_string(&summary).map_err(|e| diffboost::Error::Io {
                path: summary.clone(),
                source: e,
            })?;
            print!("{text}");
        }
        Command::ShowConfig => print!("{}", config.to_toml()?),
    }
    Ok(())
}

fn join(stages: &[Stage]) -> String {
    if stages.is_empty() {
        return "-".into();
    }
    stages.iter().map(Stage::to_string).collect::<Vec<_>>().join(",")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = serde_json::to_string(&e.to_string()).unwrap_or_default();
            eprintln!("error kind={} message={message}", e.kind());
            ExitCode::from(2)
        }
    }
}
