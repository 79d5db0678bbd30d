use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use ucap::config::{parse_override, RunConfig};
use ucap::pipeline;

#[derive(Parser, Debug)]
#[command(name = "ucap", version, about = "Unsupervised image captioning on synthetic or precomputed data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Any config key, e.g. `--set train.lambda_c=5` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Overrides the config seed and UCAP_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world: features, detections, corpus, test split.
    GenWorld,
    /// Train con2sen, build pseudo pairs, train feat2sen, pretrain the discriminator.
    InitPipeline,
    /// Adversarial training of the captioner.
    Train(TrainArgs),
    /// Beam-search captions for held-out features.
    Generate(GenerateArgs),
    /// BLEU and correct-concept scores for generated captions.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// adv, adv+con, adv+con+im or full.
    #[arg(long)]
    ablation: Option<String>,
    /// Start from random weights instead of the init checkpoint.
    #[arg(long)]
    skip_init: bool,
    /// Directory holding init.ckpt when it is not the run directory.
    #[arg(long)]
    init_dir: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    beam: Option<usize>,
    /// Checkpoint to caption with (default: the run's model.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// UFEA1 features to caption (default: the dataset's test split).
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// types or tokens.
    #[arg(long)]
    count_mode: Option<String>,
}

fn overrides(cli: &Cli) -> Result<Vec<(String, toml::Value)>> {
    let mut out = Vec::new();
    for s in &cli.common.sets {
        out.push(parse_override(s)?);
    }
    let path = |p: &PathBuf| toml::Value::String(p.to_string_lossy().into_owned());
    if let Some(s) = cli.common.seed {
        out.push(("seed".into(), toml::Value::Integer(i64::try_from(s)?)));
    }
    if let Some(p) = &cli.common.data {
        out.push(("data_dir".into(), path(p)));
    }
    if let Some(p) = &cli.common.out {
        out.push(("out_dir".into(), path(p)));
    }
    match &cli.command {
        Command::Train(a) => {
            if let Some(v) = &a.ablation {
                out.push(("train.ablation".into(), toml::Value::String(v.clone())));
            }
            if a.skip_init {
                out.push(("train.skip_init".into(), toml::Value::Boolean(true)));
            }
            if let Some(p) = &a.init_dir {
                out.push(("init_dir".into(), path(p)));
            }
            if let Some(v) = a.steps {
                out.push(("train.steps".into(), toml::Value::Integer(i64::try_from(v)?)));
            }
            if let Some(v) = a.gamma {
                out.push(("train.gamma".into(), toml::Value::Float(v)));
            }
            if let Some(v) = a.lr {
                out.push(("train.lr_main".into(), toml::Value::Float(v)));
            }
        }
        Command::Generate(a) => {
            if let Some(v) = a.beam {
                out.push(("eval.beam_size".into(), toml::Value::Integer(i64::try_from(v)?)));
            }
        }
        Command::Evaluate(a) => {
            if let Some(v) = &a.count_mode {
                out.push(("eval.count_mode".into(), toml::Value::String(v.clone())));
            }
        }
        Command::GenWorld | Command::InitPipeline => {}
    }
    Ok(out)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides(cli)?)?;
    match &cli.command {
        Command::GenWorld => pipeline::gen_world_stage(&cfg),
        Command::InitPipeline => pipeline::init_stage(&cfg).map(drop),
        Command::Train(_) => pipeline::train_stage(&cfg).map(drop),
        Command::Generate(a) => {
            pipeline::generate_stage(&cfg, a.checkpoint.as_deref(), a.features.as_deref()).map(drop)
        }
        Command::Evaluate(_) => {
            let r = pipeline::evaluate_stage(&cfg)?;
            println!(
                "bleu1 {:.4} bleu2 {:.4} bleu3 {:.4} bleu4 {:.4} avg_correct_concepts {:.4} images {}",
                r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.avg_correct_concepts, r.num_images
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
