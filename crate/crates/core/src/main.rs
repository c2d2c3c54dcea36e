use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sqcpc::cli::{run, Command, RunConfig};
use sqcpc::Error;

#[derive(Parser)]
#[command(name = "sqcpc", version, about = "Contrastive pretraining and sparse-label fine-tuning of a video intensity regressor")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate a synthetic dataset with dense and sparse labels.
    Synth(Common),
    /// Train the encoder on the contrastive pretext task.
    Pretrain(Common),
    /// Fine-tune from sparse labels, from scratch or a checkpoint.
    Finetune(Common),
    /// Score a checkpoint and write the per-dimension report.
    Eval(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; defaults to the command's directory key.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn resolve(c: &Common) -> sqcpc::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &c.config {
        cfg.apply_file(path)?;
    }
    for kv in &c.set {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = c.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn threads() -> sqcpc::Result<()> {
    let Ok(raw) = std::env::var("SQCPC_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("SQCPC_THREADS must be a count, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common) = match &cli.command {
        Sub::Synth(c) => (Command::Synth, c),
        Sub::Pretrain(c) => (Command::Pretrain, c),
        Sub::Finetune(c) => (Command::Finetune, c),
        Sub::Eval(c) => (Command::Eval, c),
    };
    let result = threads()
        .and_then(|_| resolve(common))
        .and_then(|cfg| run(cmd, &cfg, common.out.as_deref()));
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
