use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::Parser;
use hydra_core::minichecker::server::listen;
use hydra_core::minichecker::{batch_check, CheckerHost, CheckpointPolicy, DEFAULT_INTERVAL};

/// Incremental MiniLang checker.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    /// Serve the frame protocol on this Unix socket path.
    #[arg(long, value_name = "PATH", conflicts_with = "batch")]
    listen: Option<PathBuf>,
    /// Minimum accepted bytes between checkpoints.
    #[arg(long, default_value_t = DEFAULT_INTERVAL)]
    interval: u64,
    /// Skip the checkpoint after the first progress event.
    #[arg(long)]
    no_prologue_chkpt: bool,
    /// Check a whole file and print the outcome as one JSON line.
    #[arg(long, value_name = "FILE")]
    batch: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    if args.interval == 0 {
        bail!("--interval must be positive");
    }
    if let Some(path) = &args.batch {
        let src = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let out = batch_check(&src);
        println!("{}", serde_json::to_string(&out)?);
        if !out.accepted() {
            std::process::exit(1);
        }
        return Ok(());
    }
    let Some(path) = &args.listen else {
        bail!("nothing to do: pass --listen <path> or --batch <file>");
    };
    let host = Arc::new(CheckerHost::new(CheckpointPolicy::new(args.interval, !args.no_prologue_chkpt)));
    listen(path, host).with_context(|| format!("serving on {}", path.display()))
}
