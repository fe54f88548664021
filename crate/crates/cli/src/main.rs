use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

mod commands;
mod config;

use config::{keys_help, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "msunet", version, about = "Multiscale statistical U-Net: collapse, restore, train, infer, bench")]
struct Cli {
    /// Run configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the `threads` key.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides any key, repeatable: `--set epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write synthetic cine phantom cases.
    GenData,
    /// Collapse a video into a canonical-form archive.
    Extract,
    /// Rebuild a video from an archive and report the error.
    Restore,
    /// Train a network on a phantom directory.
    Train,
    /// Segment a video with a checkpoint.
    Infer,
    /// Throughput and Dice comparison of checkpoints.
    Bench,
    /// Finite-difference audit of the network gradients.
    Gradcheck,
}

fn resolve(cli: &Cli) -> msunet::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| msunet::Error::config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(t) = cli.threads {
        cfg.set("threads", &t.to_string())?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> msunet::Result<()> {
    let cfg = resolve(cli)?;
    let threads = cfg.usize("threads")?.max(1);
    // a second call within one process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    std::fs::create_dir_all(&cli.out)?;
    std::fs::write(cli.out.join("run.cfg"), cfg.to_text())?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg, &cli.out),
        Command::Extract => commands::extract(&cfg, &cli.out),
        Command::Restore => commands::restore(&cfg, &cli.out),
        Command::Train => commands::train(&cfg, &cli.out),
        Command::Infer => commands::infer(&cfg, &cli.out),
        Command::Bench => commands::bench(&cfg, &cli.out),
        Command::Gradcheck => commands::gradcheck(&cfg),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().after_help(keys_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
