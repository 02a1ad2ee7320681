//! Command-line driver: argument parsing, configuration layering and
//! dispatch to the subcommands.

pub mod commands;
pub mod config;
pub mod visualize;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::Run;
use config::{ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sieve", version, about = "Visual evidence discovery, evidence-insertion rollouts and GRPO training")]
pub struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Training steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Top-K blocks; a comma list for sweep-k.
    #[arg(long, global = true)]
    pub k: Option<String>,
    /// Mid layers as a comma list; `;`-separated sets for sweep-layers.
    #[arg(long, global = true)]
    pub layers: Option<String>,
    /// Sample count for the command.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long = "max-turns", global = true)]
    pub max_turns: Option<usize>,
    /// Configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset.
    GenData,
    /// Anchors, regions and evidence snapshots for a few samples.
    Discover,
    /// Sampled trajectories with their rewards.
    Rollout,
    /// Supervised warm start followed by GRPO training.
    Train,
    /// Answer accuracy on the held-out samples.
    Eval,
    /// Mean IHR per representation layer.
    SweepLayers,
    /// Accuracy per top-K.
    SweepK,
    /// Accuracy with discovered against randomly placed evidence.
    AblateRandom,
    /// Overlay matched and expanded evidence boxes on images.
    Visualize,
    /// Print a cache file as JSON lines.
    CacheDump { path: PathBuf },
}

/// Defaults, then the config file, then flags, then `--set` overrides.
pub fn effective_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    let cmd = &cli.command;
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(steps) = cli.steps {
        cfg.set("train.steps", &steps.to_string())?;
    }
    if let Some(k) = &cli.k {
        cfg.set(if matches!(cmd, Command::SweepK) { "sweep.k" } else { "discovery.k" }, k)?;
    }
    if let Some(layers) = &cli.layers {
        cfg.set(if matches!(cmd, Command::SweepLayers) { "sweep.layers" } else { "discovery.layers" }, layers)?;
    }
    if let Some(n) = cli.n {
        let key = match cmd {
            Command::GenData | Command::Train => "data.n",
            Command::Eval | Command::SweepLayers | Command::SweepK | Command::AblateRandom => "eval.n",
            _ => "inspect.n",
        };
        cfg.set(key, &n.to_string())?;
    }
    if let Some(t) = cli.max_turns {
        cfg.set("rollout.max_turns", &t.to_string())?;
    }
    for pair in &cli.overrides {
        cfg.apply_override(pair)?;
    }
    Ok(cfg)
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let cfg = match effective_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    let run = Run { cfg, out: cli.out.clone() };
    let result = match &cli.command {
        Command::CacheDump { path } => run.cache_dump(path).map(|text| print!("{text}")),
        cmd => run.echo_config().and_then(|()| dispatch(&run, cmd)),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_DOMAIN
        }
    }
}

fn dispatch(run: &Run, cmd: &Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData => run.gen_data(),
        Command::Discover => run.discover(),
        Command::Rollout => run.rollout(),
        Command::Train => run.train(),
        Command::Eval => run.eval(),
        Command::SweepLayers => run.sweep_layers(),
        Command::SweepK => run.sweep_k(),
        Command::AblateRandom => run.ablate_random(),
        Command::Visualize => run.visualize(),
        Command::CacheDump { .. } => unreachable!("handled by the caller"),
    }
}
