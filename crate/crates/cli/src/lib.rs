//! Command line front end: configuration loading and one function per subcommand.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dqtrade::ErrorClass;

#[derive(Debug, Parser)]
#[command(name = "dqtrade", version, about = "Deep Q-network trading experiments on real and simulated futures prices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration (a previous run's manifest.toml works too).
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override any config value, e.g. `--set train.gamma=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write simulated price paths.
    Simulate(Common),
    /// Estimate GBM and VG parameters from a price file.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Price CSV; defaults to the configured target's file.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train one network and write a checkpoint and training log.
    Train(Common),
    /// Run a backtest and write the report set.
    Backtest {
        #[command(flatten)]
        common: Common,
        /// Use this network instead of training the first segment.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sharpe-ratio histograms over simulated evaluation paths.
    Study {
        #[command(flatten)]
        common: Common,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Recompute reports from a backtest output directory.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory holding returns.csv and positions.csv.
        #[arg(long)]
        input: PathBuf,
    },
}

impl Common {
    pub fn load(&self) -> anyhow::Result<config::RunConfig> {
        let overrides = config::Overrides { seed: self.seed, out: self.out.clone(), set: self.set.clone() };
        config::load(self.config.as_deref(), &overrides)
    }
}

pub fn run(cli: Cli) -> anyhow::Result<commands::Written> {
    match cli.command {
        Command::Simulate(c) => commands::cmd_simulate(&c.load()?),
        Command::Calibrate { common, input } => commands::cmd_calibrate(&common.load()?, input.as_deref()),
        Command::Train(c) => commands::cmd_train(&c.load()?),
        Command::Backtest { common, checkpoint } => commands::cmd_backtest(&common.load()?, checkpoint.as_deref()),
        Command::Study { common, jobs } => {
            let cfg = common.load()?;
            let mut pool = rayon::ThreadPoolBuilder::new();
            if let Some(n) = jobs {
                pool = pool.num_threads(n.max(1));
            }
            pool.build()?.install(|| commands::cmd_study(&cfg))
        }
        Command::Report { common, input } => {
            let mut cfg = common.load()?;
            if common.out.is_none() && !common.set.iter().any(|s| s.starts_with("out=")) && common.config.is_none() {
                cfg.out = input.clone();
            }
            commands::cmd_report(&cfg, &input)
        }
    }
}

/// 2 for configuration problems, 3 for bad data, 4 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<dqtrade::Error>() {
            return match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Runtime => 4,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
    }
    4
}
