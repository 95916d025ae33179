use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use xrltrade::pipeline::{
    cmd_backtest, cmd_explain, cmd_ingest, cmd_train, MethodChoice, RunConfig,
};
use xrltrade::{Error, Result};

/// Train a DQN trading agent on daily prices and explain its decisions.
#[derive(Parser)]
#[command(name = "xrltrade", version)]
struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel explanation; outputs do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, clean and split the price file.
    Ingest {
        /// Price CSV to use instead of the configured `data` path.
        csv: Option<PathBuf>,
    },
    /// Train the agent on the training partition.
    Train,
    /// Run the greedy agent over the test partition and chart it.
    Backtest,
    /// Explain the agent's prediction on one or more test dates.
    Explain(ExplainArgs),
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long, conflicts_with_all = ["from", "to"], required_unless_present_all = ["from", "to"])]
    date: Option<NaiveDate>,
    #[arg(long, requires = "to")]
    from: Option<NaiveDate>,
    #[arg(long, requires = "from")]
    to: Option<NaiveDate>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Exact,
    Perm,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Usage("--config is required".into()))?;
    let mut config = RunConfig::from_file(path)?;
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot start {jobs} worker threads: {e}")))?;
    }
    let mut config = load_config(&cli)?;
    match cli.command {
        Command::Ingest { csv } => {
            if let Some(csv) = csv {
                config.data = csv;
            }
            println!("{}", cmd_ingest(&config)?);
        }
        Command::Train => {
            let summary = cmd_train(&config)?;
            println!("{summary}");
            println!("weights: {}", config.weights().display());
        }
        Command::Backtest => {
            let summary = cmd_backtest(&config)?;
            println!("{summary}");
            println!("backtest: {}", config.backtest_csv().display());
        }
        Command::Explain(args) => {
            if let Some(m) = args.method {
                config.method = match m {
                    MethodArg::Exact => MethodChoice::Exact,
                    MethodArg::Perm => MethodChoice::Permutation,
                };
            }
            if let Some(samples) = args.samples {
                config.samples = samples;
            }
            config.validate()?;
            let (from, to) = match (args.date, args.from, args.to) {
                (Some(d), _, _) => (d, d),
                (None, Some(f), Some(t)) => (f, t),
                _ => return Err(Error::Usage("give --date or both --from and --to".into())),
            };
            for day in cmd_explain(&config, from, to)? {
                println!("{}: {}", day.date, day.guidance);
                println!("  waterfall: {}", day.waterfall.display());
            }
            println!("explanations: {}", config.explanations().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
