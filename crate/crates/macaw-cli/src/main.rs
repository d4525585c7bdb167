//! Command line front end for the causal flow engine: data generation,
//! training, sampling, interventions, counterfactuals, classification,
//! evaluation and gradient checking, all driven by one TOML config.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use macaw::config::Config;
use macaw::error::{Error, Result};

#[derive(Parser)]
#[command(name = "macaw", version, about = "causal generative flows")]
struct Cli {
    /// TOML config; benchmark defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override rederiving every per-stage seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, created if missing
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads for data generation (0 picks the core count)
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset and write tables plus containers
    GenData,
    /// Fit the configured model and save it with its training trace
    Train,
    /// Draw rows from a saved model
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// Row count; defaults to the config's evaluation sample size
        #[arg(long)]
        n: Option<usize>,
        /// Codec container for decoding latent blocks to PNGs
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Draw rows under an intervention such as x2=2
    Intervene {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "do")]
        do_spec: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Answer "what would these rows have been under do(...)"
    Counterfactual {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "do")]
        do_spec: String,
        /// Observations to rewrite; defaults to the held-out split
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma separated row indices, e.g. 0,5,17
        #[arg(long)]
        rows: Option<String>,
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Posterior age inference over the held-out images
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        codec: PathBuf,
    },
    /// Run the full benchmark for the configured dataset kind
    Eval,
    /// Compare analytic likelihood gradients against finite differences
    GradCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Sample { .. } => "sample",
            Command::Intervene { .. } => "intervene",
            Command::Counterfactual { .. } => "counterfactual",
            Command::Classify { .. } => "classify",
            Command::Eval => "eval",
            Command::GradCheck { .. } => "grad-check",
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if cli.threads > 0 {
        // A second build_global in the same process is harmless here; the
        // first pool wins and generation stays order deterministic anyway.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cli.out)?;
    commands::manifest(&cfg, &cli.out, cli.command.name(), cli.seed, cli.threads)?;

    match &cli.command {
        Command::GenData => commands::gen_data(&cfg, &cli.out),
        Command::Train => commands::train(&cfg, &cli.out),
        Command::Sample { model, n, codec } => {
            commands::sample(&cfg, &cli.out, model, *n, codec.as_deref(), None)
        }
        Command::Intervene { model, do_spec, n, codec } => {
            commands::sample(&cfg, &cli.out, model, *n, codec.as_deref(), Some(do_spec))
        }
        Command::Counterfactual { model, do_spec, data, rows, codec } => commands::counterfactual(
            &cfg,
            &cli.out,
            model,
            do_spec,
            data.as_deref(),
            rows.as_deref(),
            codec.as_deref(),
        ),
        Command::Classify { model, codec } => commands::classify(&cfg, &cli.out, model, codec),
        Command::Eval => commands::eval(&cfg, &cli.out),
        Command::GradCheck { seeds, step } => {
            commands::grad_check_cmd(&cfg, &cli.out, *seeds, *step)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
