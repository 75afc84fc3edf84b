//! `fakerev`: train models, run the generate-and-filter attack, and evaluate
//! detectors, all from one configuration file.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fakerev::synth::{Domain, SynthConfig};

use config::ValidationError;

#[derive(Parser)]
#[command(name = "fakerev", version, about = "Seed-conditioned fake review generation and detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lm.mlstm.epochs=5` or `--set datasets.0.name=amazon`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed; overrides `seed` in the file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one language model per dataset.
    TrainLm(ConfigArgs),
    /// Train one sentiment classifier per dataset.
    TrainClf(ConfigArgs),
    /// Generate candidates from test seeds and keep the sentiment-preserving ones.
    Attack(ConfigArgs),
    /// Train and evaluate the detectors and their fusions.
    Detect(ConfigArgs),
    /// Print preservation and detection tables for one or more run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the tables here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic polarized corpus.
    SynthCorpus {
        #[arg(long, value_parser = parse_domain, default_value = "products")]
        domain: Domain,
        #[arg(long, default_value_t = 2000)]
        n_reviews: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file, `.jsonl` or `.csv`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_domain(s: &str) -> Result<Domain, String> {
    match s {
        "products" => Ok(Domain::Products),
        "restaurants" => Ok(Domain::Restaurants),
        _ => Err(format!("unknown domain {s:?} (products or restaurants)")),
    }
}

fn execute(command: Command) -> anyhow::Result<()> {
    let load = |a: &ConfigArgs| config::load(a.config.as_deref(), &a.set, a.seed);
    match command {
        Command::TrainLm(a) => commands::train_lm(&load(&a)?),
        Command::TrainClf(a) => commands::train_clf(&load(&a)?),
        Command::Attack(a) => commands::attack(&load(&a)?),
        Command::Detect(a) => commands::detect(&load(&a)?),
        Command::Report { runs, out } => {
            let text = commands::report(&runs)?;
            print!("{text}");
            if let Some(path) = out {
                run::write_atomic(&path, text.as_bytes())?;
            }
            Ok(())
        }
        Command::SynthCorpus { domain, n_reviews, seed, out } => {
            let cfg = SynthConfig { n_reviews, domain, rng_seed: seed, ..Default::default() };
            commands::synth_corpus(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let validation = e.chain().any(|c| c.is::<ValidationError>());
            eprintln!("error: {e:#}");
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
