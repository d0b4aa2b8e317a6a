use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use analog_cli::pipeline;
use analog_cli::{CliResult, Context, RunConfig, Variant};

#[derive(Parser)]
#[command(
    name = "analog",
    version,
    about = "Bayesian analog forecasting of spatio-temporal fields"
)]
struct Args {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run a single variant.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic data set and a config that uses it.
    Synth,
    /// Estimate and save the spatial bases.
    Basis,
    /// Sample the posterior for every variant, region and lead.
    Train,
    /// Posterior predictive and baseline forecasts of the hold-out period.
    Forecast,
    /// Score forecasts and write plot-ready time series.
    Evaluate,
    /// Train, forecast and evaluate.
    Compare,
}

fn load_config(args: &Args) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).context(|| format!("config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(v) = args.variant {
        cfg.variants = vec![v];
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &Args) -> CliResult<()> {
    let cfg = load_config(args)?;
    match args.command {
        Command::Synth => {
            let path = pipeline::synth(&cfg, &cfg.output_dir)?;
            println!("{}", path.display());
        }
        Command::Basis => {
            for path in pipeline::write_bases(&cfg)? {
                println!("{}", path.display());
            }
        }
        Command::Train => {
            let manifest = pipeline::train(&cfg, args.jobs)?;
            println!(
                "{} chains written to {}",
                manifest.chains.len(),
                cfg.output_dir.join("chains").display()
            );
        }
        Command::Forecast => {
            let manifest = pipeline::forecast(&cfg, args.jobs)?;
            println!(
                "{} forecasts written to {}",
                manifest.forecasts.len(),
                cfg.output_dir.join("forecasts").display()
            );
        }
        Command::Evaluate => {
            pipeline::evaluate(&cfg)?;
            println!("{}", cfg.output_dir.join("scorecard.csv").display());
        }
        Command::Compare => {
            pipeline::compare(&cfg, args.jobs)?;
            println!("{}", cfg.output_dir.join("scorecard.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
