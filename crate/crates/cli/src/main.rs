use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cola::pipeline::Method;

use cola_cli::commands::{self, TheoryFlags};
use cola_cli::config::{Overrides, RunConfig};
use cola_cli::error;

#[derive(Parser)]
#[command(name = "cola", version, about = "Clustered latent optimization: cluster, train, sample and evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run name, the directory under the artifact root.
    #[arg(long)]
    name: Option<String>,
    /// `toy:<K>x<spc>@<H>[:blobs|:shapes|:scatter]` or an image directory.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Images per class taken from the training set.
    #[arg(long)]
    spc: Option<usize>,
    #[arg(long, value_parser = parse_method)]
    mode: Option<Method>,
    /// Sampling temperature.
    #[arg(long)]
    tau: Option<f64>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: cola::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Step I: cluster the latent space (cola mode only).
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Step II: train the generator and latent codes.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the saved trainer state.
        #[arg(long)]
        resume: bool,
        /// Stop (and checkpoint) once this many epochs are done.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Fit the per-cluster posterior and write sampled images.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        n: Option<usize>,
        /// Split the samples evenly over the clusters.
        #[arg(long)]
        per_class: bool,
        /// Output directory; `<run>/samples` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FID and CAS of a synthetic set against the held-out set.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Small-sample classification in the real, synthetic and mix regimes.
    Classify {
        #[command(flatten)]
        common: Common,
    },
    /// Surrogate-estimator thresholds and Monte-Carlo checks.
    Theory {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        prop: u8,
        /// Real sample sizes.
        #[arg(long = "m", value_delimiter = ',')]
        ms: Vec<u64>,
        /// Mean gaps (`--prop 1`).
        #[arg(long = "delta", value_delimiter = ',')]
        deltas: Vec<f64>,
        #[arg(long)]
        var_x: Option<f64>,
        #[arg(long = "var-z", value_delimiter = ',')]
        var_zs: Vec<f64>,
        /// Deviation radii (`--prop 2`).
        #[arg(long = "eps", value_delimiter = ',')]
        epsilons: Vec<f64>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// FID versus CAS on concentrated and sparse synthetic sets.
    Demo {
        #[command(flatten)]
        common: Common,
    },
    /// Print the effective configuration as TOML.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Cluster { common, .. }
            | Command::Gen { common, .. }
            | Command::Sample { common, .. }
            | Command::Eval { common }
            | Command::Classify { common }
            | Command::Theory { common, .. }
            | Command::Demo { common }
            | Command::Config { common } => common,
        }
    }
}

fn run(cli: Cli) -> error::Result<()> {
    let c = cli.command.common();
    let flags = Overrides {
        name: c.name.clone(),
        dataset: c.dataset.clone(),
        seed: c.seed,
        spc: c.spc,
        mode: c.mode,
        tau: c.tau,
    };
    let cfg = RunConfig::resolve(c.config.as_deref(), &flags)?;
    match cli.command {
        Command::Cluster { epochs, .. } => commands::cluster(&cfg, epochs),
        Command::Gen { epochs, resume, until, .. } => commands::gen(&cfg, epochs, resume, until),
        Command::Sample { n, per_class, out, .. } => commands::sample(&cfg, n, per_class, out),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Classify { .. } => commands::classify(&cfg),
        Command::Theory {
            prop,
            ms,
            deltas,
            var_x,
            var_zs,
            epsilons,
            trials,
            ..
        } => commands::theory(
            &cfg,
            prop,
            &TheoryFlags {
                ms,
                deltas,
                var_x,
                var_zs,
                epsilons,
                trials,
            },
        ),
        Command::Demo { .. } => commands::demo(&cfg),
        Command::Config { .. } => {
            let text = toml::to_string(&cfg).map_err(|e| error::CliError::Config(e.to_string()))?;
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
