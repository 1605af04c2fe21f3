use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lobsim::oracle::TinyModel;
use lobsim::scenario::{
    compare_scenarios, load_config, print_rates, run_scenario, validate, RecordKind,
    ScenarioConfig, ScenarioError, ValidationOptions,
};

#[derive(Parser)]
#[command(
    name = "lobsim",
    version,
    about = "Exact stochastic limit order book simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an ensemble and write a CSV bundle.
    Run(RunArgs),
    /// Compare the per-run means of two bundles (B relative to A).
    Compare { a_dir: PathBuf, b_dir: PathBuf },
    /// Check the engine against the exact master-equation solution.
    Validate {
        #[arg(long, value_enum, default_value_t = Model::Tiny)]
        model: Model,
        #[arg(long)]
        runs: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print empty-book arrival rates per level as CSV.
    PrintRates(Source),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Source {
    fn load(&self) -> Result<ScenarioConfig, ScenarioError> {
        match (&self.preset, &self.config) {
            (Some(name), _) => Ok(ScenarioConfig::preset(name)?),
            (None, Some(path)) => load_config(path),
            (None, None) => unreachable!("clap requires one source"),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    runs: Option<u64>,
    #[arg(long)]
    events: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    record: Option<Record>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Record {
    Summary,
    Events,
    Heatmap,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Tiny,
    TinyOverlap,
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let _ = io::stdout().lock().write_all(text.as_bytes());
}

fn run(args: RunArgs) -> Result<ExitCode, ScenarioError> {
    let mut config = args.source.load()?;
    if let Some(n) = args.runs {
        config.runs = n;
    }
    if let Some(n) = args.events {
        config.events = n;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(r) = args.record {
        config.recording.mode = match r {
            Record::Summary => RecordKind::Summary,
            Record::Events => RecordKind::Events,
            Record::Heatmap => RecordKind::Heatmap,
        };
    }
    let out = args
        .out
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&config.name));
    let bundle = run_scenario(&config, &out)?;
    let mut text = format!(
        "{}: {} runs x {} events, seed {}, config {}\n",
        config.name, config.runs, config.events, config.seed, bundle.metadata.config_hash
    );
    for file in &bundle.files {
        text.push_str(&format!("wrote {}\n", file.display()));
    }
    emit(&text);
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: Cli) -> Result<ExitCode, ScenarioError> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::Compare { a_dir, b_dir } => {
            emit(&compare_scenarios(&a_dir, &b_dir)?.to_csv());
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { model, runs, seed } => {
            let variant = match model {
                Model::Tiny => TinyModel::Disjoint,
                Model::TinyOverlap => TinyModel::Overlapping,
            };
            let mut options = ValidationOptions::default();
            if let Some(n) = runs {
                options.runs = n;
            }
            if let Some(s) = seed {
                options.seed = s;
            }
            let report = validate(variant, &options)?;
            emit(&format!("{report}\n"));
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::PrintRates(source) => {
            emit(&print_rates(&source.load()?)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
