use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use alphaedge::datastream::{generate_synthetic, write_csv, SynthSpec};
use alphaedge::error::{Error, Result};
use alphaedge::harness::{
    run_experiment, run_sweep, sweep_csv, write_report, Axis, ExperimentConfig, ExperimentReport,
    OutputFormat,
};

#[derive(Parser)]
#[command(
    name = "alphaedge",
    version,
    about = "Decentralized online federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config and write its report files.
    Run(RunArgs),
    /// Run the experiment once per value of a config key.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// `key=v1,v2,...`; dotted keys reach nested fields.
        #[arg(long)]
        axis: String,
    },
    /// Generate synthetic streams as CSV.
    Gen {
        /// SynthSpec JSON file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Check an experiment config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn with_seed(mut value: Value, seed: Option<u64>) -> Value {
    if let (Some(seed), Some(obj)) = (seed, value.as_object_mut()) {
        obj.insert("seed".into(), seed.into());
        obj.insert("seeds".into(), Value::Array(vec![seed.into()]));
    }
    value
}

fn print_summary(report: &ExperimentReport, label: &str) {
    for s in &report.summary {
        let mean = s
            .mean
            .map(|m| format!("{m:.4}"))
            .unwrap_or_else(|| "-".into());
        let se = s
            .std_err
            .map(|m| format!("{m:.4}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{label}{:<10} mean {mean}  se {se}  seeds {}",
            s.strategy.name(),
            s.per_seed.len()
        );
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => {
            let value = with_seed(read_json(&args.config)?, args.seed);
            let config = ExperimentConfig::from_value(value, args.config.parent())?;
            let report = run_experiment(&config)?;
            let files = write_report(&report, &args.out, args.format.into())?;
            if !args.quiet {
                print_summary(&report, "");
                eprintln!(
                    "wrote {} files to {} in {:.1}s",
                    files.len(),
                    args.out.display(),
                    report.wall_time_secs
                );
            }
        }
        Command::Sweep { run, axis } => {
            let axis: Axis = axis.parse()?;
            let value = with_seed(read_json(&run.config)?, run.seed);
            let points = run_sweep(&value, run.config.parent(), &axis)?;
            for (i, p) in points.iter().enumerate() {
                write_report(
                    &p.report,
                    &run.out.join(format!("point{i}")),
                    run.format.into(),
                )?;
                if !run.quiet {
                    print_summary(&p.report, &format!("{}={}  ", axis.key, p.value));
                }
            }
            let path = run.out.join("sweep.csv");
            std::fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
            std::fs::write(&path, sweep_csv(&axis, &points)).map_err(|e| Error::io(&path, e))?;
        }
        Command::Gen {
            config,
            seed,
            out,
            quiet,
        } => {
            let mut spec: SynthSpec = serde_json::from_value(read_json(&config)?)
                .map_err(|e| Error::config(format!("{}: {e}", config.display())))?;
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let streams = generate_synthetic(&spec)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let path = out.join("streams.csv");
            write_csv(&streams, &path)?;
            if !quiet {
                eprintln!("wrote {}", path.display());
            }
        }
        Command::Validate { config, quiet } => {
            let parsed = ExperimentConfig::from_path(&config)?;
            parsed.validate()?;
            if !quiet {
                println!("{}: ok", config.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
