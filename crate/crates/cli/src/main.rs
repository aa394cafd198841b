use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use voxshield_cli::commands::{self, Ablation, Method};
use voxshield_cli::{visualize, CliError, CliResult, ExperimentConfig};
use voxshield_core::networks::VictimArch;

#[derive(Parser)]
#[command(name = "voxshield", version, about = "Volumetric unlearnable-example protection pipeline")]
struct Cli {
    /// Leave existing outputs untouched instead of refusing to run.
    #[arg(long, global = true)]
    skip_existing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (clean, val and test splits).
    GenerateData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Build a released dataset from the clean split.
    Protect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        no_spd: bool,
        #[arg(long)]
        no_isc: bool,
        #[arg(long)]
        mask_all_ones: bool,
    },
    /// Train a victim segmenter on a dataset and score it on the clean test split.
    TrainVictim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        victim: String,
    },
    /// Aggregate victim reports into a comparison table.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Report files; defaults to every report under the output directory.
        reports: Vec<PathBuf>,
    },
    /// Render released noise and its spectra on consecutive z-slices as a PNG.
    Visualize {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        protected: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        slices: usize,
        #[arg(long)]
        start: Option<usize>,
    },
}

fn print_written(path: Option<PathBuf>) {
    if let Some(p) = path {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let skip = cli.skip_existing;
    match cli.command {
        Command::GenerateData { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            for p in commands::generate_data(&cfg, skip)? {
                print_written(Some(p));
            }
        }
        Command::Protect {
            config,
            method,
            no_spd,
            no_isc,
            mask_all_ones,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ab = Ablation {
                no_spd,
                no_isc,
                mask_all_ones,
            };
            print_written(commands::protect(&cfg, method, ab, skip)?);
        }
        Command::TrainVictim {
            config,
            dataset,
            victim,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let arch = VictimArch::parse(&victim).map_err(|e| CliError::Config(e.to_string()))?;
            print_written(commands::train_victim(&cfg, &dataset, arch, skip)?);
        }
        Command::Evaluate { config, csv, reports } => {
            let cfg = ExperimentConfig::load(&config)?;
            print!("{}", commands::evaluate(&cfg, &reports, csv.as_deref())?);
        }
        Command::Visualize {
            clean,
            protected,
            id,
            out,
            slices,
            start,
        } => {
            visualize::visualize(&clean, &protected, &id, &out, slices, start)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
