//! Command-line entry points: gen-data | train | fisher | adapt | report.

use clap::{Parser, Subcommand};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use tta_bench::config::{FileConfig, RuntimeConfig};
use tta_bench::error::{BenchError, Result};
use tta_bench::experiment::{ensure_dataset, ensure_fisher, ensure_model, run_experiment};
use tta_bench::report::{compare, comparison_csv, load_reports};
use tta_bench::train::evaluate;

#[derive(Parser)]
#[command(
    name = "tta-bench",
    about = "Online test-time adaptation benchmark over synthetic corrupted streams",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset bundle (train/test/probe/fisher splits).
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the source model on the clean training split.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Estimate the Fisher importance map from the fisher pool.
    Fisher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one adaptation experiment and write its report set.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        /// Override adapt.method from the config file.
        #[arg(long)]
        method: Option<String>,
        /// Override adapt.scenario from the config file.
        #[arg(long)]
        scenario: Option<String>,
        /// Run directory name (default: <method>-<scenario>).
        #[arg(long)]
        name: Option<String>,
        /// Replace an existing run directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Aggregate run reports into a comparison table (first input is the
    /// baseline for the accuracy delta column).
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &PathBuf) -> Result<FileConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| BenchError::config(format!("config {}: {e}", path.display())))?;
    FileConfig::parse_json(&text)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config } => {
            let rt = RuntimeConfig::from_file(&load_config(&config)?)?;
            let (bundle, path, created) = ensure_dataset(&rt)?;
            println!(
                "dataset: {} classes, dim {}, splits train={} test={} probe={} fisher={} ({}) -> {}",
                rt.dataset.classes,
                rt.dataset.input_dim,
                bundle.train.len(),
                bundle.clean_test.len(),
                bundle.id_probe.len(),
                bundle.fisher_pool.len(),
                if created { "generated" } else { "cached" },
                path.display()
            );
        }
        Command::Train { config } => {
            let rt = RuntimeConfig::from_file(&load_config(&config)?)?;
            let (bundle, _, _) = ensure_dataset(&rt)?;
            let (model, path, created) = ensure_model(&rt, &bundle)?;
            let acc = evaluate(&model, &bundle.clean_test.inputs, &bundle.clean_test.labels)?;
            println!(
                "source model: clean accuracy {:.2}% after {} epochs ({}) -> {}",
                acc * 100.0,
                rt.train.epochs,
                if created { "trained" } else { "cached" },
                path.display()
            );
        }
        Command::Fisher { config } => {
            let rt = RuntimeConfig::from_file(&load_config(&config)?)?;
            let (bundle, _, _) = ensure_dataset(&rt)?;
            let (model, _, _) = ensure_model(&rt, &bundle)?;
            let (fisher, path, created) = ensure_fisher(&rt, &bundle, &model)?;
            let max = fisher
                .omega()
                .iter()
                .flat_map(|t| t.data())
                .cloned()
                .fold(0.0f64, f64::max);
            println!(
                "fisher map: {} samples, max importance {:.3e} ({}) -> {}",
                fisher.sample_count(),
                max,
                if created { "estimated" } else { "cached" },
                path.display()
            );
        }
        Command::Adapt {
            config,
            method,
            scenario,
            name,
            overwrite,
        } => {
            let mut file = load_config(&config)?;
            if let Some(m) = method {
                file.adapt.method = Some(m);
                if name.is_none() {
                    file.run_name = None;
                }
            }
            if let Some(s) = scenario {
                file.adapt.scenario = Some(s);
                if name.is_none() {
                    file.run_name = None;
                }
            }
            if let Some(n) = name {
                file.run_name = Some(n);
            }
            let rt = RuntimeConfig::from_file(&file)?;
            let (paths, output) = run_experiment(&rt, overwrite)?;
            let agg = &output.report.aggregate;
            println!(
                "adapt {} [{}]: accuracy {:.2}%, ece {:.2}%, forwards {}, backwards {} -> {}",
                rt.adapt.method,
                rt.adapt.scenario,
                agg.accuracy * 100.0,
                agg.ece * 100.0,
                agg.total_forwards,
                agg.total_backwards,
                paths.dir.display()
            );
        }
        Command::Report { inputs, out } => {
            let reports = load_reports(&inputs)?;
            let rows = compare(&reports);
            let csv = comparison_csv(&rows);
            match out {
                Some(path) => {
                    if let Some(parent) = path.parent() {
                        fs::create_dir_all(parent)?;
                    }
                    fs::write(&path, &csv)?;
                    println!("comparison over {} runs -> {}", rows.len(), path.display());
                }
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
