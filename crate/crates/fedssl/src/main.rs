use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedssl::config::parse_config;
use fedssl::dataset::prepare;
use fedssl::experiment::{parse_sweep, run_experiment, run_sweep};
use fedssl::gradcheck::{run_gradcheck, TOLERANCE};
use fedssl::metrics::{render_dataset_dump, render_partition_report, write_text};
use fedssl::HarnessError;

/// Deterministic federated semi-supervised learning simulator.
#[derive(Parser)]
#[command(name = "fedssl", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment from a TOML config.
    Run { config: PathBuf },
    /// Run the cross product of a parameter grid over a base config.
    Sweep { grid: PathBuf },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        /// Number of seeded model/batch pairs per loss spec.
        #[arg(long, default_value_t = 24)]
        seeds: u64,
    },
    /// Emit per-client class histograms and mismatch scores.
    PartitionReport {
        config: PathBuf,
        /// Also dump every sample (features, label, split tag) as CSV.
        #[arg(long)]
        dump_dataset: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), HarnessError> {
    match cmd {
        Cmd::Run { config } => {
            let cfg = parse_config(&config)?;
            let artifacts = run_experiment(&cfg)?;
            for w in &artifacts.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "method={} seed={} rounds={} final_test_acc={:.6} best_test_acc={:.6}",
                toml::to_string(&cfg.method.name).unwrap_or_default().trim().trim_matches('"'),
                cfg.seed,
                cfg.rounds,
                artifacts.final_accuracy,
                artifacts.best_accuracy
            );
            println!("metrics: {}", artifacts.metrics_path.display());
            Ok(())
        }
        Cmd::Sweep { grid } => {
            let spec = parse_sweep(&grid)?;
            let outcome = run_sweep(&spec, |row| {
                println!(
                    "{} [{}] final_test_acc={:.6} best_test_acc={:.6}",
                    row.run, row.overrides, row.final_accuracy, row.best_accuracy
                );
            })?;
            println!("summary: {}", outcome.summary_path.display());
            Ok(())
        }
        Cmd::Gradcheck { seeds } => {
            let report = run_gradcheck(seeds)?;
            for (spec, err) in report.per_spec() {
                println!("{spec}: max relative error {err:.3e} over {seeds} seeds");
            }
            if report.passed() {
                println!("gradcheck PASS (tolerance {TOLERANCE:.0e})");
                Ok(())
            } else {
                println!("gradcheck FAIL (tolerance {TOLERANCE:.0e})");
                Err(HarnessError::GradcheckFailed { max: report.max })
            }
        }
        Cmd::PartitionReport { config, dump_dataset } => {
            let cfg = parse_config(&config)?;
            let prepared = prepare(&cfg)?;
            std::fs::create_dir_all(&cfg.output_dir)
                .map_err(|e| HarnessError::io(format!("creating {}", cfg.output_dir.display()), e))?;
            let report_path = cfg.output_dir.join("partition_report.csv");
            write_text(&report_path, &render_partition_report(&prepared.clients, prepared.classes))?;
            println!("partition report: {}", report_path.display());
            if dump_dataset {
                let dump_path = cfg.output_dir.join("dataset_dump.csv");
                write_text(&dump_path, &render_dataset_dump(&prepared))?;
                println!("dataset dump: {}", dump_path.display());
            }
            let mismatches: Vec<f64> = prepared
                .clients
                .iter()
                .filter_map(|c| fedssl_core::data::mismatch_score(c).ok())
                .collect();
            if !mismatches.is_empty() {
                let mean = mismatches.iter().sum::<f64>() / mismatches.len() as f64;
                println!("clients={} mean_mismatch={:.4}", prepared.clients.len(), mean);
            }
            Ok(())
        }
    }
}
