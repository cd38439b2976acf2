use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedhen::config::load_config;
use fedhen::data::partition_report;
use fedhen::error::Error;
use fedhen::gradcheck::{self, Tolerance};
use fedhen::metrics::{format_metrics, read_metrics, write_metrics, TargetReport};
use fedhen::sim::{build_partition, load_data, run_experiment};
use fedhen::tensor::Activation;

#[derive(Parser)]
#[command(name = "fedhen", version, about = "Federated training across simple and complex devices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its metrics CSV.
    Run {
        config: PathBuf,
        /// Metrics destination; overrides `metrics` in the config. Without
        /// either, the CSV goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rounds needed to reach each target accuracy, per method.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Comma-separated target accuracies in [0, 1].
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<f64>,
        /// Also write the table as CSV to this path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences on random networks.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = Activation::Tanh)]
        activation: Activation,
    },
    /// Print per-device label statistics of a config's partition.
    SplitReport { config: PathBuf },
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let (train, test) = load_data(&cfg)?;
            let records = run_experiment(&cfg, &train, &test)?;
            match out.or(cfg.output.metrics) {
                Some(path) => write_metrics(&records, path)?,
                None => print!("{}", format_metrics(&records)),
            }
            Ok(true)
        }
        Command::Report { files, targets, csv } => {
            let mut runs = Vec::new();
            for path in &files {
                let records = read_metrics(path)?;
                let method = match records.first() {
                    Some(r) if records.iter().all(|x| x.method == r.method) => r.method,
                    Some(_) => {
                        return Err(Error::InvalidArgument(format!(
                            "{} mixes several methods",
                            path.display()
                        )))
                    }
                    None => {
                        return Err(Error::InvalidArgument(format!(
                            "{} has no records",
                            path.display()
                        )))
                    }
                };
                runs.push((method, records));
            }
            let report = TargetReport::build(&runs, &targets)?;
            print!("{}", report.render_text());
            if let Some(path) = csv {
                fs::write(&path, report.render_csv()).map_err(|e| Error::Io { path, source: e })?;
            }
            Ok(true)
        }
        Command::Gradcheck {
            cases,
            seed,
            activation,
        } => {
            let tol = Tolerance::default();
            let reports = gradcheck::run_suite(cases, seed, activation, &tol)?;
            let mut worst_rel: f64 = 0.0;
            let mut worst_abs: f64 = 0.0;
            let mut failed = 0;
            for (i, r) in reports.iter().enumerate() {
                worst_rel = worst_rel.max(r.max_rel_err);
                worst_abs = worst_abs.max(r.max_abs_err);
                if !r.passed() {
                    failed += 1;
                    println!(
                        "case {i}: widths {:?}, batch {}, {} components out of tolerance (max rel {:.3e})",
                        r.widths,
                        r.batch_size,
                        r.failures.len(),
                        r.max_rel_err
                    );
                }
            }
            println!(
                "{} of {cases} cases passed; max relative error {worst_rel:.3e}, max absolute error {worst_abs:.3e}",
                cases - failed
            );
            Ok(failed == 0)
        }
        Command::SplitReport { config } => {
            let cfg = load_config(&config)?;
            let (train, _) = load_data(&cfg)?;
            let part = build_partition(&cfg, &train)?;
            print!("{}", partition_report(&train, &part));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
