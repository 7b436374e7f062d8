use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedgkd::config::{parse_config, Overrides};
use fedgkd::harness::{run_experiment, summarize};
use fedgkd::verify::verify;

#[derive(Parser)]
#[command(name = "fedgkd", version, about = "Federated learning simulator with global knowledge distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Record drift and inexactness diagnostics each round.
        #[arg(long)]
        diag: bool,
        /// Threads for client updates within a round.
        #[arg(long)]
        workers: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in verification suites.
    Verify {
        /// gradients, kl, reductions, algebra, vote, partition, checkpoint or all.
        #[arg(long)]
        suite: Option<String>,
    },
    /// Summarize every run directory (containing metrics.jsonl) under a path.
    Summarize {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn fail(kind: &str, err: &fedgkd::Error) -> ExitCode {
    let payload = serde_json::json!({ "error": kind, "message": err.to_string() });
    eprintln!("{payload}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            diag,
            workers,
            out,
        } => {
            let overrides = Overrides {
                seed,
                diagnostics: diag,
                workers,
                output_dir: out,
            };
            let cfg = match parse_config(&config, &overrides) {
                Ok(c) => c,
                Err(e) => return fail("config", &e),
            };
            match run_experiment(&cfg) {
                Ok(summary) => {
                    println!(
                        "{} rounds of {}: best accuracy {:.4} (round {}), final {:.4}; outputs in {}",
                        summary.rounds,
                        cfg.federation.strategy,
                        summary.best_accuracy,
                        summary.best_round,
                        summary.final_accuracy,
                        cfg.output_dir.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail("run", &e),
            }
        }
        Command::Verify { suite } => match verify(suite.as_deref()) {
            Ok(report) => {
                for c in &report.cases {
                    let status = if c.passed { "PASS" } else { "FAIL" };
                    println!("{status} [{}] {}: {}", c.suite, c.name, c.detail);
                }
                let failed = report.cases.iter().filter(|c| !c.passed).count();
                println!("{} passed, {failed} failed", report.cases.len() - failed);
                if report.passed() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::FAILURE
                }
            }
            Err(e) => fail("verify", &e),
        },
        Command::Summarize { dir } => match summarize(&dir) {
            Ok(runs) => {
                println!("{:<24} {:<12} {:>6} {:>9} {:>10}", "run", "strategy", "rounds", "best", "final");
                for r in &runs {
                    let s = &r.summary;
                    println!(
                        "{:<24} {:<12} {:>6} {:>9.4} {:>10.4}",
                        r.run,
                        s.strategy.as_deref().unwrap_or("-"),
                        s.rounds,
                        s.best_accuracy,
                        s.final_accuracy
                    );
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail("summarize", &e),
        },
    }
}
