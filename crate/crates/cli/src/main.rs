use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mtrl_cli::{audit_file, generate, run_file, workers_from_env, ExperimentKind, Generator, Outcome};

#[derive(Parser)]
#[command(name = "mtrl", version, about = "Multitask RL experiments and exact audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Run an audit suite (meg_audit, lemma_linear2, lqr_suite, mirror_audit).
    Audit { kind: String, config: PathBuf },
    /// Write environment files.
    Gen {
        #[command(subcommand)]
        generator: Generator,
        /// Output directory.
        #[arg(short, long, global = true, default_value = ".")]
        out: PathBuf,
    },
}

fn report(outcome: &Outcome) -> ExitCode {
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    if outcome.checks_total > 0 {
        println!(
            "{} of {} checks passed",
            outcome.checks_total - outcome.checks_failed,
            outcome.checks_total
        );
    }
    if outcome.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = workers_from_env().and_then(|workers| {
        if let Some(n) = workers {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        }
        match cli.command {
            Command::Run { config } => run_file(&config).map(|o| report(&o)),
            Command::Audit { kind, config } => {
                let kind = ExperimentKind::parse(&kind)?;
                audit_file(kind, &config).map(|o| report(&o))
            }
            Command::Gen { generator, out } => generate(&generator, &out).map(|files| {
                for f in files {
                    println!("wrote {}", f.display());
                }
                ExitCode::SUCCESS
            }),
        }
    });
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}
