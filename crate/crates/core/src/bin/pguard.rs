use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pguard_core::bench::{bench_command, parse_range};
use pguard_core::gen::{seed_from_env, DEFAULT_SEED};
use pguard_core::merge::ConflictPolicy;
use pguard_core::monitor::MonitorError;
use pguard_core::report::{dump_store, guarded_registry, run_command, Mode, RunError};
use pguard_core::scenario::load_scenario;

#[derive(Parser)]
#[command(name = "pguard", version, about = "Extension pipeline simulator with patch-store monitors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Records,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and print a report.
    Run {
        file: PathBuf,
        #[arg(long, default_value = "differential")]
        mode: Mode,
        /// Overrides the scenario's [guard] policy.
        #[arg(long)]
        policy: Option<ConflictPolicy>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Print 0 for all step timings.
        #[arg(long)]
        mask_timings: bool,
    },
    /// Measure guarded against unguarded overhead.
    Bench {
        #[arg(long, default_value = "1..10")]
        ext: String,
        #[arg(long, default_value = "50..500")]
        dom: String,
        #[arg(long, default_value_t = 50)]
        reps: usize,
    },
    /// Check the guarded slot layout of a scenario.
    Verify { file: PathBuf },
    /// Print the guarded run's patch store as records.
    DumpStore {
        file: PathBuf,
        #[arg(long)]
        policy: Option<ConflictPolicy>,
    },
}

fn fail(err: &RunError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            file,
            mode,
            policy,
            format,
            mask_timings,
        } => {
            let report = match load_scenario(&file)
                .map_err(RunError::from)
                .and_then(|s| run_command(&s, mode, policy))
            {
                Ok(r) => r,
                Err(e) => return fail(&e),
            };
            match format {
                Format::Table => print!("{}", report.render_table(mask_timings)),
                Format::Records => print!("{}", report.render_records()),
            }
            ExitCode::from(report.exit_code() as u8)
        }
        Command::Bench { ext, dom, reps } => {
            let (ext, dom) = match (parse_range(&ext), parse_range(&dom)) {
                (Ok(e), Ok(d)) => (e, d),
                (Err(e), _) | (_, Err(e)) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(4);
                }
            };
            let seed = seed_from_env(DEFAULT_SEED);
            print!("{}", bench_command(&ext, &dom, reps, seed).render());
            ExitCode::SUCCESS
        }
        Command::Verify { file } => {
            let checked = load_scenario(&file).map_err(RunError::from).and_then(|s| {
                let spec = s.guard_spec();
                let (g, _) = guarded_registry(&s, spec.config)?;
                Ok(g.verify(&spec.privileges)?)
            });
            match checked {
                Ok(violations) if violations.is_empty() => {
                    println!("ok");
                    ExitCode::SUCCESS
                }
                Ok(violations) => {
                    for v in &violations {
                        println!("{v}");
                    }
                    ExitCode::from(3)
                }
                Err(RunError::Monitor(MonitorError::PrivilegeDenied(reason))) => {
                    eprintln!("error: verification denied: {reason}");
                    ExitCode::from(4)
                }
                Err(e) => fail(&e),
            }
        }
        Command::DumpStore { file, policy } => {
            match load_scenario(&file)
                .map_err(RunError::from)
                .and_then(|s| dump_store(&s, policy))
            {
                Ok(text) => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
    }
}
