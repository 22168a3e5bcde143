use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mrshare_harness::lint::policy_lint;
use mrshare_harness::plot::{emit_trace_plot, PlotError, PlotFormat};
use mrshare_harness::runner::{run_scenario, RunError};
use mrshare_harness::scenario::{Scenario, ValidationError};
use mrshare_verify::{verify_dir, VerifyError};

const EXIT_OK: u8 = 0;
const EXIT_INVALID: u8 = 1;
const EXIT_LEAK: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "mrshare",
    version,
    about = "Run, verify and plot spatial-sharing scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its artifacts.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a run's artifacts for leaks against ground truth.
    Verify {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Draw a top-down plot of a run.
    Plot {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_parser = parse_format)]
        format: PlotFormat,
    },
    /// Report policy rules that exceed the ceiling or can never apply.
    PolicyLint {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn parse_format(s: &str) -> Result<PlotFormat, PlotError> {
    s.parse()
}

fn load(path: &Path) -> Result<Scenario, u8> {
    Scenario::load(path).map_err(|e| {
        eprintln!("error: {e}");
        match e {
            ValidationError::Io(_)
            | ValidationError::Schema(_)
            | ValidationError::Invalid { .. } => EXIT_INVALID,
        }
    })
}

fn execute(command: Command) -> Result<u8, u8> {
    match command {
        Command::Run {
            scenario,
            seed,
            out,
        } => {
            let s = load(&scenario)?;
            match run_scenario(s.doc, seed, &out) {
                Ok(output) => {
                    let delivered: usize = output.frames.values().map(Vec::len).sum();
                    println!(
                        "ok: {} trace records, {} frames delivered, {} audit records, artifacts in {}",
                        output.trace.len(),
                        delivered,
                        output.audit.records().len(),
                        out.display()
                    );
                    Ok(EXIT_OK)
                }
                Err(RunError::Validation(e)) => {
                    eprintln!("error: {e}");
                    Err(EXIT_INVALID)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    Err(EXIT_INTERNAL)
                }
            }
        }
        Command::Verify { scenario, trace } => {
            let s = load(&scenario)?;
            let report = verify_dir(&trace, &s.doc).map_err(|e| {
                eprintln!("error: {e}");
                match e {
                    VerifyError::Io { .. } | VerifyError::Malformed { .. } => EXIT_INVALID,
                }
            })?;
            for v in &report.violations {
                let object = v
                    .object_id
                    .map(|id| format!(" object {id}"))
                    .unwrap_or_default();
                let cell = v
                    .cell
                    .map(|(x, y)| format!(" cell ({x},{y})"))
                    .unwrap_or_default();
                println!(
                    "violation: t={} recipient {}{object}{cell}: {}",
                    v.timestamp, v.recipient, v.reason
                );
            }
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            println!(
                "{verdict}: {} violations, {} frames and {} cells checked",
                report.violations.len(),
                report.frames_checked,
                report.cells_checked
            );
            Ok(if report.passed() { EXIT_OK } else { EXIT_LEAK })
        }
        Command::Plot { trace, format } => {
            if !trace.is_dir() {
                eprintln!("error: {} is not a directory", trace.display());
                return Err(EXIT_INVALID);
            }
            match emit_trace_plot(&trace, format) {
                Ok(path) => {
                    println!("wrote {}", path.display());
                    Ok(EXIT_OK)
                }
                Err(e @ (PlotError::Malformed { .. } | PlotError::UnknownFormat(_))) => {
                    eprintln!("error: {e}");
                    Err(EXIT_INVALID)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    Err(EXIT_INTERNAL)
                }
            }
        }
        Command::PolicyLint { scenario } => {
            let s = load(&scenario)?;
            let findings = policy_lint(&s);
            for f in &findings {
                println!("{f}");
            }
            println!("{} findings", findings.len());
            Ok(if findings.is_empty() {
                EXIT_OK
            } else {
                EXIT_INVALID
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(code) | Err(code) => ExitCode::from(code),
    }
}
