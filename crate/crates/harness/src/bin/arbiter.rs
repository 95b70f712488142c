use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use harness::bench::{run_bench, BenchParams};
use harness::config;
use harness::report::RunReport;
use harness::{attacks, run_scenario, HarnessError, RunOptions, EXIT_MISMATCH, EXIT_NOT_BLOCKED, EXIT_OK};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "arbiter", about = "Run arbiter scenarios, attacks and microbenchmarks")]
struct Cli {
    /// Print reports as JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a bundled scenario.
    Demo {
        /// calendar or kvcache
        scenario: String,
        /// Print the allocator's block layout after the scripts ran.
        #[arg(long)]
        dump_layout: bool,
        /// Write the monitor's audit log to PATH.
        #[arg(long, value_name = "PATH")]
        audit: Option<PathBuf>,
    },
    /// Run a scenario config file.
    Run {
        config: PathBuf,
        #[arg(long)]
        dump_layout: bool,
        #[arg(long, value_name = "PATH")]
        audit: Option<PathBuf>,
    },
    /// Run the attack suite against a bundled scenario.
    Attack {
        #[arg(long)]
        scenario: String,
    },
    /// Time one API call.
    Bench {
        #[arg(long)]
        op: String,
        #[arg(long, default_value_t = 1000)]
        iters: u64,
        /// Live members including the root.
        #[arg(long, default_value_t = 1)]
        members: u32,
        /// Segment memory preallocated before timing, in KiB.
        #[arg(long = "asms-kb", default_value_t = 0)]
        asms_kb: u64,
    },
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
    } else {
        print!("{}", text());
    }
}

fn scenario(text: &str, dump_layout: bool, audit: Option<PathBuf>, json: bool) -> Result<i32, HarnessError> {
    let resolved = config::load(text)?;
    let report: RunReport = run_scenario(resolved, RunOptions { dump_layout })?;
    if let Some(path) = audit {
        let mut body = report.audit_log.join("\n");
        body.push('\n');
        std::fs::write(path, body)?;
    }
    emit(json, &report, || report.render());
    Ok(if report.passed() { EXIT_OK } else { EXIT_MISMATCH })
}

fn run(cli: Cli) -> Result<i32, HarnessError> {
    let json = cli.json;
    match cli.cmd {
        Cmd::Demo { scenario: name, dump_layout, audit } => {
            let text = config::bundled(&name).ok_or(HarnessError::UnknownScenario(name))?;
            scenario(text, dump_layout, audit, json)
        }
        Cmd::Run { config: path, dump_layout, audit } => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| HarnessError::ConfigInvalid(format!("{}: {e}", path.display())))?;
            scenario(&text, dump_layout, audit, json)
        }
        Cmd::Attack { scenario } => {
            let report = attacks::run_attacks(&scenario)?;
            emit(json, &report, || report.render());
            Ok(if report.all_blocked() { EXIT_OK } else { EXIT_NOT_BLOCKED })
        }
        Cmd::Bench { op, iters, members, asms_kb } => {
            let report = run_bench(&op, BenchParams { iters, members, asms_kb })?;
            emit(json, &report, || report.render());
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { harness::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("arbiter: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
