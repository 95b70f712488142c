//! Scenario runner, attack suite and microbenchmarks for arbiter groups.

use std::collections::BTreeMap;

use thiserror::Error;

pub mod attacks;
pub mod bench;
pub mod config;
pub mod report;
pub mod scenario;

use config::Resolved;
use report::{Mismatch, RunReport};
use scenario::Session;

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 2;
pub const EXIT_NOT_BLOCKED: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("unknown op {0:?}")]
    UnknownOp(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Runtime(_) => 1,
            _ => EXIT_CONFIG,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub dump_layout: bool,
}

/// Scripts, then mediated probing, then a comparison against the expected
/// matrix.
pub fn run_scenario(resolved: Resolved, opts: RunOptions) -> Result<RunReport, HarnessError> {
    let principals: Vec<String> = resolved.config.principals.iter().map(|p| p.name.clone()).collect();
    let objects: Vec<String> = resolved.config.objects.iter().map(|o| o.name.clone()).collect();
    let expected = resolved.config.expected_matrix.clone();
    let scenario = resolved.config.name.clone();

    let mut session = Session::start(resolved)?;
    let steps = session.run_scripts()?;
    let layout = opts.dump_layout.then(|| session.layout());
    let observed = session.probe();
    let latency = session.latency();
    let faults = session.group.mmu().fault_log().iter().map(|f| f.to_string()).collect();
    let exits = session.finish();
    let counters = session.counters();
    let (audit_log, audit_digest) = session.audit();
    let exit_statuses: BTreeMap<String, String> = exits.into_iter().map(|(n, s)| (n, s.to_string())).collect();

    let mut mismatches = Vec::new();
    for p in &principals {
        for o in &objects {
            let want = &expected[p][o];
            let got = observed.get(p).and_then(|r| r.get(o)).cloned().unwrap_or_default();
            if &got != want {
                mismatches.push(Mismatch { principal: p.clone(), object: o.clone(), expected: want.clone(), observed: got });
            }
        }
    }
    let failed_steps = steps.iter().filter(|s| !s.ok).count();
    Ok(RunReport {
        scenario,
        principals,
        objects,
        steps,
        expected,
        observed,
        mismatches,
        failed_steps,
        faults,
        audit_digest,
        audit_lines: audit_log.len(),
        audit_log,
        counters,
        latency,
        layout,
        exit_statuses,
    })
}
