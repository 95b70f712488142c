//! Criteria exercised through the `arbiter` binary.

use std::process::Command;
use std::time::{Duration, Instant};

use serde_json::Value;

use crate::Outcome;

const BUDGET: Duration = Duration::from_secs(5);

fn arbiter(args: &[&str]) -> Result<(i32, String, Duration), String> {
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_arbiter"))
        .args(args)
        .output()
        .map_err(|e| format!("spawn arbiter: {e}"))?;
    let elapsed = t.elapsed();
    let code = out.status.code().unwrap_or(-1);
    if !out.stderr.is_empty() {
        eprint!("{}", String::from_utf8_lossy(&out.stderr));
    }
    Ok((code, String::from_utf8_lossy(&out.stdout).into_owned(), elapsed))
}

/// Runs a bundled scenario and compares every observed cell with `table`.
fn matrix(scenario: &str, table: &[(&str, &[(&str, &str)])]) -> Outcome {
    let (code, out, elapsed) = arbiter(&["--json", "demo", scenario])?;
    let v: Value = serde_json::from_str(&out).map_err(|e| format!("bad json: {e}"))?;
    let observed = &v["observed"];
    let mut cells = 0;
    let mut wrong = Vec::new();
    for (principal, row) in table {
        for (object, want) in row.iter() {
            cells += 1;
            let got = observed[principal][object].as_str().unwrap_or("?");
            if got != *want {
                wrong.push(format!("{principal}/{object} want {want} got {got}"));
            }
        }
    }
    let reported = v["principals"].as_array().map_or(0, |a| a.len()) * v["objects"].as_array().map_or(0, |a| a.len());
    if !wrong.is_empty() {
        return Err(wrong.join("; "));
    }
    if reported != cells {
        return Err(format!("binary reported {reported} cells, table has {cells}"));
    }
    if v["failed_steps"].as_u64() != Some(0) {
        return Err(format!("{} scripted steps had unexpected outcomes", v["failed_steps"]));
    }
    if code != 0 {
        return Err(format!("exit code {code}"));
    }
    if elapsed >= BUDGET {
        return Err(format!("took {:.2}s", elapsed.as_secs_f64()));
    }
    Ok(format!("{cells}/{cells} cells, exit 0, {:.2}s wall", elapsed.as_secs_f64()))
}

pub fn calendar() -> Outcome {
    matrix(
        "calendar",
        &[
            ("alice", &[("alice_cal", "RW"), ("bob_cal", "--"), ("result", "R")]),
            ("bob", &[("alice_cal", "--"), ("bob_cal", "RW"), ("result", "R")]),
            ("charlie", &[("alice_cal", "--"), ("bob_cal", "--"), ("result", "--")]),
            ("scheduler", &[("alice_cal", "R"), ("bob_cal", "R"), ("result", "RW")]),
        ],
    )
}

pub fn kvcache() -> Outcome {
    matrix(
        "kvcache",
        &[
            ("main", &[("a_data", "--"), ("b_data", "--"), ("cq_item", "RW")]),
            ("A", &[("a_data", "RW"), ("b_data", "R"), ("cq_item", "R")]),
            ("B", &[("a_data", "--"), ("b_data", "RW"), ("cq_item", "R")]),
        ],
    )
}

pub fn attacks() -> Outcome {
    let mut summary = Vec::new();
    for scenario in ["calendar", "kvcache"] {
        let (code, out, _) = arbiter(&["--json", "attack", "--scenario", scenario])?;
        let v: Value = serde_json::from_str(&out).map_err(|e| format!("bad json: {e}"))?;
        let results = v["results"].as_array().cloned().unwrap_or_default();
        if results.len() != 5 {
            return Err(format!("{scenario}: {} attacks reported", results.len()));
        }
        for r in &results {
            if r["verdict"] != "Blocked" {
                return Err(format!("{scenario}: {} {} ({})", r["name"], r["verdict"], r["evidence"]));
            }
        }
        if code != 0 {
            return Err(format!("{scenario}: exit code {code}"));
        }
        summary.push(format!("{scenario} 5/5 Blocked"));
    }
    Ok(summary.join(", "))
}

pub fn bench() -> Outcome {
    let mut lines = Vec::new();
    for (op, members, kb) in [("ab_null", "1", "0"), ("ab_malloc", "4", "0"), ("ab_pthread_create", "1", "256")] {
        let (code, out, _) = arbiter(&["bench", "--op", op, "--iters", "200", "--members", members, "--asms-kb", kb])?;
        if code != 0 {
            return Err(format!("{op}: exit code {code}"));
        }
        if !out.contains("not comparable to measurements on real hardware") {
            return Err(format!("{op}: caveat missing"));
        }
        let row = out.lines().find(|l| l.starts_with(op)).ok_or_else(|| format!("{op}: no table row"))?;
        lines.push(row.split_whitespace().collect::<Vec<_>>().join(" "));
    }
    for l in &lines {
        println!("    {l}");
    }
    Ok("caveat printed for every table; latencies reported, not asserted".into())
}
