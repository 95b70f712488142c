//! Report types and their text rendering. Every report serializes to JSON
//! with the same content.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use arbiter_core::monitor::Monitor;
use arbiter_core::runtime::LatencyStats;
use serde::Serialize;

use crate::scenario::StepRecord;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub requests: u64,
    pub ok: u64,
    pub denied: u64,
    pub malformed: u64,
    pub errors: u64,
    pub perm_updates: u64,
    pub new_blocks: u64,
    pub released_blocks: u64,
    pub by_op: BTreeMap<String, u64>,
}

impl Counters {
    pub fn from_monitor(m: &Monitor) -> Self {
        let c = m.counters();
        Counters {
            requests: c.requests,
            ok: c.ok,
            denied: c.denied,
            malformed: c.malformed,
            errors: c.errors,
            perm_updates: m.perm_updates(),
            new_blocks: c.new_blocks,
            released_blocks: c.released_blocks,
            by_op: c.by_op.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

/// Latency summary in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Latency {
    pub count: u64,
    pub mean_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
}

impl From<&LatencyStats> for Latency {
    fn from(s: &LatencyStats) -> Self {
        Latency {
            count: s.count,
            mean_ns: s.mean().as_nanos() as u64,
            min_ns: s.min.as_nanos() as u64,
            max_ns: s.max.as_nanos() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub principal: String,
    pub object: String,
    pub expected: String,
    pub observed: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub principals: Vec<String>,
    pub objects: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub expected: BTreeMap<String, BTreeMap<String, String>>,
    pub observed: BTreeMap<String, BTreeMap<String, String>>,
    pub mismatches: Vec<Mismatch>,
    pub failed_steps: usize,
    pub faults: Vec<String>,
    pub audit_digest: String,
    pub audit_lines: usize,
    #[serde(skip)]
    pub audit_log: Vec<String>,
    pub counters: Counters,
    pub latency: BTreeMap<String, Latency>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<String>,
    pub exit_statuses: BTreeMap<String, String>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.failed_steps == 0
    }

    pub fn cells(&self) -> usize {
        self.principals.len() * self.objects.len()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "scenario {}: {} principals, {} objects",
            self.scenario,
            self.principals.len(),
            self.objects.len()
        );
        for r in &self.steps {
            let mark = if r.ok { "" } else { "  [unexpected]" };
            let _ = writeln!(s, "  {}#{} {} -> {}{}", r.principal, r.index, r.step, r.outcome, mark);
        }
        if let Some(layout) = &self.layout {
            let _ = writeln!(s, "layout:");
            for line in layout.lines() {
                let _ = writeln!(s, "  {line}");
            }
        }
        let _ = writeln!(s, "access matrix (observed, mediated):");
        s.push_str(&matrix_table(&self.principals, &self.objects, &self.observed));
        let _ = writeln!(
            s,
            "matrix: {}/{} cells match",
            self.cells() - self.mismatches.len(),
            self.cells()
        );
        for m in &self.mismatches {
            let _ = writeln!(s, "  MISMATCH {}/{}: expected {} observed {}", m.principal, m.object, m.expected, m.observed);
        }
        if self.failed_steps > 0 {
            let _ = writeln!(s, "steps with unexpected outcome: {}", self.failed_steps);
        }
        let _ = writeln!(s, "faults: {}", self.faults.len());
        for f in &self.faults {
            let _ = writeln!(s, "  {f}");
        }
        let c = &self.counters;
        let _ = writeln!(s, "audit: {} lines, sha256 {}", self.audit_lines, self.audit_digest);
        let _ = writeln!(
            s,
            "requests: {} (ok {}, denied {}, malformed {}, error {}); perm updates {}; blocks +{} -{}",
            c.requests, c.ok, c.denied, c.malformed, c.errors, c.perm_updates, c.new_blocks, c.released_blocks
        );
        s.push_str(&latency_table(&self.latency));
        s
    }
}

pub fn matrix_table(
    rows: &[String],
    cols: &[String],
    cells: &BTreeMap<String, BTreeMap<String, String>>,
) -> String {
    let w0 = rows.iter().map(|r| r.len()).max().unwrap_or(0).max("principal".len());
    let widths: Vec<usize> = cols.iter().map(|c| c.len().max(11)).collect();
    let mut s = format!("  {:<w0$}", "principal");
    for (c, w) in cols.iter().zip(&widths) {
        let _ = write!(s, "  {c:<w$}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "  {r:<w0$}");
        for (c, w) in cols.iter().zip(&widths) {
            let cell = cells.get(r).and_then(|row| row.get(c)).map(String::as_str).unwrap_or("?");
            let _ = write!(s, "  {cell:<w$}");
        }
        s.push('\n');
    }
    s
}

pub fn latency_table(latency: &BTreeMap<String, Latency>) -> String {
    let mut s = String::new();
    if latency.is_empty() {
        return s;
    }
    let _ = writeln!(s, "client latency (us):");
    let _ = writeln!(s, "  {:<20} {:>8} {:>10} {:>10} {:>10}", "op", "count", "mean", "min", "max");
    for (op, l) in latency {
        let _ = writeln!(
            s,
            "  {:<20} {:>8} {:>10.2} {:>10.2} {:>10.2}",
            op,
            l.count,
            l.mean_ns as f64 / 1e3,
            l.min_ns as f64 / 1e3,
            l.max_ns as f64 / 1e3
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Blocked,
    NotBlocked,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackResult {
    pub id: u8,
    pub name: String,
    pub verdict: Verdict,
    pub evidence: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackReport {
    pub scenario: String,
    pub attacker: String,
    pub victim: String,
    pub deputy: String,
    pub results: Vec<AttackResult>,
}

impl AttackReport {
    pub fn all_blocked(&self) -> bool {
        self.results.iter().all(|r| r.verdict == Verdict::Blocked)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "attacks on {}: attacker {}, victim object {}, deputy {}\n",
            self.scenario, self.attacker, self.victim, self.deputy
        );
        for r in &self.results {
            let v = match r.verdict {
                Verdict::Blocked => "Blocked",
                Verdict::NotBlocked => "NotBlocked",
            };
            let _ = writeln!(s, "  [{}] {:<28} {:<10} {}", r.id, r.name, v, r.evidence);
        }
        let blocked = self.results.iter().filter(|r| r.verdict == Verdict::Blocked).count();
        let _ = writeln!(s, "{}/{} blocked", blocked, self.results.len());
        s
    }
}

pub const TIMING_CAVEAT: &str = "note: latencies are wall-clock timings of this in-process simulation on this machine; \
they are not comparable to measurements on real hardware and are reported, never asserted. \
The counter columns are deterministic.";

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub op: String,
    pub iters: u64,
    pub members: u32,
    pub asms_kb: u64,
    pub latency: Latency,
    pub rpc_round_trips: u64,
    pub perm_updates: u64,
    pub new_blocks: u64,
    pub live_blocks_before: u64,
    /// Updates per created block (allocation ops) or per created thread.
    pub updates_per_unit: Option<f64>,
    pub expected_updates_per_unit: Option<u64>,
    pub caveat: String,
}

impl BenchReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:>7} {:>7} {:>8} {:>10} {:>10} {:>10} {:>8} {:>8} {:>9} {:>11} {:>8}",
            "op", "iters", "members", "asms_kb", "mean_us", "min_us", "max_us", "rpcs", "updates", "new_blks", "live_blocks", "upd/unit"
        );
        let per = self.updates_per_unit.map(|u| format!("{u:.2}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<18} {:>7} {:>7} {:>8} {:>10.3} {:>10.3} {:>10.3} {:>8} {:>8} {:>9} {:>11} {:>8}",
            self.op,
            self.iters,
            self.members,
            self.asms_kb,
            self.latency.mean_ns as f64 / 1e3,
            self.latency.min_ns as f64 / 1e3,
            self.latency.max_ns as f64 / 1e3,
            self.rpc_round_trips,
            self.perm_updates,
            self.new_blocks,
            self.live_blocks_before,
            per
        );
        if let Some(e) = self.expected_updates_per_unit {
            let _ = writeln!(s, "expected updates per unit: {e}");
        }
        let _ = writeln!(s, "{}", self.caveat);
        s
    }
}
