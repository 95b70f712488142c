//! Per-API microbenchmarks with deterministic side counters.

use std::sync::mpsc::channel;
use std::time::{Duration, Instant};

use arbiter_core::allocator::LARGE_THRESHOLD;
use arbiter_core::label::{CategoryKind, ObjectLabel};
use arbiter_core::monitor::MonitorConfig;
use arbiter_core::runtime::LatencyStats;
use arbiter_core::{Group, Member};

use crate::report::{BenchReport, Counters, Latency, TIMING_CAVEAT};
use crate::HarnessError;

pub const OPS: [&str; 14] = [
    "ab_null",
    "ab_register",
    "ab_malloc",
    "ab_free",
    "ab_calloc",
    "ab_realloc",
    "ab_mmap",
    "create_category",
    "get_label",
    "get_ownership",
    "get_mem_label",
    "get_privilege",
    "ab_pthread_create",
    "ab_pthread_join",
];

/// Largest request that still lands in a normal block; one such object
/// fills a whole block.
const BLOCK_FILL: u32 = LARGE_THRESHOLD;

#[derive(Debug, Clone, Copy)]
pub struct BenchParams {
    pub iters: u64,
    /// Live members including the root.
    pub members: u32,
    pub asms_kb: u64,
}

fn rt(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Runtime(e.to_string())
}

struct Rig {
    group: Group,
    root: Member,
    idle: Vec<std::sync::mpsc::Sender<()>>,
}

impl Rig {
    fn new(p: BenchParams) -> Result<Rig, HarnessError> {
        let group = Group::boot(MonitorConfig::default());
        let mut root = group.register(None, None).map_err(rt)?;
        let mut idle = Vec::new();
        for _ in 1..p.members.max(1) {
            let (tx, rx) = channel::<()>();
            root.spawn(None, None, move |_m| {
                let _ = rx.recv();
                0
            })
            .map_err(rt)?;
            idle.push(tx);
        }
        for _ in 0..p.asms_kb.div_ceil(64) {
            root.malloc(BLOCK_FILL, &ObjectLabel::Unlabeled).map_err(rt)?;
        }
        Ok(Rig { group, root, idle })
    }

    fn counters(&self) -> Counters {
        self.group.inspect(|m| Counters::from_monitor(m))
    }

    fn live_blocks(&self) -> u64 {
        self.group.inspect(|m| m.allocator().live_block_count() as u64)
    }
}

fn timed<T>(stats: &mut LatencyStats, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    let d = t.elapsed();
    record(stats, d);
    out
}

fn record(s: &mut LatencyStats, d: Duration) {
    if s.count == 0 || d < s.min {
        s.min = d;
    }
    s.max = s.max.max(d);
    s.count += 1;
    s.total += d;
}

pub fn run_bench(op: &str, p: BenchParams) -> Result<BenchReport, HarnessError> {
    if !OPS.contains(&op) {
        return Err(HarnessError::UnknownOp(op.to_string()));
    }
    let mut rig = Rig::new(p)?;
    let mut stats = LatencyStats::default();
    let live_before = rig.live_blocks();
    let label = ObjectLabel::Unlabeled;
    let n = p.iters;

    // untimed setup for ops that consume something
    let mut addrs = Vec::new();
    let mut children = Vec::new();
    match op {
        "ab_free" => {
            for _ in 0..n {
                addrs.push(rig.root.malloc(BLOCK_FILL, &label).map_err(rt)?);
            }
        }
        "ab_realloc" => {
            for _ in 0..n {
                addrs.push(rig.root.malloc(64, &label).map_err(rt)?);
            }
        }
        "ab_pthread_join" => {
            for _ in 0..n {
                children.push(rig.root.spawn(None, None, |_m| 0).map_err(rt)?);
            }
        }
        "get_mem_label" | "get_privilege" => {
            addrs.push(rig.root.malloc(64, &label).map_err(rt)?);
        }
        _ => {}
    }
    let start = rig.counters();
    let root_id = rig.root.self_id();
    let root = &mut rig.root;
    for i in 0..n as usize {
        match op {
            "ab_null" => timed(&mut stats, || root.null()).map_err(rt)?,
            "ab_register" => {
                let g = Group::boot(MonitorConfig::default());
                let m = timed(&mut stats, || g.register(None, None)).map_err(rt)?;
                drop(m);
                g.shutdown();
            }
            "ab_malloc" => {
                timed(&mut stats, || root.malloc(BLOCK_FILL, &label)).map_err(rt)?;
            }
            "ab_calloc" => {
                timed(&mut stats, || root.calloc(1, BLOCK_FILL, &label)).map_err(rt)?;
            }
            "ab_free" => timed(&mut stats, || root.free(addrs[i])).map_err(rt)?,
            "ab_realloc" => {
                timed(&mut stats, || root.realloc(addrs[i], 128)).map_err(rt)?;
            }
            "ab_mmap" => {
                timed(&mut stats, || root.mmap(4096, 0, &label, "")).map_err(rt)?;
            }
            "create_category" => {
                timed(&mut stats, || root.create_category(CategoryKind::Secrecy, "")).map_err(rt)?;
            }
            "get_label" => {
                timed(&mut stats, || root.get_label()).map_err(rt)?;
            }
            "get_ownership" => {
                timed(&mut stats, || root.get_ownership()).map_err(rt)?;
            }
            "get_mem_label" => {
                timed(&mut stats, || root.get_mem_label(addrs[0])).map_err(rt)?;
            }
            "get_privilege" => {
                timed(&mut stats, || root.get_privilege(root_id, addrs[0])).map_err(rt)?;
            }
            "ab_pthread_create" => {
                let child = timed(&mut stats, || root.spawn(None, None, |_m| 0)).map_err(rt)?;
                root.join(child).map_err(rt)?;
            }
            "ab_pthread_join" => {
                timed(&mut stats, || root.join(children[i])).map_err(rt)?;
            }
            _ => unreachable!(),
        }
    }
    let end = rig.counters();
    let rpcs = if op == "ab_register" {
        n
    } else {
        end.by_op.get(op).copied().unwrap_or(0) - start.by_op.get(op).copied().unwrap_or(0)
    };
    let updates = end.perm_updates - start.perm_updates;
    let new_blocks = end.new_blocks - start.new_blocks;
    let (per_unit, expected) = match op {
        "ab_malloc" | "ab_calloc" | "ab_mmap" if new_blocks > 0 => {
            (Some(updates as f64 / new_blocks as f64), Some(p.members.max(1) as u64))
        }
        "ab_pthread_create" if n > 0 => (Some(updates as f64 / n as f64), Some(live_before)),
        _ => (None, None),
    };
    drop(rig.idle.drain(..));
    Ok(BenchReport {
        op: op.to_string(),
        iters: n,
        members: p.members.max(1),
        asms_kb: p.asms_kb,
        latency: Latency::from(&stats),
        rpc_round_trips: rpcs,
        perm_updates: updates,
        new_blocks,
        live_blocks_before: live_before,
        updates_per_unit: per_unit,
        expected_updates_per_unit: expected,
        caveat: TIMING_CAVEAT.to_string(),
    })
}
