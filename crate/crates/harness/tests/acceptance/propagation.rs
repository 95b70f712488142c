//! Range-update counts seen by the protection layer for block creation and
//! thread creation.

use std::sync::mpsc::{channel, Sender};

use arbiter_core::allocator::LARGE_THRESHOLD;
use arbiter_core::label::ObjectLabel;
use arbiter_core::monitor::MonitorConfig;
use arbiter_core::{Group, Member};

use crate::Outcome;

const SIZES: [u64; 6] = [1, 2, 4, 8, 16, 64];

fn updates(g: &Group) -> u64 {
    g.inspect(|m| m.mmu().perm_updates())
}

fn blocks(g: &Group) -> u64 {
    g.inspect(|m| m.allocator().live_block_count() as u64)
}

fn members(g: &Group) -> u64 {
    g.inspect(|m| m.registry().members().len() as u64)
}

/// Root plus `k - 1` parked children.
fn group_of(k: u64) -> Result<(Group, Member, Vec<Sender<()>>), String> {
    let g = Group::boot(MonitorConfig::default());
    let mut root = g.register(None, None).map_err(|e| e.to_string())?;
    let mut parked = Vec::new();
    for _ in 1..k {
        let (tx, rx) = channel::<()>();
        root.spawn(None, None, move |_m| {
            let _ = rx.recv();
            0
        })
        .map_err(|e| e.to_string())?;
        parked.push(tx);
    }
    Ok((g, root, parked))
}

fn block_creation(k: u64) -> Result<(), String> {
    let (g, mut root, parked) = group_of(k)?;
    if members(&g) != k {
        return Err(format!("k={k}: {} live members", members(&g)));
    }
    let open = ObjectLabel::Unlabeled;
    for round in 0..3 {
        let (u0, b0) = (updates(&g), blocks(&g));
        root.malloc(LARGE_THRESHOLD, &open).map_err(|e| e.to_string())?;
        let (du, db) = (updates(&g) - u0, blocks(&g) - b0);
        if db != 1 || du != k {
            return Err(format!("k={k} round {round}: {db} new blocks, {du} updates"));
        }
    }
    // a request that fits an existing block touches no table
    root.malloc(16, &open).map_err(|e| e.to_string())?;
    let u0 = updates(&g);
    root.malloc(16, &open).map_err(|e| e.to_string())?;
    if updates(&g) != u0 {
        return Err(format!("k={k}: allocation inside a live block issued updates"));
    }
    drop(parked);
    drop(root);
    g.shutdown();
    Ok(())
}

fn thread_creation(n: u64) -> Result<(), String> {
    let g = Group::boot(MonitorConfig::default());
    let mut root = g.register(None, None).map_err(|e| e.to_string())?;
    for _ in 0..n {
        root.malloc(LARGE_THRESHOLD, &ObjectLabel::Unlabeled).map_err(|e| e.to_string())?;
    }
    if blocks(&g) != n {
        return Err(format!("n={n}: {} live blocks", blocks(&g)));
    }
    for round in 0..2 {
        let u0 = updates(&g);
        let child = root.spawn(None, None, |_m| 0).map_err(|e| e.to_string())?;
        let du = updates(&g) - u0;
        root.join(child).map_err(|e| e.to_string())?;
        if du != n {
            return Err(format!("n={n} round {round}: {du} updates"));
        }
    }
    drop(root);
    g.shutdown();
    Ok(())
}

pub fn run() -> Outcome {
    let mut rows = Vec::new();
    for k in SIZES {
        block_creation(k)?;
        rows.push(format!("k={k}:{k}"));
    }
    for n in SIZES {
        thread_creation(n)?;
        rows.push(format!("n={n}:{n}"));
    }
    Ok(format!("exact counts {}", rows.join(" ")))
}
