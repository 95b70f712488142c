//! Random alloc/free/realloc workloads against the allocator, checked op by op
//! against shadow maps of objects, blocks and recycled runs. A sparse store
//! plays the monitor's part of copying on moves and discarding released runs,
//! and known byte patterns are verified after every realloc and in periodic
//! sweeps.

use std::collections::{BTreeMap, BTreeSet};

use arbiter_core::allocator::{
    Allocator, BlockKind, NewBlock, PageRun, ASMS_BASE, ASMS_LIMIT, BLOCK_PAGES, BLOCK_SIZE, LARGE_THRESHOLD, PAGE_SIZE,
};
use arbiter_core::label::{Category, CategoryKind, ObjectLabel};
use arbiter_core::protection::AsmsStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const SEEDS: u64 = 100;
const OPS: usize = 10_000;
const MAX_SIZE: u32 = 200 * 1024;
const SWEEP_EVERY: usize = 1000;
const PATTERN: u32 = 24;

fn labels() -> Vec<ObjectLabel> {
    let c = |id, kind| Category::new(id, kind);
    let (s1, s2, s3) = (c(1, CategoryKind::Secrecy), c(2, CategoryKind::Secrecy), c(3, CategoryKind::Secrecy));
    let (i1, i2) = (c(4, CategoryKind::Integrity), c(5, CategoryKind::Integrity));
    let sets: [&[Category]; 8] = [&[], &[s1], &[s2], &[s1, s2], &[i1], &[s1, i1], &[s3, i2], &[s1, s2, s3, i1, i2]];
    let mut v = vec![ObjectLabel::Unlabeled];
    v.extend(sets.iter().map(|s| ObjectLabel::Labeled(s.iter().copied().collect())));
    v
}

struct Obj {
    size: u32,
    label: usize,
    /// Bytes written at known offsets.
    known: Vec<(u32, Vec<u8>)>,
}

struct Shadow {
    labels: Vec<ObjectLabel>,
    objects: BTreeMap<u32, Obj>,
    /// start -> (pages, label index, kind)
    blocks: BTreeMap<u32, (u32, usize, BlockKind)>,
    recycled: BTreeMap<usize, BTreeSet<u32>>,
    store: AsmsStore,
    a: Allocator,
    rng: ChaCha8Rng,
    seed: u64,
    op: usize,
}

type Check = Result<(), String>;

impl Shadow {
    fn fail(&self, what: String) -> String {
        format!("seed {} op {}: {what}", self.seed, self.op)
    }

    fn label_index(&self, l: &ObjectLabel) -> usize {
        self.labels.iter().position(|x| x == l).expect("known label")
    }

    fn size(&mut self) -> u32 {
        let x: f64 = self.rng.gen_range(0.0..(MAX_SIZE as f64).ln());
        (x.exp() as u32).clamp(1, MAX_SIZE)
    }

    fn pick(&mut self) -> Option<u32> {
        if self.objects.is_empty() {
            return None;
        }
        let i = self.rng.gen_range(0..self.objects.len());
        self.objects.keys().nth(i).copied()
    }

    fn block_of(&self, addr: u32) -> Option<(u32, u32, usize, BlockKind)> {
        let (&s, &(p, l, k)) = self.blocks.range(..=addr).next_back()?;
        (addr < s + p * PAGE_SIZE).then_some((s, p, l, k))
    }

    /// Checks a fresh block's placement, then records it.
    fn on_new_block(&mut self, nb: &NewBlock, before: (u32, u32)) -> Check {
        let (fwd, bwd) = before;
        let (fwd2, bwd2) = self.a.cursors();
        let li = self.label_index(&nb.label);
        let run = nb.run;
        if run.start < ASMS_BASE || run.end() > ASMS_LIMIT || !run.start.is_multiple_of(PAGE_SIZE) {
            return Err(self.fail(format!("block {run:?} outside the segment")));
        }
        match nb.kind {
            BlockKind::Normal => {
                if run.pages != BLOCK_PAGES {
                    return Err(self.fail(format!("normal block of {} pages", run.pages)));
                }
                let same = self.recycled.get(&li).is_some_and(|s| !s.is_empty());
                if same {
                    if !self.recycled[&li].contains(&run.start) || fwd2 != fwd {
                        return Err(self.fail(format!("same-label recycled block skipped for {:#x}", run.start)));
                    }
                } else if bwd - fwd >= BLOCK_SIZE {
                    if run.start != fwd || fwd2 != fwd + BLOCK_SIZE {
                        return Err(self.fail(format!("block {:#x} not taken at the forward cursor {fwd:#x}", run.start)));
                    }
                } else if !self.recycled.values().any(|s| s.contains(&run.start)) {
                    return Err(self.fail(format!("cursor exhausted but {:#x} is not a recycled run", run.start)));
                }
                for set in self.recycled.values_mut() {
                    set.remove(&run.start);
                }
                self.recycled.retain(|_, s| !s.is_empty());
                if run.end() > fwd2 {
                    return Err(self.fail("normal block above the forward cursor".into()));
                }
            }
            BlockKind::Large => {
                let carved = bwd2 < bwd;
                if carved && (run.start != bwd2 || bwd - bwd2 != run.pages * PAGE_SIZE) {
                    return Err(self.fail(format!("large block {:#x} not carved at the backward cursor", run.start)));
                }
                if run.start < bwd2 {
                    return Err(self.fail("large block below the backward cursor".into()));
                }
            }
        }
        if let Some((s, ..)) = self.blocks.range(..run.end()).next_back().map(|(s, v)| (*s, *v)) {
            let (p, ..) = self.blocks[&s];
            if s + p * PAGE_SIZE > run.start {
                return Err(self.fail(format!("block {:#x} overlaps block {s:#x}", run.start)));
            }
        }
        self.blocks.insert(run.start, (run.pages, li, nb.kind));
        Ok(())
    }

    fn on_released(&mut self, run: PageRun) -> Check {
        let Some((pages, li, kind)) = self.blocks.remove(&run.start) else {
            return Err(self.fail(format!("released unknown block {:#x}", run.start)));
        };
        if pages != run.pages {
            return Err(self.fail("released run size differs".into()));
        }
        if self.objects.range(run.start..run.end()).next().is_some() {
            return Err(self.fail(format!("block {:#x} released while holding live objects", run.start)));
        }
        if kind == BlockKind::Normal {
            self.recycled.entry(li).or_default().insert(run.start);
        }
        self.store.discard(run.into());
        Ok(())
    }

    /// Places `[addr, addr+size)` among live objects and inside a block of
    /// the right label.
    fn place(&mut self, addr: u32, size: u32, li: usize) -> Check {
        let end = addr as u64 + size as u64;
        if let Some((&p, o)) = self.objects.range(..=addr).next_back() {
            if p as u64 + o.size as u64 > addr as u64 {
                return Err(self.fail(format!("object {addr:#x} overlaps {p:#x}")));
            }
        }
        if let Some((&n, _)) = self.objects.range(addr..).next() {
            if (n as u64) < end {
                return Err(self.fail(format!("object {addr:#x}+{size} overlaps {n:#x}")));
            }
        }
        let Some((bs, bp, bl, kind)) = self.block_of(addr) else {
            return Err(self.fail(format!("object {addr:#x} outside every block")));
        };
        if end > bs as u64 + (bp * PAGE_SIZE) as u64 {
            return Err(self.fail(format!("object {addr:#x}+{size} spills out of block {bs:#x}")));
        }
        if bl != li {
            return Err(self.fail(format!("object label {li} in block labeled {bl}")));
        }
        if kind == BlockKind::Normal && size > LARGE_THRESHOLD {
            return Err(self.fail(format!("{size}-byte object in a normal block")));
        }
        Ok(())
    }

    fn stamp(&mut self, addr: u32, size: u32) -> Vec<(u32, Vec<u8>)> {
        let segments = if size <= 2 * PATTERN { vec![(0, size)] } else { vec![(0, PATTERN), (size - PATTERN, PATTERN)] };
        let mut known = Vec::new();
        for (off, n) in segments {
            let bytes: Vec<u8> = (0..n).map(|_| self.rng.gen()).collect();
            self.store.write(addr + off, &bytes);
            known.push((off, bytes));
        }
        known
    }

    fn verify_contents(&self, addr: u32) -> Check {
        let o = &self.objects[&addr];
        for (off, bytes) in &o.known {
            if self.store.read(addr + off, bytes.len()) != *bytes {
                return Err(self.fail(format!("contents of {addr:#x} at +{off} changed")));
            }
        }
        Ok(())
    }

    fn alloc(&mut self) -> Check {
        let size = self.size();
        let li = self.rng.gen_range(0..self.labels.len());
        let before = self.a.cursors();
        let label = self.labels[li].clone();
        let a = self.a.malloc(size, &label).map_err(|e| self.fail(format!("malloc {size}: {e}")))?;
        if let Some(nb) = &a.new_block {
            self.on_new_block(nb, before)?;
        }
        self.place(a.addr, size, li)?;
        let known = self.stamp(a.addr, size);
        self.objects.insert(a.addr, Obj { size, label: li, known });
        Ok(())
    }

    fn free(&mut self, addr: u32) -> Check {
        let o = self.objects.remove(&addr).unwrap();
        let r = self.a.free(addr).map_err(|e| self.fail(format!("free {addr:#x}: {e}")))?;
        if r.size != o.size || r.label != self.labels[o.label] {
            return Err(self.fail("free reported the wrong object".into()));
        }
        if let Some(run) = r.released {
            self.on_released(run)?;
        }
        Ok(())
    }

    fn realloc(&mut self, addr: u32) -> Check {
        let size = self.size();
        let before = self.a.cursors();
        let old = self.objects.remove(&addr).unwrap();
        let r = self.a.realloc(addr, size).map_err(|e| self.fail(format!("realloc {addr:#x}->{size}: {e}")))?;
        if let Some(m) = &r.moved {
            if m.from != addr || m.copy_len != old.size.min(size) {
                return Err(self.fail(format!("move {m:?} for {addr:#x} {}->{size}", old.size)));
            }
            self.store.copy_within(m.from, r.addr, m.copy_len as usize);
        } else if r.addr != addr {
            return Err(self.fail("address changed without a move".into()));
        }
        if let Some(nb) = &r.new_block {
            self.on_new_block(nb, before)?;
        }
        if let Some(run) = r.released {
            self.on_released(run)?;
        }
        self.place(r.addr, size, old.label)?;
        let known = old
            .known
            .into_iter()
            .filter(|(off, _)| *off < size)
            .map(|(off, mut b)| {
                b.truncate((size - off) as usize);
                (off, b)
            })
            .collect();
        self.objects.insert(r.addr, Obj { size, label: old.label, known });
        self.verify_contents(r.addr)?;
        let n = size.min(PATTERN);
        let tail: Vec<u8> = (0..n).map(|_| self.rng.gen()).collect();
        self.store.write(r.addr + size - n, &tail);
        let o = self.objects.get_mut(&r.addr).unwrap();
        o.known.retain(|(off, b)| off + b.len() as u32 <= size - n);
        o.known.push((size - n, tail));
        Ok(())
    }

    /// Whole-state comparison with the allocator plus page purity.
    fn sweep(&self) -> Check {
        let (fwd, bwd) = self.a.cursors();
        if !(ASMS_BASE <= fwd && fwd <= bwd && bwd <= ASMS_LIMIT) {
            return Err(self.fail(format!("cursors {fwd:#x}/{bwd:#x} out of order")));
        }
        let mut live: BTreeMap<u32, (u32, usize, BlockKind)> = BTreeMap::new();
        for b in self.a.blocks() {
            live.insert(b.start, (b.pages, self.label_index(&b.label), b.kind));
            let below = b.start + b.pages * PAGE_SIZE <= fwd;
            let above = b.start >= bwd;
            if (b.kind == BlockKind::Normal && !below) || (b.kind == BlockKind::Large && !above) {
                return Err(self.fail(format!("{:?} block {:#x} on the wrong side of the cursors", b.kind, b.start)));
            }
        }
        if live != self.blocks {
            return Err(self.fail("allocator blocks differ from the shadow".into()));
        }
        let recycled: Vec<PageRun> = self
            .recycled
            .values()
            .flatten()
            .map(|&start| PageRun { start, pages: BLOCK_PAGES })
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if self.a.recycled_runs() != recycled {
            return Err(self.fail("recycled runs differ from the shadow".into()));
        }
        let objs: BTreeMap<u32, (u32, ObjectLabel)> =
            self.a.objects().map(|e| (e.addr, (e.size, e.label.clone()))).collect();
        if objs.len() != self.objects.len()
            || objs
                .iter()
                .zip(&self.objects)
                .any(|((a, (s, l)), (b, o))| a != b || *s != o.size || *l != self.labels[o.label])
        {
            return Err(self.fail("allocator objects differ from the shadow".into()));
        }
        let mut prev: Option<(u32, u32, usize)> = None;
        for (&addr, o) in &self.objects {
            if let Some((pa, ps, pl)) = prev {
                if pa + ps > addr {
                    return Err(self.fail(format!("objects {pa:#x} and {addr:#x} overlap")));
                }
                if pl != o.label && (pa + ps - 1) / PAGE_SIZE == addr / PAGE_SIZE {
                    return Err(self.fail(format!("page {:#x} holds two labels", addr / PAGE_SIZE * PAGE_SIZE)));
                }
            }
            prev = Some((addr, o.size, o.label));
            self.verify_contents(addr)?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct Tally {
    ops: u64,
    new_blocks: u64,
    reused: u64,
    moves: u64,
}

fn workload(seed: u64, labels: Vec<ObjectLabel>) -> Result<Tally, String> {
    let mut s = Shadow {
        labels,
        objects: BTreeMap::new(),
        blocks: BTreeMap::new(),
        recycled: BTreeMap::new(),
        store: AsmsStore::new(),
        a: Allocator::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        seed,
        op: 0,
    };
    let mut t = Tally::default();
    for op in 0..OPS {
        s.op = op;
        let roll: f64 = s.rng.gen();
        let blocks_before = s.blocks.len();
        let recycled_before: usize = s.recycled.values().map(|r| r.len()).sum();
        match s.pick() {
            Some(addr) if roll < 0.30 => s.free(addr)?,
            Some(addr) if roll < 0.55 => {
                let from = addr;
                s.realloc(addr)?;
                if !s.objects.contains_key(&from) {
                    t.moves += 1;
                }
            }
            _ => s.alloc()?,
        }
        t.ops += 1;
        let recycled_after: usize = s.recycled.values().map(|r| r.len()).sum();
        if s.blocks.len() > blocks_before {
            t.new_blocks += 1;
        }
        if recycled_after < recycled_before {
            t.reused += 1;
        }
        if (op + 1) % SWEEP_EVERY == 0 {
            s.sweep()?;
        }
    }
    s.sweep()?;
    while let Some(addr) = s.pick() {
        s.free(addr)?;
    }
    s.sweep()?;
    if s.a.live_block_count() != 0 {
        return Err(format!("seed {seed}: blocks left after freeing everything"));
    }
    Ok(t)
}

pub fn run() -> Outcome {
    let labels = labels();
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).min(16) as u64;
    let results: Vec<Result<Tally, String>> = std::thread::scope(|sc| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let labels = labels.clone();
                sc.spawn(move || {
                    (0..SEEDS)
                        .filter(|s| s % workers == w)
                        .map(|seed| workload(seed, labels.clone()))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker")).collect()
    });
    let mut total = Tally::default();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(t) => {
                total.ops += t.ops;
                total.new_blocks += t.new_blocks;
                total.reused += t.reused;
                total.moves += t.moves;
            }
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        let n = errors.len();
        errors.truncate(3);
        return Err(format!("{n} seeds with violations: {}", errors.join("; ")));
    }
    if total.reused == 0 || total.moves == 0 {
        return Err("workload never reused a recycled block or moved an object".into());
    }
    Ok(format!(
        "0 violations; {SEEDS} seeds x {OPS} ops over {} labels, {} new blocks ({} from recycled runs), {} moving reallocs",
        labels.len(),
        total.new_blocks,
        total.reused,
        total.moves
    ))
}
