//! Permission-oriented allocator over the ASMS address range.
//!
//! Objects with identical labels share pages; objects with different labels
//! never do. Normal blocks (16 pages) grow forward from the start of the
//! region, large blocks grow backward from the end. Inside a normal block,
//! chunks are managed first-fit over an address-ordered chunk map with a
//! 16-byte header in front of every payload. Free neighbours coalesce.
//!
//! The allocator only manages address space and metadata. Byte contents live
//! in [`AsmsStore`](crate::protection::AsmsStore); the monitor applies the
//! copy and zeroing implied by the reports returned here.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::label::{CategoryNames, ObjectLabel};

pub const ASMS_BASE: u32 = 0x8000_0000;
pub const ASMS_LIMIT: u32 = 0xA000_0000;
pub const PAGE_SIZE: u32 = 4096;
pub const BLOCK_PAGES: u32 = 16;
pub const BLOCK_SIZE: u32 = BLOCK_PAGES * PAGE_SIZE;
pub const CHUNK_HEADER: u32 = 16;
pub const CHUNK_ALIGN: u32 = 16;
/// Largest request served from a normal block.
pub const LARGE_THRESHOLD: u32 = BLOCK_SIZE - CHUNK_HEADER;

/// Smallest chunk worth splitting off: header plus one aligned unit.
const MIN_CHUNK: u32 = CHUNK_HEADER + CHUNK_ALIGN;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AllocError {
    #[error("zero-sized allocation")]
    ZeroSize,
    #[error("allocation size overflow")]
    Overflow,
    #[error("ASMS exhausted")]
    OutOfAsms,
    #[error("unknown address {0:#x}")]
    UnknownAddress(u32),
    #[error("no object at {0:#x}")]
    NotFound(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Normal,
    Large,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Normal => "normal",
            BlockKind::Large => "large",
        }
    }
}

/// A run of pages, identified by byte address and page count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PageRun {
    pub start: u32,
    pub pages: u32,
}

impl PageRun {
    pub fn end(&self) -> u32 {
        self.start + self.pages * PAGE_SIZE
    }

    pub fn len_bytes(&self) -> u32 {
        self.pages * PAGE_SIZE
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.start && addr < self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ChunkSlot {
    /// Total size including the header.
    span: u32,
    in_use: bool,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub start: u32,
    pub pages: u32,
    pub label: ObjectLabel,
    pub kind: BlockKind,
    /// Chunk map keyed by header offset within the block; covers the block.
    chunks: BTreeMap<u32, ChunkSlot>,
    pub live_chunks: u32,
}

impl Block {
    fn new(start: u32, pages: u32, label: ObjectLabel, kind: BlockKind) -> Self {
        let mut chunks = BTreeMap::new();
        chunks.insert(0, ChunkSlot { span: pages * PAGE_SIZE, in_use: false });
        Block { start, pages, label, kind, chunks, live_chunks: 0 }
    }

    pub fn run(&self) -> PageRun {
        PageRun { start: self.start, pages: self.pages }
    }

    /// Sum of payload capacity of free chunks.
    pub fn free_bytes(&self) -> u64 {
        self.chunks
            .values()
            .filter(|c| !c.in_use)
            .map(|c| (c.span - CHUNK_HEADER) as u64)
            .sum()
    }

    /// `(payload_addr, payload_capacity)` of live chunks, address ordered.
    pub fn live_chunk_spans(&self) -> Vec<(u32, u32)> {
        self.chunks
            .iter()
            .filter(|(_, c)| c.in_use)
            .map(|(off, c)| (self.start + off + CHUNK_HEADER, c.span - CHUNK_HEADER))
            .collect()
    }

    /// First-fit over the chunk map, splitting off the remainder when large
    /// enough to hold another chunk.
    fn take_first_fit(&mut self, need: u32) -> Option<u32> {
        let span_needed = need + CHUNK_HEADER;
        let (&off, &slot) = self
            .chunks
            .iter()
            .find(|(_, c)| !c.in_use && c.span >= span_needed)?;
        let mut used = slot.span;
        if slot.span - span_needed >= MIN_CHUNK {
            used = span_needed;
            self.chunks
                .insert(off + used, ChunkSlot { span: slot.span - used, in_use: false });
        }
        self.chunks.insert(off, ChunkSlot { span: used, in_use: true });
        self.live_chunks += 1;
        Some(self.start + off + CHUNK_HEADER)
    }

    fn release_chunk(&mut self, payload: u32) {
        let mut off = payload - self.start - CHUNK_HEADER;
        let mut span = self.chunks[&off].span;
        // merge with the following free chunk
        if let Some(next) = self.chunks.get(&(off + span)).copied() {
            if !next.in_use {
                self.chunks.remove(&(off + span));
                span += next.span;
            }
        }
        // merge with the preceding free chunk
        if let Some((&prev_off, &prev)) = self.chunks.range(..off).next_back() {
            if !prev.in_use && prev_off + prev.span == off {
                self.chunks.remove(&off);
                off = prev_off;
                span += prev.span;
            }
        }
        self.chunks.insert(off, ChunkSlot { span, in_use: false });
        self.live_chunks -= 1;
    }

    /// Shrinks a live chunk in place, returning the tail to the free map.
    fn shrink_chunk(&mut self, payload: u32, need: u32) {
        let off = payload - self.start - CHUNK_HEADER;
        let span = self.chunks[&off].span;
        let keep = need + CHUNK_HEADER;
        if span - keep < MIN_CHUNK {
            return;
        }
        self.chunks.insert(off, ChunkSlot { span: keep, in_use: true });
        // the tail is released like a chunk of its own so it coalesces
        self.chunks.insert(off + keep, ChunkSlot { span: span - keep, in_use: true });
        self.live_chunks += 1;
        self.release_chunk(self.start + off + keep + CHUNK_HEADER);
    }

    fn capacity_of(&self, payload: u32) -> u32 {
        self.chunks[&(payload - self.start - CHUNK_HEADER)].span - CHUNK_HEADER
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectEntry {
    pub addr: u32,
    pub block: u32,
    pub size: u32,
    pub label: ObjectLabel,
}

/// Block that became live and needs its permissions propagated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewBlock {
    pub run: PageRun,
    pub label: ObjectLabel,
    pub kind: BlockKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub addr: u32,
    pub new_block: Option<NewBlock>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreeReport {
    pub label: ObjectLabel,
    pub size: u32,
    /// Block recycled (normal) or unmapped (large) by this free.
    pub released: Option<PageRun>,
}

/// Outcome of a realloc. When `moved` is set the caller must copy
/// `copy_len` bytes from `from` to `addr` before acting on `released`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reallocation {
    pub addr: u32,
    pub moved: Option<Move>,
    pub new_block: Option<NewBlock>,
    pub released: Option<PageRun>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Move {
    pub from: u32,
    pub copy_len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AllocStats {
    pub live_blocks: usize,
    pub recycled_blocks: usize,
    pub live_objects: usize,
    pub free_chunk_bytes: u64,
    pub fwd_cursor: u32,
    pub bwd_cursor: u32,
}

#[derive(Debug, Clone)]
pub struct Allocator {
    base: u32,
    limit: u32,
    fwd: u32,
    bwd: u32,
    blocks: BTreeMap<u32, Block>,
    normal_by_label: HashMap<ObjectLabel, BTreeSet<u32>>,
    recycled: BTreeMap<ObjectLabel, BTreeSet<u32>>,
    /// Freed large extents above the backward cursor.
    large_free: BTreeMap<u32, u32>,
    objects: BTreeMap<u32, ObjectEntry>,
}

impl Default for Allocator {
    fn default() -> Self {
        Allocator::new()
    }
}

impl Allocator {
    pub fn new() -> Self {
        Allocator::with_range(ASMS_BASE, ASMS_LIMIT)
    }

    /// Both bounds must be page aligned.
    pub fn with_range(base: u32, limit: u32) -> Self {
        assert!(base.is_multiple_of(PAGE_SIZE) && limit.is_multiple_of(PAGE_SIZE) && base < limit);
        Allocator {
            base,
            limit,
            fwd: base,
            bwd: limit,
            blocks: BTreeMap::new(),
            normal_by_label: HashMap::new(),
            recycled: BTreeMap::new(),
            large_free: BTreeMap::new(),
            objects: BTreeMap::new(),
        }
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn limit(&self) -> u32 {
        self.limit
    }

    pub fn cursors(&self) -> (u32, u32) {
        (self.fwd, self.bwd)
    }

    pub fn malloc(&mut self, size: u32, label: &ObjectLabel) -> Result<Allocation, AllocError> {
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        if size > LARGE_THRESHOLD {
            return self.malloc_large(size, label);
        }
        let need = round_up(size);
        if let Some(starts) = self.normal_by_label.get(label) {
            for start in starts.iter() {
                let block = self.blocks.get_mut(start).expect("indexed block");
                if let Some(addr) = block.take_first_fit(need) {
                    self.record(addr, *start, size, label);
                    return Ok(Allocation { addr, new_block: None });
                }
            }
        }
        let start = self.fresh_normal_block(label)?;
        let block = Block::new(start, BLOCK_PAGES, label.clone(), BlockKind::Normal);
        self.blocks.insert(start, block);
        self.normal_by_label.entry(label.clone()).or_default().insert(start);
        let addr = self
            .blocks
            .get_mut(&start)
            .unwrap()
            .take_first_fit(need)
            .expect("fresh block fits any normal request");
        self.record(addr, start, size, label);
        Ok(Allocation {
            addr,
            new_block: Some(NewBlock {
                run: PageRun { start, pages: BLOCK_PAGES },
                label: label.clone(),
                kind: BlockKind::Normal,
            }),
        })
    }

    /// Same-label recycled block first, then the forward cursor, then any
    /// recycled block relabeled.
    fn fresh_normal_block(&mut self, label: &ObjectLabel) -> Result<u32, AllocError> {
        if let Some(set) = self.recycled.get_mut(label) {
            if let Some(&start) = set.iter().next() {
                set.remove(&start);
                if set.is_empty() {
                    self.recycled.remove(label);
                }
                return Ok(start);
            }
        }
        if self.bwd - self.fwd >= BLOCK_SIZE {
            let start = self.fwd;
            self.fwd += BLOCK_SIZE;
            return Ok(start);
        }
        let lowest = self
            .recycled
            .iter()
            .filter_map(|(l, set)| set.iter().next().map(|s| (*s, l.clone())))
            .min_by_key(|(s, _)| *s);
        match lowest {
            Some((start, old_label)) => {
                let set = self.recycled.get_mut(&old_label).unwrap();
                set.remove(&start);
                if set.is_empty() {
                    self.recycled.remove(&old_label);
                }
                Ok(start)
            }
            None => Err(AllocError::OutOfAsms),
        }
    }

    /// Places the object alone in its own large block, whatever its size.
    pub fn malloc_dedicated(&mut self, size: u32, label: &ObjectLabel) -> Result<Allocation, AllocError> {
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        self.malloc_large(size, label)
    }

    fn malloc_large(&mut self, size: u32, label: &ObjectLabel) -> Result<Allocation, AllocError> {
        let total = (size as u64) + CHUNK_HEADER as u64;
        let pages64 = total.div_ceil(PAGE_SIZE as u64);
        if pages64 * PAGE_SIZE as u64 > (self.limit - self.base) as u64 {
            return Err(AllocError::OutOfAsms);
        }
        let pages = pages64 as u32;
        let bytes = pages * PAGE_SIZE;
        let reuse = self
            .large_free
            .iter()
            .find(|(_, &p)| p >= pages)
            .map(|(&s, &p)| (s, p));
        let start = match reuse {
            Some((s, p)) => {
                self.large_free.remove(&s);
                if p > pages {
                    self.large_free.insert(s + bytes, p - pages);
                }
                s
            }
            None => {
                if self.bwd - self.fwd < bytes {
                    return Err(AllocError::OutOfAsms);
                }
                self.bwd -= bytes;
                self.bwd
            }
        };
        let mut block = Block::new(start, pages, label.clone(), BlockKind::Large);
        let addr = block
            .take_first_fit(bytes - CHUNK_HEADER)
            .expect("large block sized for request");
        self.blocks.insert(start, block);
        self.record(addr, start, size, label);
        Ok(Allocation {
            addr,
            new_block: Some(NewBlock {
                run: PageRun { start, pages },
                label: label.clone(),
                kind: BlockKind::Large,
            }),
        })
    }

    pub fn calloc(&mut self, count: u32, size: u32, label: &ObjectLabel) -> Result<Allocation, AllocError> {
        let total = count.checked_mul(size).ok_or(AllocError::Overflow)?;
        self.malloc(total, label)
    }

    fn record(&mut self, addr: u32, block: u32, size: u32, label: &ObjectLabel) {
        self.objects.insert(addr, ObjectEntry { addr, block, size, label: label.clone() });
    }

    pub fn free(&mut self, addr: u32) -> Result<FreeReport, AllocError> {
        let entry = self.objects.remove(&addr).ok_or(AllocError::UnknownAddress(addr))?;
        let block = self.blocks.get_mut(&entry.block).expect("object block");
        let released = match block.kind {
            BlockKind::Large => {
                let run = block.run();
                self.blocks.remove(&entry.block);
                self.release_large(run);
                Some(run)
            }
            BlockKind::Normal => {
                block.release_chunk(addr);
                if block.live_chunks == 0 {
                    let run = block.run();
                    let label = block.label.clone();
                    self.blocks.remove(&entry.block);
                    if let Some(set) = self.normal_by_label.get_mut(&label) {
                        set.remove(&run.start);
                        if set.is_empty() {
                            self.normal_by_label.remove(&label);
                        }
                    }
                    self.recycled.entry(label).or_default().insert(run.start);
                    Some(run)
                } else {
                    None
                }
            }
        };
        Ok(FreeReport { label: entry.label, size: entry.size, released })
    }

    fn release_large(&mut self, run: PageRun) {
        let mut start = run.start;
        let mut pages = run.pages;
        if let Some(next) = self.large_free.remove(&run.end()) {
            pages += next;
        }
        if let Some((&ps, &pp)) = self.large_free.range(..start).next_back() {
            if ps + pp * PAGE_SIZE == start {
                self.large_free.remove(&ps);
                start = ps;
                pages += pp;
            }
        }
        if start == self.bwd {
            self.bwd += pages * PAGE_SIZE;
        } else {
            self.large_free.insert(start, pages);
        }
    }

    pub fn realloc(&mut self, addr: u32, size: u32) -> Result<Reallocation, AllocError> {
        let entry = self.objects.get(&addr).cloned().ok_or(AllocError::UnknownAddress(addr))?;
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        let block = self.blocks.get_mut(&entry.block).expect("object block");
        let capacity = block.capacity_of(addr);
        let stays = match block.kind {
            BlockKind::Normal => size <= LARGE_THRESHOLD && size <= capacity,
            BlockKind::Large => size > LARGE_THRESHOLD && size <= capacity,
        };
        if stays {
            if block.kind == BlockKind::Normal {
                block.shrink_chunk(addr, round_up(size));
            }
            self.objects.get_mut(&addr).unwrap().size = size;
            return Ok(Reallocation { addr, moved: None, new_block: None, released: None });
        }
        let label = entry.label.clone();
        let alloc = self.malloc(size, &label)?;
        let report = self.free(addr).expect("live object");
        Ok(Reallocation {
            addr: alloc.addr,
            moved: Some(Move { from: addr, copy_len: entry.size.min(size) }),
            new_block: alloc.new_block,
            released: report.released,
        })
    }

    /// Object containing `addr`; interior addresses resolve too.
    pub fn lookup(&self, addr: u32) -> Result<&ObjectEntry, AllocError> {
        match self.objects.range(..=addr).next_back() {
            Some((_, e)) if addr < e.addr + e.size => Ok(e),
            _ => Err(AllocError::NotFound(addr)),
        }
    }

    pub fn lookup_object(&self, addr: u32) -> Result<(ObjectLabel, u32), AllocError> {
        self.lookup(addr).map(|e| (e.label.clone(), e.size))
    }

    pub fn objects(&self) -> impl Iterator<Item = &ObjectEntry> + '_ {
        self.objects.values()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block> + '_ {
        self.blocks.values()
    }

    pub fn block_at(&self, start: u32) -> Option<&Block> {
        self.blocks.get(&start)
    }

    pub fn live_block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn recycled_runs(&self) -> Vec<PageRun> {
        let mut v: Vec<PageRun> = self
            .recycled
            .values()
            .flat_map(|set| set.iter().map(|&start| PageRun { start, pages: BLOCK_PAGES }))
            .collect();
        v.sort();
        v
    }

    pub fn stats(&self) -> AllocStats {
        AllocStats {
            live_blocks: self.blocks.len(),
            recycled_blocks: self.recycled.values().map(|s| s.len()).sum(),
            live_objects: self.objects.len(),
            free_chunk_bytes: self
                .blocks
                .values()
                .filter(|b| b.kind == BlockKind::Normal)
                .map(|b| b.free_bytes())
                .sum(),
            fwd_cursor: self.fwd,
            bwd_cursor: self.bwd,
        }
    }

    /// One line per live block: `kind start pages label live_chunks`.
    pub fn dump_layout(&self, names: &CategoryNames) -> String {
        let mut out = String::new();
        for b in self.blocks.values() {
            let _ = writeln!(
                out,
                "{} {:#010x} {} {} {}",
                b.kind.as_str(),
                b.start,
                b.pages,
                names.format_object_label(&b.label),
                b.live_chunks
            );
        }
        out
    }
}

fn round_up(size: u32) -> u32 {
    size.div_ceil(CHUNK_ALIGN) * CHUNK_ALIGN
}
