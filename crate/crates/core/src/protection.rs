//! Simulated MMU: per-principal page permission tables over one shared
//! byte store.
//!
//! Every member access goes through [`Mmu::read_mem`] / [`Mmu::write_mem`].
//! The first legal touch of a page maps it (demand paging); an illegal
//! access produces a [`FaultEvent`] and leaves memory untouched. Only the
//! arbiter may change tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard};

use thiserror::Error;

use crate::allocator::{PageRun, ASMS_BASE, ASMS_LIMIT, PAGE_SIZE};
use crate::label::{AccessKind, Permission};
use crate::PrincipalId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PagePerm {
    pub read: bool,
    pub write: bool,
    /// Demand-paged in for this principal.
    pub mapped: bool,
}

impl PagePerm {
    pub fn permission(&self) -> Permission {
        Permission { read: self.read, write: self.write }
    }
}

/// Inclusive-exclusive range of page numbers (`addr / PAGE_SIZE`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PageRange {
    pub first: u32,
    pub count: u32,
}

impl PageRange {
    pub fn end(&self) -> u32 {
        self.first + self.count
    }

    pub fn pages(&self) -> std::ops::Range<u32> {
        self.first..self.end()
    }

    pub fn start_addr(&self) -> u32 {
        self.first * PAGE_SIZE
    }
}

impl From<PageRun> for PageRange {
    fn from(run: PageRun) -> Self {
        PageRange { first: run.start / PAGE_SIZE, count: run.pages }
    }
}

/// One principal's view: read/write bits per run of pages, plus the set
/// of pages it has touched.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PermissionTable {
    pub principal: PrincipalId,
    /// First page to `(count, perm)`; runs never overlap.
    runs: BTreeMap<u32, (u32, Permission)>,
    mapped: BTreeSet<u32>,
}

impl PermissionTable {
    fn new(principal: PrincipalId) -> Self {
        PermissionTable { principal, runs: BTreeMap::new(), mapped: BTreeSet::new() }
    }

    fn run_at(&self, page: u32) -> Option<(u32, u32, Permission)> {
        let (&first, &(count, perm)) = self.runs.range(..=page).next_back()?;
        (page < first + count).then_some((first, count, perm))
    }

    pub fn perm(&self, page: u32) -> Option<PagePerm> {
        let (_, _, p) = self.run_at(page)?;
        Some(PagePerm { read: p.read, write: p.write, mapped: self.mapped.contains(&page) })
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn runs(&self) -> impl Iterator<Item = (PageRange, Permission)> + '_ {
        self.runs.iter().map(|(&first, &(count, p))| (PageRange { first, count }, p))
    }

    pub fn mapped_pages(&self) -> usize {
        self.mapped.len()
    }

    /// Covered pages as maximal contiguous ranges.
    pub fn coverage(&self) -> Vec<PageRange> {
        let mut out: Vec<PageRange> = Vec::new();
        for (r, _) in self.runs() {
            match out.last_mut() {
                Some(last) if last.end() == r.first => last.count += r.count,
                _ => out.push(r),
            }
        }
        out
    }

    /// The permission of `range` if it is fully covered and uniform.
    pub fn uniform_perm(&self, range: PageRange) -> Option<Permission> {
        let mut page = range.first;
        let mut seen = None;
        while page < range.end() {
            let (first, count, p) = self.run_at(page)?;
            if seen.is_some_and(|s| s != p) {
                return None;
            }
            seen = Some(p);
            page = first + count;
        }
        seen
    }

    fn split_at(&mut self, page: u32) {
        if let Some((first, count, p)) = self.run_at(page) {
            if first < page {
                self.runs.insert(first, (page - first, p));
                self.runs.insert(page, (first + count - page, p));
            }
        }
    }

    fn insert(&mut self, range: PageRange) {
        self.runs.insert(range.first, (range.count, Permission::NONE));
    }

    fn remove(&mut self, range: PageRange) {
        self.split_at(range.first);
        self.split_at(range.end());
        let starts: Vec<u32> = self.runs.range(range.first..range.end()).map(|(&f, _)| f).collect();
        for f in starts {
            self.runs.remove(&f);
        }
        let pages: Vec<u32> = self.mapped.range(range.first..range.end()).copied().collect();
        for p in pages {
            self.mapped.remove(&p);
        }
    }

    fn set(&mut self, range: PageRange, perm: Permission) {
        self.split_at(range.first);
        self.split_at(range.end());
        for (_, v) in self.runs.range_mut(range.first..range.end()) {
            v.1 = perm;
        }
    }

    fn allows(&self, first: u32, last: u32, kind: AccessKind) -> bool {
        let mut page = first;
        while page <= last {
            match self.run_at(page) {
                Some((f, c, p)) if p.allows(kind) => page = f + c,
                _ => return false,
            }
        }
        true
    }

    /// Marks pages touched; true if any was new.
    fn touch(&mut self, first: u32, last: u32) -> bool {
        let mut paged = false;
        for page in first..=last {
            paged |= self.mapped.insert(page);
        }
        paged
    }

    /// Coalesced `(range, perm)` runs including mapped bits.
    fn snapshot(&self) -> Vec<(PageRange, PagePerm)> {
        let mut out: Vec<(PageRange, PagePerm)> = Vec::new();
        let mut push = |range: PageRange, pp: PagePerm| match out.last_mut() {
            Some((r, p)) if r.end() == range.first && *p == pp => r.count += range.count,
            _ => out.push((range, pp)),
        };
        for (r, p) in self.runs() {
            let mut page = r.first;
            for &m in self.mapped.range(r.first..r.end()) {
                if m > page {
                    push(PageRange { first: page, count: m - page }, PagePerm { read: p.read, write: p.write, mapped: false });
                }
                push(PageRange { first: m, count: 1 }, PagePerm { read: p.read, write: p.write, mapped: true });
                page = m + 1;
            }
            if page < r.end() {
                push(PageRange { first: page, count: r.end() - page }, PagePerm { read: p.read, write: p.write, mapped: false });
            }
        }
        out
    }
}

/// Shared physical backing of the ASMS, sparse by page and zero-filled.
#[derive(Debug, Clone, Default)]
pub struct AsmsStore {
    pages: HashMap<u32, Box<[u8]>>,
}

impl AsmsStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read(&self, addr: u32, len: usize) -> Vec<u8> {
        let mut out = vec![0u8; len];
        let mut done = 0usize;
        while done < len {
            let a = addr as u64 + done as u64;
            let page = (a / PAGE_SIZE as u64) as u32;
            let off = (a % PAGE_SIZE as u64) as usize;
            let n = (PAGE_SIZE as usize - off).min(len - done);
            if let Some(p) = self.pages.get(&page) {
                out[done..done + n].copy_from_slice(&p[off..off + n]);
            }
            done += n;
        }
        out
    }

    pub fn write(&mut self, addr: u32, data: &[u8]) {
        let mut done = 0usize;
        while done < data.len() {
            let a = addr as u64 + done as u64;
            let page = (a / PAGE_SIZE as u64) as u32;
            let off = (a % PAGE_SIZE as u64) as usize;
            let n = (PAGE_SIZE as usize - off).min(data.len() - done);
            let p = self
                .pages
                .entry(page)
                .or_insert_with(|| vec![0u8; PAGE_SIZE as usize].into_boxed_slice());
            p[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
    }

    pub fn fill_zero(&mut self, addr: u32, len: usize) {
        let mut done = 0usize;
        while done < len {
            let a = addr as u64 + done as u64;
            let page = (a / PAGE_SIZE as u64) as u32;
            let off = (a % PAGE_SIZE as u64) as usize;
            let n = (PAGE_SIZE as usize - off).min(len - done);
            if let Some(p) = self.pages.get_mut(&page) {
                p[off..off + n].fill(0);
            }
            done += n;
        }
    }

    pub fn copy_within(&mut self, from: u32, to: u32, len: usize) {
        let bytes = self.read(from, len);
        self.write(to, &bytes);
    }

    pub fn discard(&mut self, range: PageRange) {
        for page in range.pages() {
            self.pages.remove(&page);
        }
    }

    pub fn resident_pages(&self) -> usize {
        self.pages.len()
    }

    pub(crate) fn pages_sorted(&self) -> Vec<(&u32, &[u8])> {
        let mut v: Vec<_> = self.pages.iter().map(|(k, p)| (k, &p[..])).collect();
        v.sort_by_key(|(k, _)| **k);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Disposition {
    Terminated,
    Handled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FaultEvent {
    pub principal: PrincipalId,
    pub addr: u32,
    pub kind: AccessKind,
    pub disposition: Disposition,
}

impl fmt::Display for FaultEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "FAULT principal={} addr={:#x} kind={} disp={}",
            self.principal,
            self.addr,
            self.kind.as_char(),
            match self.disposition {
                Disposition::Terminated => "term",
                Disposition::Handled => "handled",
            }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FaultPolicy {
    /// Default: the faulting principal is terminated.
    #[default]
    Terminate,
    /// A handler is installed; the fault is recorded and execution continues.
    Handle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessOutcome {
    OkMapped,
    OkDemandPaged,
    Fault,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtectionError {
    #[error("only the arbiter may modify ASMS protection")]
    NotMonitor,
    #[error("page range {0:?} is not allocated")]
    RangeUnallocated(PageRange),
    #[error("page range {0:?} overlaps an allocated range")]
    RangeOverlap(PageRange),
    #[error("unknown principal {0}")]
    UnknownPrincipal(PrincipalId),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum AccessError {
    #[error("{0}")]
    Fault(FaultEvent),
    #[error("principal {0} was terminated")]
    Terminated(PrincipalId),
}

#[derive(Debug, Default)]
struct MmuState {
    store: AsmsStore,
    /// Allocated page ranges keyed by first page.
    allocated: BTreeMap<u32, u32>,
    tables: BTreeMap<PrincipalId, PermissionTable>,
    policies: HashMap<PrincipalId, FaultPolicy>,
    terminated: HashMap<PrincipalId, FaultEvent>,
    faults: Vec<FaultEvent>,
}

impl MmuState {
    fn range_allocated(&self, range: PageRange) -> bool {
        if range.count == 0 {
            return false;
        }
        let mut page = range.first;
        while page < range.end() {
            match self.allocated.range(..=page).next_back() {
                Some((&first, &count)) if page < first + count => page = first + count,
                _ => return false,
            }
        }
        true
    }
}

/// The simulated MMU of one group.
#[derive(Debug)]
pub struct Mmu {
    arbiter: PrincipalId,
    state: Mutex<MmuState>,
    perm_updates: AtomicU64,
}

impl Mmu {
    pub fn new(arbiter: PrincipalId) -> Self {
        Mmu { arbiter, state: Mutex::new(MmuState::default()), perm_updates: AtomicU64::new(0) }
    }

    fn lock(&self) -> MutexGuard<'_, MmuState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn require_arbiter(&self, caller: PrincipalId) -> Result<(), ProtectionError> {
        if caller == self.arbiter {
            Ok(())
        } else {
            Err(ProtectionError::NotMonitor)
        }
    }

    /// Number of `set_page_perms` calls applied so far.
    pub fn perm_updates(&self) -> u64 {
        self.perm_updates.load(Ordering::Relaxed)
    }

    /// Creates a table covering every allocated page with no access.
    pub fn add_principal(&self, caller: PrincipalId, principal: PrincipalId) -> Result<(), ProtectionError> {
        self.require_arbiter(caller)?;
        let mut st = self.lock();
        let mut table = PermissionTable::new(principal);
        for (&first, &count) in st.allocated.iter() {
            table.insert(PageRange { first, count });
        }
        st.tables.insert(principal, table);
        Ok(())
    }

    /// Drops a principal's address space view.
    pub fn remove_principal(&self, caller: PrincipalId, principal: PrincipalId) -> Result<(), ProtectionError> {
        self.require_arbiter(caller)?;
        let mut st = self.lock();
        st.tables.remove(&principal).ok_or(ProtectionError::UnknownPrincipal(principal))?;
        st.policies.remove(&principal);
        Ok(())
    }

    /// Creates a region with the same range in every table, initially `--`.
    pub fn map_range(&self, caller: PrincipalId, range: PageRange) -> Result<(), ProtectionError> {
        self.require_arbiter(caller)?;
        let mut st = self.lock();
        let lo = ASMS_BASE / PAGE_SIZE;
        let hi = ASMS_LIMIT / PAGE_SIZE;
        if range.count == 0 || range.first < lo || range.end() > hi {
            return Err(ProtectionError::RangeUnallocated(range));
        }
        let overlaps = st
            .allocated
            .range(..range.end())
            .next_back()
            .is_some_and(|(&f, &c)| f + c > range.first);
        if overlaps {
            return Err(ProtectionError::RangeOverlap(range));
        }
        st.allocated.insert(range.first, range.count);
        for table in st.tables.values_mut() {
            table.insert(range);
        }
        Ok(())
    }

    /// Destroys a region in every table and discards its backing bytes.
    pub fn unmap_range(&self, caller: PrincipalId, range: PageRange) -> Result<(), ProtectionError> {
        self.require_arbiter(caller)?;
        let mut st = self.lock();
        if st.allocated.get(&range.first) != Some(&range.count) {
            return Err(ProtectionError::RangeUnallocated(range));
        }
        st.allocated.remove(&range.first);
        for table in st.tables.values_mut() {
            table.remove(range);
        }
        st.store.discard(range);
        Ok(())
    }

    /// Replaces read/write bits on a range; mapped bits are preserved.
    pub fn set_page_perms(
        &self,
        caller: PrincipalId,
        principal: PrincipalId,
        range: PageRange,
        perm: Permission,
    ) -> Result<(), ProtectionError> {
        self.require_arbiter(caller)?;
        let mut st = self.lock();
        if !st.range_allocated(range) {
            return Err(ProtectionError::RangeUnallocated(range));
        }
        let table = st
            .tables
            .get_mut(&principal)
            .ok_or(ProtectionError::UnknownPrincipal(principal))?;
        table.set(range, perm);
        self.perm_updates.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Checks and, on success, demand-maps every touched page. All or
    /// nothing: a fault leaves mapped bits untouched.
    pub fn check_access(&self, principal: PrincipalId, addr: u32, len: u32, kind: AccessKind) -> AccessOutcome {
        let mut st = self.lock();
        Self::check_locked(&mut st, principal, addr, len, kind)
    }

    fn check_locked(st: &mut MmuState, principal: PrincipalId, addr: u32, len: u32, kind: AccessKind) -> AccessOutcome {
        let end = addr as u64 + len as u64;
        if addr < ASMS_BASE || end > ASMS_LIMIT as u64 {
            return AccessOutcome::Fault;
        }
        if len == 0 {
            return AccessOutcome::OkMapped;
        }
        let Some(table) = st.tables.get_mut(&principal) else {
            return AccessOutcome::Fault;
        };
        let first = addr / PAGE_SIZE;
        let last = ((end - 1) / PAGE_SIZE as u64) as u32;
        if !table.allows(first, last, kind) {
            return AccessOutcome::Fault;
        }
        if table.touch(first, last) {
            AccessOutcome::OkDemandPaged
        } else {
            AccessOutcome::OkMapped
        }
    }

    fn fault(&self, st: &mut MmuState, principal: PrincipalId, addr: u32, kind: AccessKind) -> AccessError {
        let policy = st.policies.get(&principal).copied().unwrap_or_default();
        let disposition = match policy {
            FaultPolicy::Terminate => Disposition::Terminated,
            FaultPolicy::Handle => Disposition::Handled,
        };
        let event = FaultEvent { principal, addr, kind, disposition };
        st.faults.push(event);
        if disposition == Disposition::Terminated {
            st.terminated.insert(principal, event);
        }
        AccessError::Fault(event)
    }

    pub fn read_mem(&self, principal: PrincipalId, addr: u32, len: u32) -> Result<Vec<u8>, AccessError> {
        let mut st = self.lock();
        if st.terminated.contains_key(&principal) {
            return Err(AccessError::Terminated(principal));
        }
        match Self::check_locked(&mut st, principal, addr, len, AccessKind::Read) {
            AccessOutcome::Fault => Err(self.fault(&mut st, principal, addr, AccessKind::Read)),
            _ => Ok(st.store.read(addr, len as usize)),
        }
    }

    pub fn write_mem(&self, principal: PrincipalId, addr: u32, data: &[u8]) -> Result<(), AccessError> {
        let mut st = self.lock();
        if st.terminated.contains_key(&principal) {
            return Err(AccessError::Terminated(principal));
        }
        let Ok(len) = u32::try_from(data.len()) else {
            return Err(self.fault(&mut st, principal, addr, AccessKind::Write));
        };
        match Self::check_locked(&mut st, principal, addr, len, AccessKind::Write) {
            AccessOutcome::Fault => Err(self.fault(&mut st, principal, addr, AccessKind::Write)),
            _ => {
                st.store.write(addr, data);
                Ok(())
            }
        }
    }

    /// A member installs or removes its own fault handler.
    pub fn set_fault_policy(&self, principal: PrincipalId, policy: FaultPolicy) {
        self.lock().policies.insert(principal, policy);
    }

    pub fn termination(&self, principal: PrincipalId) -> Option<FaultEvent> {
        self.lock().terminated.get(&principal).copied()
    }

    pub fn fault_log(&self) -> Vec<FaultEvent> {
        self.lock().faults.clone()
    }

    /// Event log in its line-oriented export form.
    pub fn export_fault_log(&self) -> String {
        self.lock().faults.iter().map(|e| format!("{e}\n")).collect()
    }

    /// Coalesced `(range, perm)` runs of a principal's table.
    pub fn snapshot(&self, principal: PrincipalId) -> Result<Vec<(PageRange, PagePerm)>, ProtectionError> {
        let st = self.lock();
        let table = st.tables.get(&principal).ok_or(ProtectionError::UnknownPrincipal(principal))?;
        Ok(table.snapshot())
    }

    pub fn table(&self, principal: PrincipalId) -> Option<PermissionTable> {
        self.lock().tables.get(&principal).cloned()
    }

    pub fn principals(&self) -> Vec<PrincipalId> {
        self.lock().tables.keys().copied().collect()
    }

    pub fn allocated_ranges(&self) -> Vec<PageRange> {
        self.lock()
            .allocated
            .iter()
            .map(|(&first, &count)| PageRange { first, count })
            .collect()
    }

    // Privileged byte access for the arbiter (copy on realloc, zero fill,
    // file-backed mapping). Not mediated by the tables.

    pub fn raw_write(&self, caller: PrincipalId, addr: u32, data: &[u8]) -> Result<(), ProtectionError> {
        self.require_arbiter(caller)?;
        self.lock().store.write(addr, data);
        Ok(())
    }

    pub fn raw_read(&self, caller: PrincipalId, addr: u32, len: u32) -> Result<Vec<u8>, ProtectionError> {
        self.require_arbiter(caller)?;
        Ok(self.lock().store.read(addr, len as usize))
    }

    pub fn raw_copy(&self, caller: PrincipalId, from: u32, to: u32, len: u32) -> Result<(), ProtectionError> {
        self.require_arbiter(caller)?;
        self.lock().store.copy_within(from, to, len as usize);
        Ok(())
    }

    pub fn raw_zero(&self, caller: PrincipalId, addr: u32, len: u32) -> Result<(), ProtectionError> {
        self.require_arbiter(caller)?;
        self.lock().store.fill_zero(addr, len as usize);
        Ok(())
    }

    /// Feeds the full table and store state into `sink`.
    pub(crate) fn digest_into(&self, sink: &mut impl FnMut(&[u8])) {
        let st = self.lock();
        for (&first, &count) in st.allocated.iter() {
            sink(&first.to_le_bytes());
            sink(&count.to_le_bytes());
        }
        for (id, table) in st.tables.iter() {
            sink(&id.0.to_le_bytes());
            for (r, p) in table.runs() {
                sink(&r.first.to_le_bytes());
                sink(&r.count.to_le_bytes());
                sink(&[p.bits()]);
            }
            for page in table.mapped.iter() {
                sink(&page.to_le_bytes());
            }
        }
        for (page, bytes) in st.store.pages_sorted() {
            sink(&page.to_le_bytes());
            sink(bytes);
        }
        sink(&(st.faults.len() as u64).to_le_bytes());
    }
}
