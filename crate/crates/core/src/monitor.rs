//! The arbiter: registry of principals, authentication and authorization of
//! every request, thread lifecycle and group-wide permission propagation.
//!
//! [`Monitor`] is a synchronous state machine. Frames are handled strictly
//! one at a time in arrival order; [`crate::runtime`] drives it from a
//! dedicated thread. Driving it directly is how request logs are replayed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::allocator::{AllocError, Allocator, NewBlock, PageRun};
use crate::label::{
    check_alloc, check_create, perms_for, Category, CategoryCounter, CategoryKind, CategoryNames, Label,
    ObjectLabel, Ownership,
};
use crate::protection::{FaultEvent, Mmu, PageRange};
use crate::rpc::{
    decode_request, encode_response, Credential, OkBody, Opcode, Reply, Request, RequestFrame, ResponseFrame,
    Status,
};
use crate::PrincipalId;

static NEXT_GROUP_ID: AtomicU32 = AtomicU32::new(1);

const GROUP_ID_MAX: u32 = (1 << 31) - 1;

/// `ab_identity` word: upper 31 bits group id, low bit role (1 = arbiter).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AbIdentity(pub u32);

impl AbIdentity {
    pub fn member(group: u32) -> Self {
        AbIdentity(group << 1)
    }

    pub fn arbiter(group: u32) -> Self {
        AbIdentity((group << 1) | 1)
    }

    pub fn group_id(self) -> u32 {
        self.0 >> 1
    }

    pub fn is_arbiter(self) -> bool {
        self.0 & 1 == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExitStatus {
    Exited(i32),
    Terminated(FaultEvent),
}

impl fmt::Display for ExitStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitStatus::Exited(code) => write!(f, "exited({code})"),
            ExitStatus::Terminated(ev) => write!(f, "terminated({ev})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrincipalStatus {
    Running,
    Done(ExitStatus),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    pub id: PrincipalId,
    pub identity: AbIdentity,
    pub label: Label,
    /// Grows only when the principal mints a category.
    pub ownership: Ownership,
    pub parent: Option<PrincipalId>,
    pub status: PrincipalStatus,
    pub credential: Credential,
    joined: bool,
}

impl Principal {
    pub fn is_running(&self) -> bool {
        self.status == PrincipalStatus::Running
    }
}

/// Thread table plus the ordered list of live members.
#[derive(Debug, Clone, Default)]
pub struct GroupRegistry {
    threads: BTreeMap<PrincipalId, Principal>,
    members: Vec<PrincipalId>,
}

impl GroupRegistry {
    pub fn get(&self, id: PrincipalId) -> Option<&Principal> {
        self.threads.get(&id)
    }

    pub fn members(&self) -> &[PrincipalId] {
        &self.members
    }

    pub fn principals(&self) -> impl Iterator<Item = &Principal> + '_ {
        self.threads.values()
    }
}

/// Shared source of connection credentials for one group.
#[derive(Debug, Clone, Default)]
pub struct CredentialSource(Arc<AtomicU64>);

impl CredentialSource {
    pub fn mint(&self) -> Credential {
        Credential(self.0.fetch_add(1, Ordering::Relaxed) + 1)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MonitorError {
    #[error("credential {0} is already registered")]
    DuplicateRegistration(Credential),
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("unknown principal {0}")]
    UnknownPrincipal(PrincipalId),
    #[error("{0} is not a child of the caller")]
    UnknownChild(PrincipalId),
    #[error("{0} was already joined")]
    AlreadyJoined(PrincipalId),
    #[error("no object at {0:#x}")]
    NotFound(u32),
}

/// Resource-limit hook consulted before any authenticated request runs.
pub trait QuotaPolicy: Send + Sync {
    fn admit(&self, principal: PrincipalId, op: Opcode) -> bool;
}

#[derive(Clone, Default)]
pub struct MonitorConfig {
    pub quota: Option<Arc<dyn QuotaPolicy>>,
}

impl fmt::Debug for MonitorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MonitorConfig").field("quota", &self.quota.is_some()).finish()
    }
}

/// A newly created member whose entry point should now be scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpawnOrder {
    pub principal: PrincipalId,
    pub credential: Credential,
    pub entry: u32,
}

/// Result of handling one frame. `reply` is `None` while a join is parked.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dispatch {
    pub reply: Option<Vec<u8>>,
    pub spawn: Option<SpawnOrder>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub requests: u64,
    pub ok: u64,
    pub denied: u64,
    pub malformed: u64,
    pub errors: u64,
    pub by_op: BTreeMap<&'static str, u64>,
    pub new_blocks: u64,
    pub released_blocks: u64,
}

struct Refusal {
    status: Status,
    msg: String,
}

fn denied(msg: impl Into<String>) -> Refusal {
    Refusal { status: Status::Denied, msg: msg.into() }
}

fn error(msg: impl Into<String>) -> Refusal {
    Refusal { status: Status::Error, msg: msg.into() }
}

enum Handled {
    Done(OkBody, String),
    Parked(String),
}

pub struct Monitor {
    group_id: u32,
    registry: GroupRegistry,
    bindings: HashMap<Credential, PrincipalId>,
    allocator: Allocator,
    mmu: Arc<Mmu>,
    counter: CategoryCounter,
    known: BTreeSet<Category>,
    names: CategoryNames,
    creds: CredentialSource,
    next_principal: u64,
    pending_joins: HashMap<PrincipalId, (Credential, u32)>,
    audit: Vec<String>,
    request_seq: u64,
    counters: OpCounters,
    config: MonitorConfig,
}

impl fmt::Debug for Monitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Monitor")
            .field("group_id", &self.group_id)
            .field("members", &self.registry.members)
            .finish()
    }
}

impl Default for Monitor {
    fn default() -> Self {
        Monitor::new(MonitorConfig::default())
    }
}

impl Monitor {
    pub fn new(config: MonitorConfig) -> Self {
        Self::with_credentials(config, CredentialSource::default())
    }

    pub fn with_credentials(config: MonitorConfig, creds: CredentialSource) -> Self {
        let group_id = NEXT_GROUP_ID.fetch_add(1, Ordering::Relaxed);
        assert!(group_id <= GROUP_ID_MAX, "group ids exhausted");
        Monitor {
            group_id,
            registry: GroupRegistry::default(),
            bindings: HashMap::new(),
            allocator: Allocator::new(),
            mmu: Arc::new(Mmu::new(PrincipalId::ARBITER)),
            counter: CategoryCounter::default(),
            known: BTreeSet::new(),
            names: CategoryNames::new(),
            creds,
            next_principal: 1,
            pending_joins: HashMap::new(),
            audit: Vec::new(),
            request_seq: 0,
            counters: OpCounters::default(),
            config,
        }
    }

    pub fn group_id(&self) -> u32 {
        self.group_id
    }

    pub fn arbiter_identity(&self) -> AbIdentity {
        AbIdentity::arbiter(self.group_id)
    }

    pub fn mmu(&self) -> &Arc<Mmu> {
        &self.mmu
    }

    pub fn allocator(&self) -> &Allocator {
        &self.allocator
    }

    pub fn registry(&self) -> &GroupRegistry {
        &self.registry
    }

    pub fn names(&self) -> &CategoryNames {
        &self.names
    }

    pub fn credentials(&self) -> &CredentialSource {
        &self.creds
    }

    pub fn principal(&self, id: PrincipalId) -> Option<&Principal> {
        self.registry.get(id)
    }

    pub fn principal_by_credential(&self, cred: Credential) -> Option<PrincipalId> {
        self.bindings.get(&cred).copied()
    }

    pub fn counters(&self) -> OpCounters {
        self.counters.clone()
    }

    pub fn perm_updates(&self) -> u64 {
        self.mmu.perm_updates()
    }

    pub fn audit_lines(&self) -> &[String] {
        &self.audit
    }

    pub fn audit_digest(&self) -> String {
        let mut h = Sha256::new();
        for line in &self.audit {
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        hex(&h.finalize())
    }

    pub fn dump_layout(&self) -> String {
        self.allocator.dump_layout(&self.names)
    }

    /// Records a principal bound to `cred`. Omitted label and ownership
    /// default to the parent's, or to empty sets for a parentless member.
    pub fn register_member(
        &mut self,
        cred: Credential,
        label: Option<Label>,
        ownership: Option<Ownership>,
        parent: Option<PrincipalId>,
    ) -> Result<PrincipalId, MonitorError> {
        if self.bindings.contains_key(&cred) {
            return Err(MonitorError::DuplicateRegistration(cred));
        }
        let parent_rec = match parent {
            Some(p) => Some(self.registry.get(p).ok_or(MonitorError::UnknownPrincipal(p))?.clone()),
            None => None,
        };
        let label = label.or_else(|| parent_rec.as_ref().map(|p| p.label.clone())).unwrap_or_default();
        let ownership = ownership
            .or_else(|| parent_rec.as_ref().map(|p| p.ownership.clone()))
            .unwrap_or_default();
        let id = PrincipalId(self.next_principal);
        self.next_principal += 1;
        self.mmu.add_principal(PrincipalId::ARBITER, id).expect("arbiter call");
        // fresh view: one range update per live block
        let blocks: Vec<(PageRun, ObjectLabel)> =
            self.allocator.blocks().map(|b| (b.run(), b.label.clone())).collect();
        for (run, block_label) in blocks {
            let perm = perms_for(&label, &ownership, &block_label);
            self.mmu
                .set_page_perms(PrincipalId::ARBITER, id, run.into(), perm)
                .expect("live block is mapped");
        }
        self.registry.threads.insert(
            id,
            Principal {
                id,
                identity: AbIdentity::member(self.group_id),
                label,
                ownership,
                parent,
                status: PrincipalStatus::Running,
                credential: cred,
                joined: false,
            },
        );
        self.registry.members.push(id);
        self.bindings.insert(cred, id);
        Ok(id)
    }

    /// Resolves the principal behind a connection. A principal id claimed
    /// inside the frame must match the bound one.
    pub fn authenticate(&self, cred: Credential, claim: Option<PrincipalId>) -> Result<PrincipalId, MonitorError> {
        let id = *self
            .bindings
            .get(&cred)
            .ok_or_else(|| MonitorError::AuthFailure(format!("{cred} is not registered")))?;
        let p = &self.registry.threads[&id];
        if !p.is_running() {
            return Err(MonitorError::AuthFailure(format!("principal {id} is no longer running")));
        }
        if let Some(c) = claim {
            if c != id {
                return Err(MonitorError::AuthFailure(format!("{cred} claims principal {c}, bound to {id}")));
            }
        }
        Ok(id)
    }

    /// What `target` may do with the object containing `addr`.
    pub fn get_privilege(&self, target: PrincipalId, addr: u32) -> Result<crate::Permission, MonitorError> {
        let p = self.registry.get(target).ok_or(MonitorError::UnknownPrincipal(target))?;
        let entry = self.allocator.lookup(addr).map_err(|_| MonitorError::NotFound(addr))?;
        Ok(perms_for(&p.label, &p.ownership, &entry.label))
    }

    pub fn handle_frame(&mut self, cred: Credential, bytes: &[u8]) -> Dispatch {
        self.request_seq += 1;
        self.counters.requests += 1;
        let from = self
            .bindings
            .get(&cred)
            .map(|p| p.to_string())
            .unwrap_or_else(|| "-".to_string());
        let frame = match decode_request(bytes) {
            Ok(f) => f,
            Err(m) => {
                self.counters.malformed += 1;
                let op = m
                    .opcode
                    .map(|b| Opcode::from_byte(b).map(|o| o.api_name().to_string()).unwrap_or(format!("{b:#04x}")))
                    .unwrap_or_else(|| "?".to_string());
                self.log(&from, &op, Status::Malformed, &m.reason);
                let reply = encode_response(&ResponseFrame {
                    opcode: m.opcode.unwrap_or(0),
                    seq: m.seq.unwrap_or(0),
                    reply: Reply::Malformed(m.reason),
                });
                return Dispatch { reply: Some(reply), spawn: None };
            }
        };
        let opcode = frame.request.opcode();
        *self.counters.by_op.entry(opcode.api_name()).or_default() += 1;
        let mut spawn = None;
        let result = self.authorize_and_dispatch(cred, &frame, &mut spawn);
        let (reply, status, detail) = match result {
            Ok(Handled::Done(body, detail)) => (Some(Reply::Ok(body)), Status::Ok, detail),
            Ok(Handled::Parked(detail)) => (None, Status::Ok, detail),
            Err(r) => {
                let reply = match r.status {
                    Status::Denied => Reply::Denied(r.msg.clone()),
                    Status::Malformed => Reply::Malformed(r.msg.clone()),
                    _ => Reply::Error(r.msg.clone()),
                };
                (Some(reply), r.status, r.msg)
            }
        };
        match status {
            Status::Ok => self.counters.ok += 1,
            Status::Denied => self.counters.denied += 1,
            Status::Malformed => self.counters.malformed += 1,
            Status::Error => self.counters.errors += 1,
        }
        self.log(&from, opcode.api_name(), status, &detail);
        Dispatch {
            reply: reply.map(|reply| encode_response(&ResponseFrame { opcode: opcode as u8, seq: frame.seq, reply })),
            spawn,
        }
    }

    fn log(&mut self, from: &str, op: &str, status: Status, detail: &str) {
        self.audit.push(format!(
            "REQ seq={} from={} op={} decision={} detail={}",
            self.request_seq,
            from,
            op,
            status.as_str(),
            detail
        ));
    }

    fn authorize_and_dispatch(
        &mut self,
        cred: Credential,
        frame: &RequestFrame,
        spawn: &mut Option<SpawnOrder>,
    ) -> Result<Handled, Refusal> {
        if let Request::Register { label, ownership } = &frame.request {
            return self.handle_register(cred, frame.claim, label, ownership);
        }
        let caller = self.authenticate(cred, frame.claim).map_err(|e| denied(e.to_string()))?;
        let op = frame.request.opcode();
        if let Some(q) = &self.config.quota {
            if !q.admit(caller, op) {
                return Err(denied("resource limit"));
            }
        }
        let me = self.registry.threads[&caller].clone();
        match &frame.request {
            Request::Register { .. } => unreachable!(),
            Request::Null => Ok(Handled::Done(OkBody::Empty, String::new())),
            Request::Malloc { size, label } => self.do_malloc(&me, *size, 1, label, false),
            Request::Calloc { count, size, label } => self.do_malloc(&me, *size, *count, label, true),
            Request::Free { addr } => self.do_free(&me, *addr),
            Request::Realloc { addr, size } => self.do_realloc(&me, *addr, *size),
            Request::Mmap { length, offset, label, path } => self.do_mmap(&me, *length, *offset, label, path),
            Request::CreateCategory { kind, name } => self.do_create_category(caller, *kind, name),
            Request::GetLabel => {
                let detail = self.names.format_label(&me.label);
                Ok(Handled::Done(OkBody::Label(me.label), detail))
            }
            Request::GetOwnership => {
                let detail = self.names.format_ownership(&me.ownership);
                Ok(Handled::Done(OkBody::Ownership(me.ownership), detail))
            }
            Request::GetMemLabel { addr } => {
                let (label, _) = self
                    .allocator
                    .lookup_object(*addr)
                    .map_err(|_| error(MonitorError::NotFound(*addr).to_string()))?;
                let detail = format!("addr={addr:#x} label={}", self.names.format_object_label(&label));
                Ok(Handled::Done(OkBody::ObjectLabel(label), detail))
            }
            Request::GetPrivilege { target, addr } => {
                let perm = self.get_privilege(*target, *addr).map_err(|e| error(e.to_string()))?;
                Ok(Handled::Done(OkBody::Permission(perm), format!("target={target} addr={addr:#x} perm={perm}")))
            }
            Request::ThreadCreate { entry, label, ownership } => {
                self.do_thread_create(&me, *entry, label.clone(), ownership.clone(), spawn)
            }
            Request::ThreadJoin { child } => self.do_join(&me, *child, cred, frame.seq),
        }
    }

    fn handle_register(
        &mut self,
        cred: Credential,
        claim: Option<PrincipalId>,
        label: &Option<Label>,
        ownership: &Option<Ownership>,
    ) -> Result<Handled, Refusal> {
        if self.bindings.contains_key(&cred) {
            return Err(denied(MonitorError::DuplicateRegistration(cred).to_string()));
        }
        if !self.registry.threads.is_empty() {
            return Err(denied("group already bootstrapped; members join through thread creation"));
        }
        if claim.is_some() {
            return Err(denied("identity claim on unregistered connection"));
        }
        for set in [label.as_ref().map(|l| l.categories()), ownership.as_ref().map(|o| o.categories())]
            .into_iter()
            .flatten()
        {
            self.require_known(set.iter())?;
        }
        let id = self
            .register_member(cred, label.clone(), ownership.clone(), None)
            .map_err(|e| denied(e.to_string()))?;
        Ok(Handled::Done(OkBody::Principal(id), format!("principal={id}")))
    }

    fn require_known<'a>(&self, cats: impl Iterator<Item = &'a Category>) -> Result<(), Refusal> {
        for c in cats {
            if !self.known.contains(c) {
                return Err(error(format!("unknown category {}:{:?}", c.id, c.kind)));
            }
        }
        Ok(())
    }

    fn install_block(&mut self, nb: &NewBlock) {
        self.mmu
            .map_range(PrincipalId::ARBITER, nb.run.into())
            .expect("allocator hands out disjoint ranges");
        self.counters.new_blocks += 1;
        self.propagate_block(nb.run.into(), &nb.label);
    }

    /// One `set_page_perms` per live member.
    pub fn propagate_block(&mut self, range: PageRange, label: &ObjectLabel) {
        for id in self.registry.members.clone() {
            let p = &self.registry.threads[&id];
            let perm = perms_for(&p.label, &p.ownership, label);
            self.mmu
                .set_page_perms(PrincipalId::ARBITER, id, range, perm)
                .expect("range mapped for every member");
        }
    }

    fn release_block(&mut self, run: PageRun) {
        self.mmu
            .unmap_range(PrincipalId::ARBITER, run.into())
            .expect("released block was mapped");
        self.counters.released_blocks += 1;
    }

    fn do_malloc(
        &mut self,
        me: &Principal,
        size: u32,
        count: u32,
        label: &ObjectLabel,
        zero: bool,
    ) -> Result<Handled, Refusal> {
        self.require_known(label.categories())?;
        let text = self.names.format_object_label(label);
        if !check_alloc(&me.label, &me.ownership, label) {
            return Err(denied(format!("allocation rule violated label={text}")));
        }
        let alloc = if zero {
            self.allocator.calloc(count, size, label)
        } else {
            self.allocator.malloc(size, label)
        }
        .map_err(|e| error(e.to_string()))?;
        if let Some(nb) = &alloc.new_block {
            self.install_block(nb);
        }
        if zero {
            let total = count * size;
            self.mmu.raw_zero(PrincipalId::ARBITER, alloc.addr, total).expect("arbiter call");
        }
        let detail = match &alloc.new_block {
            Some(nb) => format!(
                "size={} label={text} addr={:#x} block={:#x}+{}",
                count as u64 * size as u64,
                alloc.addr,
                nb.run.start,
                nb.run.pages
            ),
            None => format!("size={} label={text} addr={:#x}", count as u64 * size as u64, alloc.addr),
        };
        Ok(Handled::Done(OkBody::Addr(alloc.addr), detail))
    }

    /// Frees and reallocs need write access to the object.
    fn writable_object(&self, me: &Principal, addr: u32) -> Result<ObjectLabel, Refusal> {
        let entry = match self.allocator.lookup(addr) {
            Ok(e) if e.addr == addr => e,
            _ => return Err(denied(AllocError::UnknownAddress(addr).to_string())),
        };
        if !perms_for(&me.label, &me.ownership, &entry.label).write {
            return Err(denied(format!(
                "caller cannot write object {addr:#x} label={}",
                self.names.format_object_label(&entry.label)
            )));
        }
        Ok(entry.label.clone())
    }

    fn do_free(&mut self, me: &Principal, addr: u32) -> Result<Handled, Refusal> {
        self.writable_object(me, addr)?;
        let report = self.allocator.free(addr).map_err(|e| denied(e.to_string()))?;
        let mut detail = format!("addr={addr:#x}");
        if let Some(run) = report.released {
            self.release_block(run);
            detail.push_str(&format!(" released={:#x}+{}", run.start, run.pages));
        }
        Ok(Handled::Done(OkBody::Empty, detail))
    }

    fn do_realloc(&mut self, me: &Principal, addr: u32, size: u32) -> Result<Handled, Refusal> {
        self.writable_object(me, addr)?;
        let r = self.allocator.realloc(addr, size).map_err(|e| error(e.to_string()))?;
        if let Some(nb) = &r.new_block {
            self.install_block(nb);
        }
        if let Some(mv) = r.moved {
            self.mmu
                .raw_copy(PrincipalId::ARBITER, mv.from, r.addr, mv.copy_len)
                .expect("arbiter call");
        }
        if let Some(run) = r.released {
            self.release_block(run);
        }
        Ok(Handled::Done(OkBody::Addr(r.addr), format!("addr={addr:#x} size={size} new={:#x}", r.addr)))
    }

    fn do_mmap(
        &mut self,
        me: &Principal,
        length: u32,
        offset: u32,
        label: &ObjectLabel,
        path: &str,
    ) -> Result<Handled, Refusal> {
        self.require_known(label.categories())?;
        let text = self.names.format_object_label(label);
        if !check_alloc(&me.label, &me.ownership, label) {
            return Err(denied(format!("allocation rule violated label={text}")));
        }
        if length == 0 {
            return Err(error(AllocError::ZeroSize.to_string()));
        }
        let contents = if path.is_empty() {
            Vec::new()
        } else {
            read_file_range(path, offset, length).map_err(|e| error(format!("{path}: {e}")))?
        };
        let alloc = self.allocator.malloc_dedicated(length, label).map_err(|e| error(e.to_string()))?;
        if let Some(nb) = &alloc.new_block {
            self.install_block(nb);
        }
        if !contents.is_empty() {
            self.mmu.raw_write(PrincipalId::ARBITER, alloc.addr, &contents).expect("arbiter call");
        }
        Ok(Handled::Done(
            OkBody::Addr(alloc.addr),
            format!("length={length} label={text} addr={:#x} file_bytes={}", alloc.addr, contents.len()),
        ))
    }

    fn do_create_category(&mut self, caller: PrincipalId, kind: CategoryKind, name: &str) -> Result<Handled, Refusal> {
        let key = format!("{}_{}", name, kind.suffix());
        if !name.is_empty() && self.names.lookup(&key).is_some() {
            return Err(error(format!("category name {key} already in use")));
        }
        let cat = self.counter.mint(kind).map_err(|e| error(e.to_string()))?;
        let base = if name.is_empty() { format!("c{}", cat.id) } else { name.to_string() };
        self.names.insert(&base, cat).map_err(|e| error(e.to_string()))?;
        self.known.insert(cat);
        // the creator owns what it mints; no live object carries `cat` yet
        self.registry.threads.get_mut(&caller).unwrap().ownership.insert(cat);
        Ok(Handled::Done(OkBody::Category(cat), format!("category={} id={}", self.names.name_of(&cat), cat.id)))
    }

    fn do_thread_create(
        &mut self,
        me: &Principal,
        entry: u32,
        label: Option<Label>,
        ownership: Option<Ownership>,
        spawn: &mut Option<SpawnOrder>,
    ) -> Result<Handled, Refusal> {
        let label = label.unwrap_or_else(|| me.label.clone());
        let ownership = ownership.unwrap_or_else(|| me.ownership.clone());
        self.require_known(label.iter())?;
        self.require_known(ownership.iter())?;
        let (lt, ot) = (self.names.format_label(&label), self.names.format_ownership(&ownership));
        if !check_create(&me.label, &me.ownership, &label, &ownership) {
            return Err(denied(format!("creation rule violated label={lt} own={ot}")));
        }
        let cred = self.creds.mint();
        let child = self
            .register_member(cred, Some(label), Some(ownership), Some(me.id))
            .map_err(|e| error(e.to_string()))?;
        *spawn = Some(SpawnOrder { principal: child, credential: cred, entry });
        Ok(Handled::Done(OkBody::Principal(child), format!("child={child} label={lt} own={ot} entry={entry}")))
    }

    fn do_join(&mut self, me: &Principal, child: PrincipalId, cred: Credential, seq: u32) -> Result<Handled, Refusal> {
        let rec = match self.registry.threads.get_mut(&child) {
            Some(r) if r.parent == Some(me.id) => r,
            _ => return Err(error(MonitorError::UnknownChild(child).to_string())),
        };
        if rec.joined {
            return Err(error(MonitorError::AlreadyJoined(child).to_string()));
        }
        rec.joined = true;
        match rec.status {
            PrincipalStatus::Done(status) => {
                Ok(Handled::Done(OkBody::Exit(status), format!("child={child} status={status}")))
            }
            PrincipalStatus::Running => {
                self.pending_joins.insert(child, (cred, seq));
                Ok(Handled::Parked(format!("child={child} waiting")))
            }
        }
    }

    /// Marks a member finished, tears down its view and answers a parked
    /// join on it, if any.
    pub fn notify_exit(&mut self, principal: PrincipalId, status: ExitStatus) -> Vec<(Credential, Vec<u8>)> {
        let Some(rec) = self.registry.threads.get_mut(&principal) else {
            return Vec::new();
        };
        if !rec.is_running() {
            return Vec::new();
        }
        rec.status = PrincipalStatus::Done(status);
        let cred = rec.credential;
        self.registry.members.retain(|m| *m != principal);
        self.bindings.remove(&cred);
        let _ = self.mmu.remove_principal(PrincipalId::ARBITER, principal);
        match self.pending_joins.remove(&principal) {
            Some((parent_cred, seq)) => {
                let reply = encode_response(&ResponseFrame {
                    opcode: Opcode::ThrJoin as u8,
                    seq,
                    reply: Reply::Ok(OkBody::Exit(status)),
                });
                vec![(parent_cred, reply)]
            }
            None => Vec::new(),
        }
    }

    /// A closed connection ends a parentless (bootstrap) member. Spawned
    /// members end when their entry point returns.
    pub fn connection_closed(&mut self, cred: Credential) -> Vec<(Credential, Vec<u8>)> {
        match self.bindings.get(&cred).and_then(|id| self.registry.get(*id)) {
            Some(p) if p.parent.is_none() => {
                let id = p.id;
                self.notify_exit(id, ExitStatus::Exited(0))
            }
            _ => Vec::new(),
        }
    }

    /// Recomputes every live member's table from the registry and compares.
    pub fn verify_consistency(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        let allocated: BTreeSet<PageRange> = self.mmu.allocated_ranges().into_iter().collect();
        let blocks: BTreeSet<PageRange> = self.allocator.blocks().map(|b| PageRange::from(b.run())).collect();
        if allocated != blocks {
            problems.push(format!("mapped ranges {allocated:?} differ from live blocks {blocks:?}"));
        }
        let expected_cover = coalesce_ranges(allocated.iter().copied());
        let table_owners: BTreeSet<PrincipalId> = self.mmu.principals().into_iter().collect();
        let live: BTreeSet<PrincipalId> = self.registry.members.iter().copied().collect();
        if table_owners != live {
            problems.push(format!("tables exist for {table_owners:?}, live members are {live:?}"));
        }
        for id in &self.registry.members {
            let p = &self.registry.threads[id];
            if !p.is_running() {
                problems.push(format!("member list holds finished principal {id}"));
            }
            let Some(table) = self.mmu.table(*id) else {
                problems.push(format!("no table for member {id}"));
                continue;
            };
            if table.coverage() != expected_cover {
                problems.push(format!("member {id} coverage differs from allocated pages"));
            }
            for b in self.allocator.blocks() {
                let want = perms_for(&p.label, &p.ownership, &b.label);
                let range = PageRange::from(b.run());
                match table.uniform_perm(range) {
                    Some(got) if got == want => {}
                    got => problems.push(format!("member {id} block {:#x}: table {got:?}, expected {want}", b.start)),
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    /// Hash over registry, allocator, tables and store contents.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        // the group id is a per-process nonce, not state
        for p in self.registry.threads.values() {
            let rec = (p.id, p.identity.is_arbiter(), &p.label, &p.ownership, p.parent, &p.status, p.credential, p.joined);
            h.update(format!("{rec:?}|").as_bytes());
        }
        h.update(format!("{:?}|", self.registry.members).as_bytes());
        h.update(self.allocator.dump_layout(&self.names).as_bytes());
        for o in self.allocator.objects() {
            h.update(format!("{:?}|", o).as_bytes());
        }
        h.update(format!("{:?}|{:?}", self.allocator.stats(), self.known).as_bytes());
        self.mmu.digest_into(&mut |b| h.update(b));
        hex(&h.finalize())
    }
}

fn coalesce_ranges(ranges: impl Iterator<Item = PageRange>) -> Vec<PageRange> {
    let mut out: Vec<PageRange> = Vec::new();
    for r in ranges {
        match out.last_mut() {
            Some(last) if last.end() == r.first => last.count += r.count,
            _ => out.push(r),
        }
    }
    out
}

fn read_file_range(path: &str, offset: u32, length: u32) -> std::io::Result<Vec<u8>> {
    let mut f = File::open(path)?;
    f.seek(SeekFrom::Start(offset as u64))?;
    let mut buf = Vec::new();
    f.take(length as u64).read_to_end(&mut buf)?;
    Ok(buf)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
