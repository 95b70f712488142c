//! Threads and channels around a [`Monitor`].
//!
//! [`Group::boot`] starts the arbiter thread. Every member, including the
//! first one, talks to it only through its [`Connection`]; the shared segment
//! is accessed through the group's [`Mmu`] under the member's own table.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::label::{Category, CategoryKind, Label, ObjectLabel, Ownership, Permission};
use crate::monitor::{ExitStatus, Monitor, MonitorConfig};
use crate::protection::{AccessError, FaultPolicy, Mmu, PageRange, ProtectionError};
use crate::rpc::{Connection, Credential, Inbound, Listener, OkBody, Reply, Request, TransportError, Uplink};
use crate::PrincipalId;

pub type Entry = Box<dyn FnOnce(Member) -> i32 + Send>;

type EntryTable = Arc<Mutex<HashMap<u32, Entry>>>;

pub enum Envelope {
    Net(Inbound),
    Exited { principal: PrincipalId, status: ExitStatus },
    Inspect(Box<dyn FnOnce(&mut Monitor) + Send>),
    Shutdown,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemberError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("denied: {0}")]
    Denied(String),
    #[error("malformed: {0}")]
    Malformed(String),
    #[error("error: {0}")]
    Error(String),
    #[error("unexpected reply body {0}")]
    Unexpected(String),
}

impl MemberError {
    pub fn is_denied(&self) -> bool {
        matches!(self, MemberError::Denied(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyStats {
    pub count: u64,
    pub total: Duration,
    pub min: Duration,
    pub max: Duration,
}

impl LatencyStats {
    fn record(&mut self, d: Duration) {
        if self.count == 0 || d < self.min {
            self.min = d;
        }
        if d > self.max {
            self.max = d;
        }
        self.count += 1;
        self.total += d;
    }

    pub fn mean(&self) -> Duration {
        if self.count == 0 {
            Duration::ZERO
        } else {
            self.total / self.count as u32
        }
    }
}

impl Default for LatencyStats {
    fn default() -> Self {
        LatencyStats { count: 0, total: Duration::ZERO, min: Duration::ZERO, max: Duration::ZERO }
    }
}

/// A running group: the arbiter thread and its connection listener.
pub struct Group {
    tx: Sender<Envelope>,
    listener: Listener,
    mmu: Arc<Mmu>,
    entries: EntryTable,
    next_entry: Arc<AtomicU32>,
    group_id: u32,
    thread: Option<JoinHandle<()>>,
}

impl fmt::Debug for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Group").field("group_id", &self.group_id).finish()
    }
}

impl Group {
    pub fn boot(config: MonitorConfig) -> Group {
        let monitor = Monitor::new(config);
        let (tx, rx) = channel::<Envelope>();
        let uplink: Uplink = {
            let tx = Mutex::new(tx.clone());
            Arc::new(move |i| tx.lock().unwrap().send(Envelope::Net(i)).is_ok())
        };
        let listener = Listener::new(uplink.clone(), monitor.credentials().clone());
        let mmu = monitor.mmu().clone();
        let group_id = monitor.group_id();
        let entries: EntryTable = Arc::default();
        let next_entry = Arc::new(AtomicU32::new(1));

        let ctx = SpawnContext {
            tx: tx.clone(),
            uplink,
            mmu: mmu.clone(),
            entries: entries.clone(),
            next_entry: next_entry.clone(),
        };
        let thread = thread::Builder::new()
            .name(format!("arbiter-{group_id}"))
            .spawn(move || run_monitor(monitor, rx, ctx))
            .expect("spawn arbiter thread");
        Group { tx, listener, mmu, entries, next_entry, group_id, thread: Some(thread) }
    }

    pub fn group_id(&self) -> u32 {
        self.group_id
    }

    pub fn mmu(&self) -> &Arc<Mmu> {
        &self.mmu
    }

    /// A raw connection that has not registered yet.
    pub fn connect(&self) -> Result<Connection, TransportError> {
        self.listener.connect()
    }

    /// Connects and registers the group's bootstrap member.
    pub fn register(&self, label: Option<Label>, ownership: Option<Ownership>) -> Result<Member, MemberError> {
        let mut conn = self.connect()?;
        let id = match conn.call(Request::Register { label, ownership })? {
            Reply::Ok(OkBody::Principal(id)) => id,
            other => return Err(reply_error(other)),
        };
        Ok(Member::new(conn, id, self.mmu.clone(), self.entries.clone(), self.next_entry.clone()))
    }

    /// Runs `f` on the arbiter thread between two requests.
    pub fn inspect<R: Send + 'static>(&self, f: impl FnOnce(&mut Monitor) -> R + Send + 'static) -> R {
        let (rtx, rrx) = channel();
        let job: Box<dyn FnOnce(&mut Monitor) + Send> = Box::new(move |m| {
            let _ = rtx.send(f(m));
        });
        self.tx.send(Envelope::Inspect(job)).expect("arbiter thread running");
        rrx.recv().expect("arbiter thread running")
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(t) = self.thread.take() {
            let _ = self.tx.send(Envelope::Shutdown);
            let _ = t.join();
        }
    }
}

impl Drop for Group {
    fn drop(&mut self) {
        self.stop();
    }
}

struct SpawnContext {
    tx: Sender<Envelope>,
    uplink: Uplink,
    mmu: Arc<Mmu>,
    entries: EntryTable,
    next_entry: Arc<AtomicU32>,
}

fn run_monitor(mut monitor: Monitor, rx: std::sync::mpsc::Receiver<Envelope>, ctx: SpawnContext) {
    let mut replies: HashMap<Credential, Sender<Vec<u8>>> = HashMap::new();
    let deliver = |replies: &HashMap<Credential, Sender<Vec<u8>>>, out: Vec<(Credential, Vec<u8>)>| {
        for (cred, bytes) in out {
            if let Some(tx) = replies.get(&cred) {
                let _ = tx.send(bytes);
            }
        }
    };
    while let Ok(env) = rx.recv() {
        match env {
            Envelope::Net(Inbound::Open { cred, reply }) => {
                replies.insert(cred, reply);
            }
            Envelope::Net(Inbound::Frame { cred, bytes }) => {
                let d = monitor.handle_frame(cred, &bytes);
                if let Some(order) = d.spawn {
                    let (rtx, rrx) = channel();
                    replies.insert(order.credential, rtx);
                    let conn = Connection::from_parts(order.credential, ctx.uplink.clone(), rrx);
                    let member = Member::new(
                        conn,
                        order.principal,
                        ctx.mmu.clone(),
                        ctx.entries.clone(),
                        ctx.next_entry.clone(),
                    );
                    let entry = ctx.entries.lock().unwrap().remove(&order.entry);
                    let (tx, mmu, principal) = (ctx.tx.clone(), ctx.mmu.clone(), order.principal);
                    thread::Builder::new()
                        .name(format!("member-{principal}"))
                        .spawn(move || {
                            let code = match entry {
                                Some(f) => f(member),
                                None => -1,
                            };
                            let status = match mmu.termination(principal) {
                                Some(ev) => ExitStatus::Terminated(ev),
                                None => ExitStatus::Exited(code),
                            };
                            let _ = tx.send(Envelope::Exited { principal, status });
                        })
                        .expect("spawn member thread");
                }
                if let Some(bytes) = d.reply {
                    if let Some(tx) = replies.get(&cred) {
                        let _ = tx.send(bytes);
                    }
                }
            }
            Envelope::Net(Inbound::Close { cred }) => {
                let out = monitor.connection_closed(cred);
                deliver(&replies, out);
                replies.remove(&cred);
            }
            Envelope::Exited { principal, status } => {
                let out = monitor.notify_exit(principal, status);
                deliver(&replies, out);
            }
            Envelope::Inspect(f) => f(&mut monitor),
            Envelope::Shutdown => break,
        }
    }
}

/// Client side of one principal.
pub struct Member {
    conn: Connection,
    id: PrincipalId,
    mmu: Arc<Mmu>,
    entries: EntryTable,
    next_entry: Arc<AtomicU32>,
    latency: BTreeMap<&'static str, LatencyStats>,
}

impl fmt::Debug for Member {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Member").field("id", &self.id).finish()
    }
}

fn reply_error(r: Reply) -> MemberError {
    match r {
        Reply::Denied(m) => MemberError::Denied(m),
        Reply::Malformed(m) => MemberError::Malformed(m),
        Reply::Error(m) => MemberError::Error(m),
        Reply::Ok(body) => MemberError::Unexpected(format!("{body:?}")),
    }
}

macro_rules! expect_body {
    ($reply:expr, $pat:pat => $out:expr) => {
        match $reply {
            Reply::Ok($pat) => Ok($out),
            other => Err(reply_error(other)),
        }
    };
}

impl Member {
    fn new(conn: Connection, id: PrincipalId, mmu: Arc<Mmu>, entries: EntryTable, next_entry: Arc<AtomicU32>) -> Self {
        Member { conn, id, mmu, entries, next_entry, latency: BTreeMap::new() }
    }

    pub fn self_id(&self) -> PrincipalId {
        self.id
    }

    pub fn credential(&self) -> Credential {
        self.conn.peer_credential().unwrap_or(Credential(0))
    }

    pub fn mmu(&self) -> &Arc<Mmu> {
        &self.mmu
    }

    pub fn latency(&self) -> &BTreeMap<&'static str, LatencyStats> {
        &self.latency
    }

    pub fn connection(&mut self) -> &mut Connection {
        &mut self.conn
    }

    fn call(&mut self, request: Request) -> Result<Reply, MemberError> {
        let name = request.opcode().api_name();
        let t = Instant::now();
        let r = self.conn.call(request);
        self.latency.entry(name).or_default().record(t.elapsed());
        Ok(r?)
    }

    pub fn null(&mut self) -> Result<(), MemberError> {
        expect_body!(self.call(Request::Null)?, OkBody::Empty => ())
    }

    pub fn malloc(&mut self, size: u32, label: &ObjectLabel) -> Result<u32, MemberError> {
        expect_body!(self.call(Request::Malloc { size, label: label.clone() })?, OkBody::Addr(a) => a)
    }

    pub fn calloc(&mut self, count: u32, size: u32, label: &ObjectLabel) -> Result<u32, MemberError> {
        expect_body!(self.call(Request::Calloc { count, size, label: label.clone() })?, OkBody::Addr(a) => a)
    }

    pub fn realloc(&mut self, addr: u32, size: u32) -> Result<u32, MemberError> {
        expect_body!(self.call(Request::Realloc { addr, size })?, OkBody::Addr(a) => a)
    }

    pub fn free(&mut self, addr: u32) -> Result<(), MemberError> {
        expect_body!(self.call(Request::Free { addr })?, OkBody::Empty => ())
    }

    /// Maps `length` bytes of `path` from `offset`; an empty path maps
    /// zeroed memory.
    pub fn mmap(&mut self, length: u32, offset: u32, label: &ObjectLabel, path: &str) -> Result<u32, MemberError> {
        let req = Request::Mmap { length, offset, label: label.clone(), path: path.to_string() };
        expect_body!(self.call(req)?, OkBody::Addr(a) => a)
    }

    pub fn create_category(&mut self, kind: CategoryKind, name: &str) -> Result<Category, MemberError> {
        expect_body!(self.call(Request::CreateCategory { kind, name: name.to_string() })?, OkBody::Category(c) => c)
    }

    pub fn get_label(&mut self) -> Result<Label, MemberError> {
        expect_body!(self.call(Request::GetLabel)?, OkBody::Label(l) => l)
    }

    pub fn get_ownership(&mut self) -> Result<Ownership, MemberError> {
        expect_body!(self.call(Request::GetOwnership)?, OkBody::Ownership(o) => o)
    }

    pub fn get_mem_label(&mut self, addr: u32) -> Result<ObjectLabel, MemberError> {
        expect_body!(self.call(Request::GetMemLabel { addr })?, OkBody::ObjectLabel(l) => l)
    }

    pub fn get_privilege(&mut self, target: PrincipalId, addr: u32) -> Result<Permission, MemberError> {
        expect_body!(self.call(Request::GetPrivilege { target, addr })?, OkBody::Permission(p) => p)
    }

    /// Creates a member running `entry`. `None` inherits the caller's label
    /// or ownership.
    pub fn spawn(
        &mut self,
        label: Option<Label>,
        ownership: Option<Ownership>,
        entry: impl FnOnce(Member) -> i32 + Send + 'static,
    ) -> Result<PrincipalId, MemberError> {
        let id = self.next_entry.fetch_add(1, Ordering::Relaxed);
        self.entries.lock().unwrap().insert(id, Box::new(entry));
        let r = self.call(Request::ThreadCreate { entry: id, label, ownership });
        let out = r.and_then(|r| expect_body!(r, OkBody::Principal(p) => p));
        if out.is_err() {
            self.entries.lock().unwrap().remove(&id);
        }
        out
    }

    /// Blocks until `child` has finished.
    pub fn join(&mut self, child: PrincipalId) -> Result<ExitStatus, MemberError> {
        expect_body!(self.call(Request::ThreadJoin { child })?, OkBody::Exit(s) => s)
    }

    pub fn read(&self, addr: u32, len: u32) -> Result<Vec<u8>, AccessError> {
        self.mmu.read_mem(self.id, addr, len)
    }

    pub fn write(&self, addr: u32, data: &[u8]) -> Result<(), AccessError> {
        self.mmu.write_mem(self.id, addr, data)
    }

    pub fn set_fault_policy(&self, policy: FaultPolicy) {
        self.mmu.set_fault_policy(self.id, policy);
    }

    /// Attempt to change the member's own page permissions directly.
    pub fn mprotect(&self, range: PageRange, perm: Permission) -> Result<(), ProtectionError> {
        self.mmu.set_page_perms(self.id, self.id, range, perm)
    }
}
