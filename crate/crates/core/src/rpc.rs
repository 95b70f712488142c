//! Framed request/response channel between members and the arbiter.
//!
//! Wire format (all integers little-endian):
//!
//! ```text
//! request  := length:u32 opcode:u8 seq:u32 fields* [claim:u64]
//! response := length:u32 opcode:u8 seq:u32 status:u8 body
//! ```
//!
//! `length` counts the bytes after itself. Labels are `count:u32` followed by
//! `count` entries of `(id:u64, kind:u8)` in ascending order; a count of
//! `0xFFFF_FFFF` encodes the unlabeled object label. Strings are `len:u16`
//! plus UTF-8 bytes. The optional trailing `claim` is the principal id the
//! sender asserts; it is checked against the connection credential and
//! never used to establish identity.
//!
//! The full per-opcode field table lives in `docs/wire-format.md`.

use std::fmt;
use std::sync::mpsc::{Receiver, Sender};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::label::{AccessKind, Category, CategoryKind, Label, ObjectLabel, Ownership, Permission};
use crate::monitor::ExitStatus;
use crate::protection::{Disposition, FaultEvent};
use crate::PrincipalId;

const UNLABELED_COUNT: u32 = u32::MAX;
/// Header bytes counted by `length`: opcode plus seq.
const HEADER_AFTER_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Register = 0x01,
    Malloc = 0x02,
    Free = 0x03,
    Calloc = 0x04,
    Realloc = 0x05,
    Mmap = 0x06,
    CreateCat = 0x07,
    GetLabel = 0x08,
    GetOwn = 0x09,
    GetMemLabel = 0x0A,
    GetPriv = 0x0B,
    ThrCreate = 0x0C,
    ThrJoin = 0x0D,
    NullOp = 0x0E,
}

impl Opcode {
    pub const ALL: [Opcode; 14] = [
        Opcode::Register,
        Opcode::Malloc,
        Opcode::Free,
        Opcode::Calloc,
        Opcode::Realloc,
        Opcode::Mmap,
        Opcode::CreateCat,
        Opcode::GetLabel,
        Opcode::GetOwn,
        Opcode::GetMemLabel,
        Opcode::GetPriv,
        Opcode::ThrCreate,
        Opcode::ThrJoin,
        Opcode::NullOp,
    ];

    pub fn from_byte(b: u8) -> Option<Opcode> {
        Opcode::ALL.iter().copied().find(|o| *o as u8 == b)
    }

    /// API name used in audit lines and benchmark tables.
    pub fn api_name(self) -> &'static str {
        match self {
            Opcode::Register => "ab_register",
            Opcode::Malloc => "ab_malloc",
            Opcode::Free => "ab_free",
            Opcode::Calloc => "ab_calloc",
            Opcode::Realloc => "ab_realloc",
            Opcode::Mmap => "ab_mmap",
            Opcode::CreateCat => "create_category",
            Opcode::GetLabel => "get_label",
            Opcode::GetOwn => "get_ownership",
            Opcode::GetMemLabel => "get_mem_label",
            Opcode::GetPriv => "get_privilege",
            Opcode::ThrCreate => "ab_pthread_create",
            Opcode::ThrJoin => "ab_pthread_join",
            Opcode::NullOp => "ab_null",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Register { label: Option<Label>, ownership: Option<Ownership> },
    Malloc { size: u32, label: ObjectLabel },
    Free { addr: u32 },
    Calloc { count: u32, size: u32, label: ObjectLabel },
    Realloc { addr: u32, size: u32 },
    /// Maps `length` bytes of `path` starting at `offset`; an empty path is
    /// an anonymous zero-filled mapping.
    Mmap { length: u32, offset: u32, label: ObjectLabel, path: String },
    CreateCategory { kind: CategoryKind, name: String },
    GetLabel,
    GetOwnership,
    GetMemLabel { addr: u32 },
    GetPrivilege { target: PrincipalId, addr: u32 },
    ThreadCreate { entry: u32, label: Option<Label>, ownership: Option<Ownership> },
    ThreadJoin { child: PrincipalId },
    Null,
}

impl Request {
    pub fn opcode(&self) -> Opcode {
        match self {
            Request::Register { .. } => Opcode::Register,
            Request::Malloc { .. } => Opcode::Malloc,
            Request::Free { .. } => Opcode::Free,
            Request::Calloc { .. } => Opcode::Calloc,
            Request::Realloc { .. } => Opcode::Realloc,
            Request::Mmap { .. } => Opcode::Mmap,
            Request::CreateCategory { .. } => Opcode::CreateCat,
            Request::GetLabel => Opcode::GetLabel,
            Request::GetOwnership => Opcode::GetOwn,
            Request::GetMemLabel { .. } => Opcode::GetMemLabel,
            Request::GetPrivilege { .. } => Opcode::GetPriv,
            Request::ThreadCreate { .. } => Opcode::ThrCreate,
            Request::ThreadJoin { .. } => Opcode::ThrJoin,
            Request::Null => Opcode::NullOp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestFrame {
    pub seq: u32,
    pub claim: Option<PrincipalId>,
    pub request: Request,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    Denied = 1,
    Malformed = 2,
    Error = 3,
}

impl Status {
    pub fn from_byte(b: u8) -> Option<Status> {
        match b {
            0 => Some(Status::Ok),
            1 => Some(Status::Denied),
            2 => Some(Status::Malformed),
            3 => Some(Status::Error),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "OK",
            Status::Denied => "DENIED",
            Status::Malformed => "MALFORMED",
            Status::Error => "ERROR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OkBody {
    Empty,
    Principal(PrincipalId),
    Addr(u32),
    Category(Category),
    Label(Label),
    Ownership(Ownership),
    ObjectLabel(ObjectLabel),
    Permission(Permission),
    Exit(ExitStatus),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Ok(OkBody),
    Denied(String),
    Malformed(String),
    Error(String),
}

impl Reply {
    pub fn status(&self) -> Status {
        match self {
            Reply::Ok(_) => Status::Ok,
            Reply::Denied(_) => Status::Denied,
            Reply::Malformed(_) => Status::Malformed,
            Reply::Error(_) => Status::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseFrame {
    /// Raw opcode byte of the request being answered.
    pub opcode: u8,
    pub seq: u32,
    pub reply: Reply,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed frame: {reason}")]
pub struct Malformed {
    /// Sequence number, when the header got that far.
    pub seq: Option<u32>,
    pub opcode: Option<u8>,
    pub reason: String,
}

fn malformed(reason: impl Into<String>) -> Malformed {
    Malformed { seq: None, opcode: None, reason: reason.into() }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        let bytes = s.as_bytes();
        let n = bytes.len().min(u16::MAX as usize);
        self.u16(n as u16);
        self.0.extend_from_slice(&bytes[..n]);
    }
    fn cats<'a>(&mut self, cats: impl ExactSizeIterator<Item = &'a Category>) {
        self.u32(cats.len() as u32);
        for c in cats {
            self.u64(c.id);
            self.u8(match c.kind {
                CategoryKind::Secrecy => 0,
                CategoryKind::Integrity => 1,
            });
        }
    }
    fn object_label(&mut self, l: &ObjectLabel) {
        match l {
            ObjectLabel::Unlabeled => self.u32(UNLABELED_COUNT),
            ObjectLabel::Labeled(l) => self.cats(l.categories().iter()),
        }
    }
    fn opt_label_own(&mut self, label: &Option<Label>, own: &Option<Ownership>) {
        self.u8((label.is_some() as u8) | ((own.is_some() as u8) << 1));
        if let Some(l) = label {
            self.cats(l.categories().iter());
        }
        if let Some(o) = own {
            self.cats(o.categories().iter());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], Malformed> {
        if self.remaining() < n {
            return Err(malformed("short read"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, Malformed> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, Malformed> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, Malformed> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32, Malformed> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, Malformed> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, Malformed> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| malformed("invalid utf-8"))
    }
    fn cats_with_count(&mut self, count: u32) -> Result<Vec<Category>, Malformed> {
        if count as usize > self.remaining() / 9 {
            return Err(malformed("category count exceeds frame"));
        }
        let mut out: Vec<Category> = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let id = self.u64()?;
            let kind = match self.u8()? {
                0 => CategoryKind::Secrecy,
                1 => CategoryKind::Integrity,
                _ => return Err(malformed("bad category kind")),
            };
            let c = Category { id, kind };
            if out.last().is_some_and(|prev| *prev >= c) {
                return Err(malformed("categories not in ascending order"));
            }
            out.push(c);
        }
        Ok(out)
    }
    fn label(&mut self) -> Result<Label, Malformed> {
        let count = self.u32()?;
        if count == UNLABELED_COUNT {
            return Err(malformed("unlabeled not allowed here"));
        }
        Ok(self.cats_with_count(count)?.into_iter().collect())
    }
    fn ownership(&mut self) -> Result<Ownership, Malformed> {
        let count = self.u32()?;
        if count == UNLABELED_COUNT {
            return Err(malformed("unlabeled not allowed here"));
        }
        Ok(self.cats_with_count(count)?.into_iter().collect())
    }
    fn object_label(&mut self) -> Result<ObjectLabel, Malformed> {
        let count = self.u32()?;
        if count == UNLABELED_COUNT {
            return Ok(ObjectLabel::Unlabeled);
        }
        Ok(ObjectLabel::Labeled(self.cats_with_count(count)?.into_iter().collect()))
    }
    fn opt_label_own(&mut self) -> Result<(Option<Label>, Option<Ownership>), Malformed> {
        let flags = self.u8()?;
        if flags & !0b11 != 0 {
            return Err(malformed("bad option flags"));
        }
        let label = if flags & 1 != 0 { Some(self.label()?) } else { None };
        let own = if flags & 2 != 0 { Some(self.ownership()?) } else { None };
        Ok((label, own))
    }
}

fn finish(opcode: u8, seq: u32, body: Vec<u8>) -> Vec<u8> {
    let len = (HEADER_AFTER_LEN + body.len()) as u32;
    let mut out = Vec::with_capacity(4 + len as usize);
    out.extend_from_slice(&len.to_le_bytes());
    out.push(opcode);
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Splits a complete frame into `(opcode, seq, body)`.
fn split_header(bytes: &[u8]) -> Result<(u8, u32, &[u8]), Malformed> {
    if bytes.len() < 4 + HEADER_AFTER_LEN {
        let mut m = malformed("short read");
        if bytes.len() >= 5 {
            m.opcode = Some(bytes[4]);
        }
        return Err(m);
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let opcode = bytes[4];
    let seq = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    if len != bytes.len() - 4 {
        return Err(Malformed { seq: Some(seq), opcode: Some(opcode), reason: "length mismatch".into() });
    }
    Ok((opcode, seq, &bytes[9..]))
}

pub fn encode_request(frame: &RequestFrame) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    match &frame.request {
        Request::Register { label, ownership } => w.opt_label_own(label, ownership),
        Request::Malloc { size, label } => {
            w.u32(*size);
            w.object_label(label);
        }
        Request::Free { addr } => w.u32(*addr),
        Request::Calloc { count, size, label } => {
            w.u32(*count);
            w.u32(*size);
            w.object_label(label);
        }
        Request::Realloc { addr, size } => {
            w.u32(*addr);
            w.u32(*size);
        }
        Request::Mmap { length, offset, label, path } => {
            w.u32(*length);
            w.u32(*offset);
            w.object_label(label);
            w.str(path);
        }
        Request::CreateCategory { kind, name } => {
            w.u8(match kind {
                CategoryKind::Secrecy => 0,
                CategoryKind::Integrity => 1,
            });
            w.str(name);
        }
        Request::GetLabel | Request::GetOwnership | Request::Null => {}
        Request::GetMemLabel { addr } => w.u32(*addr),
        Request::GetPrivilege { target, addr } => {
            w.u64(target.0);
            w.u32(*addr);
        }
        Request::ThreadCreate { entry, label, ownership } => {
            w.u32(*entry);
            w.opt_label_own(label, ownership);
        }
        Request::ThreadJoin { child } => w.u64(child.0),
    }
    if let Some(claim) = frame.claim {
        w.u64(claim.0);
    }
    finish(frame.request.opcode() as u8, frame.seq, w.0)
}

pub fn decode_request(bytes: &[u8]) -> Result<RequestFrame, Malformed> {
    let (op_byte, seq, body) = split_header(bytes)?;
    let tag = |mut m: Malformed| {
        m.seq = Some(seq);
        m.opcode = Some(op_byte);
        m
    };
    let opcode = Opcode::from_byte(op_byte).ok_or_else(|| tag(malformed("unknown opcode")))?;
    let mut r = Reader::new(body);
    let request = (|| -> Result<Request, Malformed> {
        Ok(match opcode {
            Opcode::Register => {
                let (label, ownership) = r.opt_label_own()?;
                Request::Register { label, ownership }
            }
            Opcode::Malloc => Request::Malloc { size: r.u32()?, label: r.object_label()? },
            Opcode::Free => Request::Free { addr: r.u32()? },
            Opcode::Calloc => Request::Calloc { count: r.u32()?, size: r.u32()?, label: r.object_label()? },
            Opcode::Realloc => Request::Realloc { addr: r.u32()?, size: r.u32()? },
            Opcode::Mmap => Request::Mmap {
                length: r.u32()?,
                offset: r.u32()?,
                label: r.object_label()?,
                path: r.str()?,
            },
            Opcode::CreateCat => {
                let kind = match r.u8()? {
                    0 => CategoryKind::Secrecy,
                    1 => CategoryKind::Integrity,
                    _ => return Err(malformed("bad category kind")),
                };
                Request::CreateCategory { kind, name: r.str()? }
            }
            Opcode::GetLabel => Request::GetLabel,
            Opcode::GetOwn => Request::GetOwnership,
            Opcode::GetMemLabel => Request::GetMemLabel { addr: r.u32()? },
            Opcode::GetPriv => Request::GetPrivilege { target: PrincipalId(r.u64()?), addr: r.u32()? },
            Opcode::ThrCreate => {
                let entry = r.u32()?;
                let (label, ownership) = r.opt_label_own()?;
                Request::ThreadCreate { entry, label, ownership }
            }
            Opcode::ThrJoin => Request::ThreadJoin { child: PrincipalId(r.u64()?) },
            Opcode::NullOp => Request::Null,
        })
    })()
    .map_err(tag)?;
    let claim = match r.remaining() {
        0 => None,
        8 => Some(PrincipalId(r.u64().map_err(tag)?)),
        _ => return Err(tag(malformed("trailing bytes"))),
    };
    Ok(RequestFrame { seq, claim, request })
}

pub fn encode_response(frame: &ResponseFrame) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u8(frame.reply.status() as u8);
    match &frame.reply {
        Reply::Ok(body) => match body {
            OkBody::Empty => {}
            OkBody::Principal(p) => w.u64(p.0),
            OkBody::Addr(a) => w.u32(*a),
            OkBody::Category(c) => {
                w.u64(c.id);
                w.u8(match c.kind {
                    CategoryKind::Secrecy => 0,
                    CategoryKind::Integrity => 1,
                });
            }
            OkBody::Label(l) => w.cats(l.categories().iter()),
            OkBody::Ownership(o) => w.cats(o.categories().iter()),
            OkBody::ObjectLabel(l) => w.object_label(l),
            OkBody::Permission(p) => w.u8(p.bits()),
            OkBody::Exit(status) => match status {
                ExitStatus::Exited(code) => {
                    w.u8(0);
                    w.i32(*code);
                }
                ExitStatus::Terminated(ev) => {
                    w.u8(1);
                    w.u64(ev.principal.0);
                    w.u32(ev.addr);
                    w.u8(match ev.kind {
                        AccessKind::Read => 0,
                        AccessKind::Write => 1,
                    });
                    w.u8(match ev.disposition {
                        Disposition::Terminated => 0,
                        Disposition::Handled => 1,
                    });
                }
            },
        },
        Reply::Denied(m) | Reply::Malformed(m) | Reply::Error(m) => w.str(m),
    }
    finish(frame.opcode, frame.seq, w.0)
}

pub fn decode_response(bytes: &[u8]) -> Result<ResponseFrame, Malformed> {
    let (opcode, seq, body) = split_header(bytes)?;
    let mut r = Reader::new(body);
    let status = Status::from_byte(r.u8()?).ok_or_else(|| malformed("bad status"))?;
    let reply = match status {
        Status::Denied => Reply::Denied(r.str()?),
        Status::Malformed => Reply::Malformed(r.str()?),
        Status::Error => Reply::Error(r.str()?),
        Status::Ok => {
            let op = Opcode::from_byte(opcode).ok_or_else(|| malformed("unknown opcode"))?;
            Reply::Ok(match op {
                Opcode::Register | Opcode::ThrCreate => OkBody::Principal(PrincipalId(r.u64()?)),
                Opcode::Malloc | Opcode::Calloc | Opcode::Realloc | Opcode::Mmap => OkBody::Addr(r.u32()?),
                Opcode::Free | Opcode::NullOp => OkBody::Empty,
                Opcode::CreateCat => {
                    let id = r.u64()?;
                    let kind = match r.u8()? {
                        0 => CategoryKind::Secrecy,
                        1 => CategoryKind::Integrity,
                        _ => return Err(malformed("bad category kind")),
                    };
                    OkBody::Category(Category { id, kind })
                }
                Opcode::GetLabel => OkBody::Label(r.label()?),
                Opcode::GetOwn => OkBody::Ownership(r.ownership()?),
                Opcode::GetMemLabel => OkBody::ObjectLabel(r.object_label()?),
                Opcode::GetPriv => {
                    OkBody::Permission(Permission::from_bits(r.u8()?).ok_or_else(|| malformed("bad permission"))?)
                }
                Opcode::ThrJoin => OkBody::Exit(match r.u8()? {
                    0 => ExitStatus::Exited(r.i32()?),
                    1 => {
                        let principal = PrincipalId(r.u64()?);
                        let addr = r.u32()?;
                        let kind = match r.u8()? {
                            0 => AccessKind::Read,
                            1 => AccessKind::Write,
                            _ => return Err(malformed("bad access kind")),
                        };
                        let disposition = match r.u8()? {
                            0 => Disposition::Terminated,
                            1 => Disposition::Handled,
                            _ => return Err(malformed("bad disposition")),
                        };
                        ExitStatus::Terminated(FaultEvent { principal, addr, kind, disposition })
                    }
                    _ => return Err(malformed("bad exit tag")),
                }),
            })
        }
    };
    if r.remaining() != 0 {
        return Err(malformed("trailing bytes"));
    }
    Ok(ResponseFrame { opcode, seq, reply })
}

/// Transport-level peer identity of a connection. Assigned when the
/// connection is opened; frames cannot carry or alter it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Credential(pub u64);

impl fmt::Display for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "conn:{}", self.0)
    }
}

/// Traffic from connections towards the monitor end.
#[derive(Debug)]
pub enum Inbound {
    Open { cred: Credential, reply: Sender<Vec<u8>> },
    Frame { cred: Credential, bytes: Vec<u8> },
    Close { cred: Credential },
}

/// Delivery function into the monitor's queue; returns false once the
/// monitor is gone.
pub type Uplink = Arc<dyn Fn(Inbound) -> bool + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("connection closed")]
    ClosedConnection,
    #[error("response seq {got} does not match request seq {expected}")]
    SeqMismatch { expected: u32, got: u32 },
    #[error("undecodable response: {0}")]
    BadResponse(String),
    #[error("timed out waiting for response")]
    Timeout,
}

/// One end of an in-process duplex channel to the monitor.
pub struct Connection {
    cred: Credential,
    uplink: Uplink,
    replies: Receiver<Vec<u8>>,
    next_seq: u32,
    open: bool,
    timeout: Option<Duration>,
}

impl fmt::Debug for Connection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Connection").field("cred", &self.cred).field("open", &self.open).finish()
    }
}

impl Connection {
    /// Wires up an already announced connection.
    pub fn from_parts(cred: Credential, uplink: Uplink, replies: Receiver<Vec<u8>>) -> Self {
        Connection { cred, uplink, replies, next_seq: 1, open: true, timeout: None }
    }

    pub fn set_timeout(&mut self, timeout: Option<Duration>) {
        self.timeout = timeout;
    }

    pub fn peer_credential(&self) -> Result<Credential, TransportError> {
        if self.open {
            Ok(self.cred)
        } else {
            Err(TransportError::ClosedConnection)
        }
    }

    fn next_seq(&mut self) -> u32 {
        let s = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1);
        s
    }

    /// Sends raw bytes and returns the raw response frame.
    pub fn roundtrip_raw(&mut self, bytes: Vec<u8>) -> Result<Vec<u8>, TransportError> {
        if !self.open {
            return Err(TransportError::ClosedConnection);
        }
        if !(self.uplink)(Inbound::Frame { cred: self.cred, bytes }) {
            self.open = false;
            return Err(TransportError::ClosedConnection);
        }
        let got = match self.timeout {
            Some(t) => self.replies.recv_timeout(t).map_err(|e| match e {
                std::sync::mpsc::RecvTimeoutError::Timeout => TransportError::Timeout,
                std::sync::mpsc::RecvTimeoutError::Disconnected => TransportError::ClosedConnection,
            }),
            None => self.replies.recv().map_err(|_| TransportError::ClosedConnection),
        };
        if got.is_err() {
            self.open = false;
        }
        got
    }

    pub fn call(&mut self, request: Request) -> Result<Reply, TransportError> {
        self.call_claiming(request, None)
    }

    /// Like [`call`](Self::call) with an explicit principal claim appended.
    pub fn call_claiming(&mut self, request: Request, claim: Option<PrincipalId>) -> Result<Reply, TransportError> {
        let seq = self.next_seq();
        let bytes = encode_request(&RequestFrame { seq, claim, request });
        let raw = self.roundtrip_raw(bytes)?;
        let resp = decode_response(&raw).map_err(|m| TransportError::BadResponse(m.reason))?;
        if resp.seq != seq {
            return Err(TransportError::SeqMismatch { expected: seq, got: resp.seq });
        }
        Ok(resp.reply)
    }

    pub fn close(&mut self) {
        if self.open {
            (self.uplink)(Inbound::Close { cred: self.cred });
            self.open = false;
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        self.close();
    }
}

/// Hands out connections with fresh credentials.
#[derive(Clone)]
pub struct Listener {
    uplink: Uplink,
    creds: crate::monitor::CredentialSource,
}

impl Listener {
    pub fn new(uplink: Uplink, creds: crate::monitor::CredentialSource) -> Self {
        Listener { uplink, creds }
    }

    pub fn connect(&self) -> Result<Connection, TransportError> {
        let cred = self.creds.mint();
        let (tx, rx) = std::sync::mpsc::channel();
        if !(self.uplink)(Inbound::Open { cred, reply: tx }) {
            return Err(TransportError::ClosedConnection);
        }
        Ok(Connection::from_parts(cred, self.uplink.clone(), rx))
    }
}
