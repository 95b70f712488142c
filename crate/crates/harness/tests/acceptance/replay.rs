//! A seeded generator drives a monitor through random, partly hostile traffic
//! and records the log. The log is then replayed into fresh monitors: after
//! every request each live member's table is compared with permissions
//! recomputed here from the registry, and two replays must agree with the
//! recording byte for byte.

use std::collections::BTreeSet;

use arbiter_core::label::{Category, CategoryKind, Label, ObjectLabel, Ownership, Permission};
use arbiter_core::monitor::{Monitor, MonitorConfig};
use arbiter_core::protection::PageRange;
use arbiter_core::rpc::{decode_response, encode_request, Credential, OkBody, Reply, Request, RequestFrame};
use arbiter_core::{ExitStatus, PrincipalId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const REQUESTS: usize = 10_000;
const MAX_MEMBERS: usize = 12;
const SEED: u64 = 0x5eed_a11c;

#[derive(Clone)]
enum Event {
    Mint(Credential),
    Frame { cred: Credential, bytes: Vec<u8>, reply: Option<Vec<u8>>, spawned: Option<(PrincipalId, Credential)> },
    Exit { principal: PrincipalId, status: ExitStatus, released: usize },
}

struct Gen {
    m: Monitor,
    rng: ChaCha8Rng,
    log: Vec<Event>,
    seq: u32,
    cats: Vec<Category>,
    addrs: Vec<u32>,
    root: Credential,
}

fn subset<T: Clone, R: Rng>(rng: &mut R, from: &[T], max: usize) -> Vec<T> {
    let n = rng.gen_range(0..=max.min(from.len()));
    from.choose_multiple(rng, n).cloned().collect()
}

impl Gen {
    fn live(&self) -> Vec<(PrincipalId, Credential)> {
        self.m
            .registry()
            .members()
            .iter()
            .map(|id| (*id, self.m.principal(*id).unwrap().credential))
            .collect()
    }

    fn send_raw(&mut self, cred: Credential, bytes: Vec<u8>) -> Option<Reply> {
        let d = self.m.handle_frame(cred, &bytes);
        let spawned = d.spawn.as_ref().map(|s| (s.principal, s.credential));
        let reply = d.reply.clone();
        self.log.push(Event::Frame { cred, bytes, reply: reply.clone(), spawned });
        let reply = reply.map(|r| decode_response(&r).expect("monitor replies decode").reply);
        if let Some(Reply::Ok(body)) = &reply {
            match body {
                OkBody::Addr(a) => self.addrs.push(*a),
                OkBody::Category(c) => self.cats.push(*c),
                _ => {}
            }
        }
        reply
    }

    fn send(&mut self, cred: Credential, claim: Option<PrincipalId>, request: Request) -> Option<Reply> {
        self.seq += 1;
        let bytes = encode_request(&RequestFrame { seq: self.seq, claim, request });
        self.send_raw(cred, bytes)
    }

    fn exit(&mut self, principal: PrincipalId) {
        let status = ExitStatus::Exited(self.rng.gen_range(0..4));
        let released = self.m.notify_exit(principal, status).len();
        self.log.push(Event::Exit { principal, status, released });
    }

    fn object_label(&mut self, own: &Label) -> ObjectLabel {
        match self.rng.gen_range(0..4) {
            0 => ObjectLabel::Unlabeled,
            1 | 2 => ObjectLabel::Labeled(own.clone()),
            _ => ObjectLabel::Labeled(subset(&mut self.rng, &self.cats, 3).into_iter().collect()),
        }
    }

    fn size(&mut self) -> u32 {
        match self.rng.gen_range(0..10) {
            0 => self.rng.gen_range(65_000..140_000),
            1 => 0,
            _ => self.rng.gen_range(1..5000),
        }
    }

    fn addr(&mut self) -> u32 {
        match self.addrs.choose(&mut self.rng) {
            Some(&a) if self.rng.gen_bool(0.9) => a + if self.rng.gen_bool(0.1) { 16 } else { 0 },
            _ => self.rng.gen(),
        }
    }

    fn request(&mut self, me: PrincipalId, live: usize) -> Request {
        let p = self.m.principal(me).unwrap().clone();
        let choice = self.rng.gen_range(0..100);
        match choice {
            0..=24 => Request::Malloc { size: self.size(), label: self.object_label(&p.label) },
            25..=29 => {
                let label = self.object_label(&p.label);
                Request::Calloc { count: self.rng.gen_range(1..8), size: self.rng.gen_range(1..2000), label }
            }
            30..=41 => Request::Free { addr: self.addr() },
            42..=51 => Request::Realloc { addr: self.addr(), size: self.size() },
            52..=55 => {
                let label = self.object_label(&p.label);
                Request::Mmap { length: self.rng.gen_range(1..20_000), offset: 0, label, path: String::new() }
            }
            56..=60 => {
                let kind = if self.rng.gen_bool(0.5) { CategoryKind::Secrecy } else { CategoryKind::Integrity };
                Request::CreateCategory { kind, name: String::new() }
            }
            61..=63 => Request::GetLabel,
            64..=66 => Request::GetOwnership,
            67..=70 => Request::GetMemLabel { addr: self.addr() },
            71..=75 => {
                let target = PrincipalId(self.rng.gen_range(1..(live as u64 + 4)));
                Request::GetPrivilege { target, addr: self.addr() }
            }
            76..=87 if live < MAX_MEMBERS => {
                let mut pool: Vec<Category> = p.label.iter().copied().collect();
                pool.extend(subset(&mut self.rng, &self.cats, 2));
                let label = self
                    .rng
                    .gen_bool(0.8)
                    .then(|| subset(&mut self.rng, &pool, 3).into_iter().collect::<Label>());
                let owned: Vec<Category> = p.ownership.iter().copied().collect();
                let ownership = match self.rng.gen_range(0..3) {
                    0 => None,
                    1 => Some(subset(&mut self.rng, &owned, 4).into_iter().collect::<Ownership>()),
                    _ => Some(subset(&mut self.rng, &self.cats, 2).into_iter().collect::<Ownership>()),
                };
                Request::ThreadCreate { entry: self.rng.gen(), label, ownership }
            }
            88..=93 => {
                let kids: Vec<PrincipalId> = self
                    .m
                    .registry()
                    .principals()
                    .filter(|c| c.parent == Some(me))
                    .map(|c| c.id)
                    .collect();
                let child = match kids.choose(&mut self.rng) {
                    Some(&c) if self.rng.gen_bool(0.8) => c,
                    _ => PrincipalId(self.rng.gen_range(0..(live as u64 + 4))),
                };
                Request::ThreadJoin { child }
            }
            _ => Request::Null,
        }
    }

    fn step(&mut self) {
        let live = self.live();
        let r: f64 = self.rng.gen();
        if r < 0.03 && live.len() > 1 {
            let &(id, _) = live[1..].choose(&mut self.rng).unwrap();
            self.exit(id);
            return;
        }
        let &(me, cred) = live.choose(&mut self.rng).unwrap();
        let request = self.request(me, live.len());
        if r < 0.06 {
            // a frame nobody registered sent
            let stranger = self.m.credentials().mint();
            self.log.push(Event::Mint(stranger));
            let req = if self.rng.gen_bool(0.5) { Request::Register { label: None, ownership: None } } else { request };
            self.send(stranger, None, req);
            return;
        }
        if r < 0.10 {
            self.seq += 1;
            let mut bytes = encode_request(&RequestFrame { seq: self.seq, claim: None, request });
            match self.rng.gen_range(0..3) {
                0 => {
                    let i = self.rng.gen_range(0..bytes.len());
                    bytes[i] ^= 1 << self.rng.gen_range(0..8);
                }
                1 => bytes.truncate(self.rng.gen_range(0..bytes.len())),
                _ => bytes.extend((0..self.rng.gen_range(1..10)).map(|_| self.rng.gen::<u8>())),
            }
            self.send_raw(cred, bytes);
            return;
        }
        let claim = if r < 0.13 {
            Some(PrincipalId(self.rng.gen_range(0..(live.len() as u64 + 3))))
        } else if r < 0.30 {
            Some(me)
        } else {
            None
        };
        let join = matches!(request, Request::ThreadJoin { .. });
        let child = if let Request::ThreadJoin { child } = &request { Some(*child) } else { None };
        let reply = self.send(cred, claim, request);
        if join && reply.is_none() {
            self.exit(child.unwrap());
        }
    }

    fn frames(&self) -> usize {
        self.log.iter().filter(|e| matches!(e, Event::Frame { .. })).count()
    }
}

fn record() -> (Vec<Event>, String, String) {
    let mut g = Gen {
        m: Monitor::new(MonitorConfig::default()),
        rng: ChaCha8Rng::seed_from_u64(SEED),
        log: Vec::new(),
        seq: 0,
        cats: Vec::new(),
        addrs: Vec::new(),
        root: Credential(0),
    };
    g.root = g.m.credentials().mint();
    g.log.push(Event::Mint(g.root));
    let root = g.root;
    g.send(root, None, Request::Register { label: None, ownership: None });
    while g.frames() < REQUESTS {
        g.step();
    }
    (g.log, g.m.audit_digest(), g.m.state_digest())
}

fn flows(a: &BTreeSet<Category>, b: &BTreeSet<Category>, owned: &BTreeSet<Category>) -> bool {
    let secrecy_ok = a.iter().filter(|c| c.is_secrecy() && !owned.contains(c)).all(|c| b.contains(c));
    let integrity_ok = b.iter().filter(|c| c.is_integrity() && !owned.contains(c)).all(|c| a.contains(c));
    secrecy_ok && integrity_ok
}

fn expected(label: &Label, owned: &Ownership, object: &ObjectLabel) -> Permission {
    match object {
        ObjectLabel::Unlabeled => Permission::RW,
        ObjectLabel::Labeled(o) => {
            let (t, o, own) = (label.categories(), o.categories(), owned.categories());
            Permission { read: flows(o, t, own), write: flows(t, o, own) }
        }
    }
}

fn sweep(m: &Monitor) -> Result<(), String> {
    m.verify_consistency().map_err(|p| p.join("; "))?;
    let blocks: Vec<(PageRange, ObjectLabel)> =
        m.allocator().blocks().map(|b| (PageRange::from(b.run()), b.label.clone())).collect();
    let block_pages: u64 = blocks.iter().map(|(r, _)| r.count as u64).sum();
    for &id in m.registry().members() {
        let p = m.principal(id).unwrap();
        let table = m.mmu().table(id).ok_or_else(|| format!("member {id} has no table"))?;
        let covered: u64 = table.runs().map(|(r, _)| r.count as u64).sum();
        if covered != block_pages {
            return Err(format!("member {id} covers {covered} pages, live blocks span {block_pages}"));
        }
        for (range, label) in &blocks {
            let want = expected(&p.label, &p.ownership, label);
            if table.uniform_perm(*range) != Some(want) {
                return Err(format!("member {id} range {:#x}: table disagrees with {want}", range.start_addr()));
            }
        }
    }
    Ok(())
}

fn replay(log: &[Event], check: bool) -> Result<(String, String, String), String> {
    let mut m = Monitor::new(MonitorConfig::default());
    let mut requests = 0;
    for (i, e) in log.iter().enumerate() {
        match e {
            Event::Mint(c) => {
                let got = m.credentials().mint();
                if got != *c {
                    return Err(format!("event {i}: minted {got}, log has {c}"));
                }
                continue;
            }
            Event::Frame { cred, bytes, reply, spawned } => {
                requests += 1;
                let d = m.handle_frame(*cred, bytes);
                if d.reply != *reply || d.spawn.map(|s| (s.principal, s.credential)) != *spawned {
                    return Err(format!("request {requests}: reply differs from the recording"));
                }
            }
            Event::Exit { principal, status, released } => {
                if m.notify_exit(*principal, *status).len() != *released {
                    return Err(format!("event {i}: exit of {principal} answered differently"));
                }
            }
        }
        if check {
            sweep(&m).map_err(|e| format!("after request {requests}: {e}"))?;
        }
    }
    let c = m.counters();
    let mix = format!(
        "{requests} requests (ok {}, denied {}, malformed {}, error {}), {} blocks created",
        c.ok, c.denied, c.malformed, c.errors, c.new_blocks
    );
    Ok((m.audit_digest(), m.state_digest(), mix))
}

pub fn run() -> Outcome {
    let (log, audit, state) = record();
    let (a1, s1, n) = replay(&log, true)?;
    let (a2, s2, _) = replay(&log, false)?;
    if a1 != audit || a2 != audit {
        return Err("audit digest differs between runs".into());
    }
    if s1 != state || s2 != state {
        return Err("state digest differs between runs".into());
    }
    let exits = log.iter().filter(|e| matches!(e, Event::Exit { .. })).count();
    Ok(format!(
        "{n} and {exits} exits, tables matched after each; replays identical (audit {}..)",
        &audit[..12]
    ))
}
