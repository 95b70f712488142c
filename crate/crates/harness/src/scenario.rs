//! Running a fixture against a live group.
//!
//! Every declared principal is a member thread (an actor) that executes
//! closures sent to it. The controller on the calling thread issues script
//! steps one at a time, round-robin in declaration order, so the sequence of
//! requests the arbiter sees is the same on every run.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc::{channel, Receiver, Sender};

use arbiter_core::label::{CategoryNames, Permission};
use arbiter_core::monitor::MonitorConfig;
use arbiter_core::protection::{AccessError, FaultPolicy};
use arbiter_core::runtime::{LatencyStats, MemberError};
use arbiter_core::{ExitStatus, Group, Member, PrincipalId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Expect, QueryKind, Resolved, Step, ROOT};
use crate::report::{Counters, Latency};
use crate::HarnessError;

type Job = Box<dyn FnOnce(&mut Member) -> Box<dyn Any + Send> + Send>;

enum Msg {
    Run(Job),
    Exit(i32),
}

fn actor_entry(rx: Receiver<Msg>, out: Sender<Box<dyn Any + Send>>) -> impl FnOnce(Member) -> i32 + Send + 'static {
    move |mut m| {
        while let Ok(msg) = rx.recv() {
            match msg {
                Msg::Run(job) => {
                    if out.send(job(&mut m)).is_err() {
                        break;
                    }
                }
                Msg::Exit(code) => return code,
            }
        }
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ActorState {
    /// Declared but its parent has not spawned it yet.
    Pending,
    Live,
    /// Exited or joined.
    Gone,
}

struct Actor {
    id: Option<PrincipalId>,
    tx: Option<Sender<Msg>>,
    rx: Option<Receiver<Box<dyn Any + Send>>>,
    state: ActorState,
}

/// One executed script step.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub principal: String,
    pub index: usize,
    pub step: String,
    pub outcome: String,
    /// Outcome agreed with the step's expectation.
    pub ok: bool,
}

pub struct Session {
    pub resolved: Resolved,
    pub group: Group,
    pub root: Member,
    actors: Vec<Actor>,
    pub addrs: BTreeMap<String, u32>,
    freed: BTreeSet<String>,
    rng: ChaCha8Rng,
}

fn expect_matches(expect: Option<Expect>, got: Expect) -> bool {
    expect.unwrap_or(Expect::Ok) == got
}

fn member_outcome<T>(r: &Result<T, MemberError>) -> Expect {
    match r {
        Ok(_) => Expect::Ok,
        Err(MemberError::Denied(_)) => Expect::Denied,
        Err(_) => Expect::Denied,
    }
}

pub fn perm_cell(p: Permission) -> &'static str {
    match (p.read, p.write) {
        (true, true) => "RW",
        (true, false) => "R",
        (false, true) => "W",
        (false, false) => "--",
    }
}

impl Session {
    /// Boots a group, mints the declared categories from root and spawns
    /// every principal that root parents.
    pub fn start(resolved: Resolved) -> Result<Session, HarnessError> {
        let group = Group::boot(MonitorConfig::default());
        let mut root = group.register(None, None).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        for (decl, want) in resolved.config.categories.iter().zip(&resolved.categories) {
            let got = root
                .create_category(decl.kind.into(), &decl.name)
                .map_err(|e| HarnessError::Runtime(e.to_string()))?;
            if got != *want {
                return Err(HarnessError::Runtime(format!("category {} minted as {got:?}", decl.name)));
            }
        }
        let actors = resolved
            .config
            .principals
            .iter()
            .map(|_| Actor { id: None, tx: None, rx: None, state: ActorState::Pending })
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(resolved.config.seed);
        let mut s = Session { resolved, group, root, actors, addrs: BTreeMap::new(), freed: BTreeSet::new(), rng };
        for i in 0..s.actors.len() {
            let parent = s.resolved.config.principals[i].parent.clone();
            if parent.as_deref().is_none_or(|p| p == ROOT) {
                let (label, own) = s.resolved.labels[i].clone();
                let entry = s.stage(i);
                let id = s
                    .root
                    .spawn(Some(label), Some(own), entry)
                    .map_err(|e| HarnessError::Runtime(format!("spawning {}: {e}", s.name(i))))?;
                s.activate(i, id);
            }
        }
        Ok(s)
    }

    pub fn names(&self) -> &CategoryNames {
        &self.resolved.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.resolved.config.principals[i].name
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.resolved.principal_index(name)
    }

    pub fn principal_id(&self, i: usize) -> Option<PrincipalId> {
        self.actors[i].id
    }

    pub fn is_live(&self, i: usize) -> bool {
        self.actors[i].state == ActorState::Live
    }

    fn stage(&mut self, i: usize) -> impl FnOnce(Member) -> i32 + Send + 'static {
        let (tx, rx) = channel();
        let (otx, orx) = channel();
        self.actors[i].tx = Some(tx);
        self.actors[i].rx = Some(orx);
        actor_entry(rx, otx)
    }

    fn activate(&mut self, i: usize, id: PrincipalId) {
        self.actors[i].id = Some(id);
        self.actors[i].state = ActorState::Live;
    }

    /// Runs `f` on principal `i`'s thread and waits for the result.
    pub fn with<T: Send + 'static>(&mut self, i: usize, f: impl FnOnce(&mut Member) -> T + Send + 'static) -> T {
        let a = &self.actors[i];
        assert_eq!(a.state, ActorState::Live, "principal {} is not running", self.name(i));
        let job: Job = Box::new(move |m| Box::new(f(m)));
        a.tx.as_ref().unwrap().send(Msg::Run(job)).expect("actor thread alive");
        let out = a.rx.as_ref().unwrap().recv().expect("actor thread alive");
        *out.downcast::<T>().expect("job result type")
    }

    fn object(&self, name: &str) -> (usize, Option<u32>) {
        let i = self.resolved.object_index(name).expect("validated object");
        (i, self.addrs.get(name).copied().filter(|_| !self.freed.contains(name)))
    }

    fn run_step(&mut self, i: usize, step: &Step) -> (String, bool) {
        match step {
            Step::Alloc { object, zeroed, expect } => {
                let (oi, _) = self.object(object);
                let size = self.resolved.config.objects[oi].size;
                let label = self.resolved.object_labels[oi].clone();
                let zeroed = *zeroed;
                let r = self.with(i, move |m| if zeroed { m.calloc(1, size, &label) } else { m.malloc(size, &label) });
                let ok = expect_matches(*expect, member_outcome(&r));
                match r {
                    Ok(addr) => {
                        self.addrs.insert(object.clone(), addr);
                        self.freed.remove(object);
                        (format!("addr={addr:#x}"), ok)
                    }
                    Err(e) => (e.to_string(), ok),
                }
            }
            Step::Free { object, expect } => {
                let Some(addr) = self.object(object).1 else {
                    return ("object not allocated".into(), false);
                };
                let r = self.with(i, move |m| m.free(addr));
                let ok = expect_matches(*expect, member_outcome(&r));
                match r {
                    Ok(()) => {
                        self.freed.insert(object.clone());
                        ("freed".into(), ok)
                    }
                    Err(e) => (e.to_string(), ok),
                }
            }
            Step::Read { object, expect } => {
                let (oi, addr) = self.object(object);
                let Some(addr) = addr else {
                    return ("object not allocated".into(), false);
                };
                let size = self.resolved.config.objects[oi].size;
                let r = self.with(i, move |m| m.read(addr, size));
                access_outcome(r.map(|bytes| preview(&bytes)), *expect)
            }
            Step::Write { object, data, expect } => {
                let (oi, addr) = self.object(object);
                let Some(addr) = addr else {
                    return ("object not allocated".into(), false);
                };
                let size = self.resolved.config.objects[oi].size as usize;
                let bytes: Vec<u8> = match data {
                    Some(d) => d.as_bytes().iter().copied().take(size).collect(),
                    None => (0..size.min(64)).map(|_| self.rng.gen_range(b'a'..=b'z')).collect(),
                };
                let n = bytes.len();
                let r = self.with(i, move |m| m.write(addr, &bytes));
                access_outcome(r.map(|()| format!("{n} bytes")), *expect)
            }
            Step::Query { what, object, target } => {
                let addr = object.as_ref().map(|o| self.object(o).1);
                if addr == Some(None) {
                    return ("object not allocated".into(), false);
                }
                let addr = addr.flatten();
                let target_id = match target.as_deref() {
                    None => self.actors[i].id.unwrap(),
                    Some(ROOT) => self.root.self_id(),
                    Some(t) => match self.index(t).and_then(|ti| self.actors[ti].id) {
                        Some(id) => id,
                        None => return (format!("{t} is not running"), false),
                    },
                };
                let names = self.resolved.names.clone();
                let what = *what;
                self.with(i, move |m| {
                    let r = match what {
                        QueryKind::Label => m.get_label().map(|l| names.format_label(&l)),
                        QueryKind::Ownership => m.get_ownership().map(|o| names.format_ownership(&o)),
                        QueryKind::MemLabel => m.get_mem_label(addr.unwrap()).map(|l| names.format_object_label(&l)),
                        QueryKind::Privilege => m.get_privilege(target_id, addr.unwrap()).map(|p| perm_cell(p).to_string()),
                    };
                    match r {
                        Ok(s) => (s, true),
                        Err(e) => (e.to_string(), false),
                    }
                })
            }
            Step::Spawn { principal } => {
                let ci = self.index(principal).expect("validated child");
                let (label, own) = self.resolved.labels[ci].clone();
                let entry = self.stage(ci);
                let r = self.with(i, move |m| m.spawn(Some(label), Some(own), entry));
                match r {
                    Ok(id) => {
                        self.activate(ci, id);
                        (format!("principal={id}"), true)
                    }
                    Err(e) => {
                        self.actors[ci].state = ActorState::Gone;
                        (e.to_string(), false)
                    }
                }
            }
            Step::Join { principal } => {
                let ci = self.index(principal).expect("validated child");
                let Some(child) = self.actors[ci].id else {
                    return ("child never started".into(), false);
                };
                self.stop_actor(ci, 0);
                let r = self.with(i, move |m| m.join(child));
                match r {
                    Ok(status) => (status.to_string(), true),
                    Err(e) => (e.to_string(), false),
                }
            }
            Step::Barrier => ("released".into(), true),
        }
    }

    fn stop_actor(&mut self, i: usize, code: i32) {
        if self.actors[i].state == ActorState::Live {
            let _ = self.actors[i].tx.as_ref().unwrap().send(Msg::Exit(code));
            self.actors[i].state = ActorState::Gone;
        }
    }

    fn terminated(&self, i: usize) -> bool {
        self.actors[i].id.is_some_and(|id| self.group.mmu().termination(id).is_some())
    }

    /// Executes every script to completion.
    pub fn run_scripts(&mut self) -> Result<Vec<StepRecord>, HarnessError> {
        let n = self.actors.len();
        let scripts: Vec<Vec<Step>> = self.resolved.config.principals.iter().map(|p| p.script.clone()).collect();
        let mut pc = vec![0usize; n];
        let mut records = Vec::new();
        loop {
            let active = |s: &Session, pc: &[usize], i: usize| {
                s.actors[i].state == ActorState::Live && !s.terminated(i) && pc[i] < scripts[i].len()
            };
            let running: Vec<usize> = (0..n).filter(|&i| active(self, &pc, i)).collect();
            if running.is_empty() {
                break;
            }
            let mut progressed = false;
            for &i in &running {
                if !active(self, &pc, i) {
                    continue;
                }
                let step = &scripts[i][pc[i]];
                match step {
                    Step::Barrier => continue,
                    Step::Join { principal } => {
                        let ci = self.index(principal).unwrap();
                        let child_busy = self.actors[ci].state == ActorState::Live
                            && !self.terminated(ci)
                            && pc[ci] < scripts[ci].len();
                        if child_busy || self.actors[ci].state == ActorState::Pending {
                            continue;
                        }
                    }
                    _ => {}
                }
                let (outcome, ok) = self.run_step(i, step);
                records.push(StepRecord {
                    principal: self.name(i).to_string(),
                    index: pc[i],
                    step: step.describe(),
                    outcome,
                    ok,
                });
                pc[i] += 1;
                progressed = true;
            }
            if !progressed {
                let all_at_barrier = running.iter().all(|&i| scripts[i][pc[i]] == Step::Barrier);
                if all_at_barrier {
                    for &i in &running {
                        records.push(StepRecord {
                            principal: self.name(i).to_string(),
                            index: pc[i],
                            step: "barrier".into(),
                            outcome: "released".into(),
                            ok: true,
                        });
                        pc[i] += 1;
                    }
                } else {
                    return Err(HarnessError::ConfigInvalid("scripts deadlock (join or barrier never satisfiable)".into()));
                }
            }
        }
        for i in 0..n {
            if self.actors[i].state == ActorState::Live && self.terminated(i) && pc[i] < scripts[i].len() {
                records.push(StepRecord {
                    principal: self.name(i).to_string(),
                    index: pc[i],
                    step: scripts[i][pc[i]].describe(),
                    outcome: "skipped: principal terminated".into(),
                    ok: false,
                });
            }
        }
        Ok(records)
    }

    /// Fills the access matrix by trying a mediated read of each object and a
    /// one-byte mediated write, with faults handled instead of fatal.
    pub fn probe(&mut self) -> BTreeMap<String, BTreeMap<String, String>> {
        let mut matrix = BTreeMap::new();
        for i in 0..self.actors.len() {
            let mut row = BTreeMap::new();
            let live = self.is_live(i) && !self.terminated(i);
            for o in self.resolved.config.objects.clone() {
                let cell = match (live, self.object(&o.name).1) {
                    (false, _) => "exited".to_string(),
                    (true, None) => "unallocated".to_string(),
                    (true, Some(addr)) => {
                        let size = o.size;
                        self.with(i, move |m| {
                            m.set_fault_policy(FaultPolicy::Handle);
                            let read = m.read(addr, size);
                            let byte = read.as_ref().map(|b| b[0]).unwrap_or(0);
                            let write = m.write(addr, &[byte]);
                            m.set_fault_policy(FaultPolicy::Terminate);
                            perm_cell(Permission { read: read.is_ok(), write: write.is_ok() }).to_string()
                        })
                    }
                };
                row.insert(o.name.clone(), cell);
            }
            matrix.insert(self.name(i).to_string(), row);
        }
        matrix
    }

    /// Latency stats of every live member plus root.
    pub fn latency(&mut self) -> BTreeMap<String, Latency> {
        let mut all: BTreeMap<&'static str, LatencyStats> = self.root.latency().clone();
        for i in 0..self.actors.len() {
            if self.is_live(i) {
                let stats = self.with(i, |m| m.latency().clone());
                for (op, s) in stats {
                    let e = all.entry(op).or_default();
                    merge(e, &s);
                }
            }
        }
        all.into_iter().map(|(k, v)| (k.to_string(), Latency::from(&v))).collect()
    }

    pub fn counters(&self) -> Counters {
        self.group.inspect(|m| Counters::from_monitor(m))
    }

    pub fn audit(&self) -> (Vec<String>, String) {
        self.group.inspect(|m| (m.audit_lines().to_vec(), m.audit_digest()))
    }

    pub fn layout(&self) -> String {
        self.group.inspect(|m| m.dump_layout())
    }

    /// Stops every member; root joins the ones it spawned.
    pub fn finish(&mut self) -> Vec<(String, ExitStatus)> {
        let mut out = Vec::new();
        for i in (0..self.actors.len()).rev() {
            self.stop_actor(i, 0);
        }
        for i in 0..self.actors.len() {
            let parent = self.resolved.config.principals[i].parent.clone();
            if parent.as_deref().is_none_or(|p| p == ROOT) {
                if let Some(id) = self.actors[i].id {
                    if let Ok(status) = self.root.join(id) {
                        out.push((self.name(i).to_string(), status));
                    }
                }
            }
        }
        out
    }
}

fn merge(into: &mut LatencyStats, s: &LatencyStats) {
    if s.count == 0 {
        return;
    }
    if into.count == 0 || s.min < into.min {
        into.min = s.min;
    }
    into.max = into.max.max(s.max);
    into.count += s.count;
    into.total += s.total;
}

fn preview(bytes: &[u8]) -> String {
    let text: String = bytes
        .iter()
        .take_while(|&&b| b != 0)
        .take(32)
        .map(|&b| if b.is_ascii_graphic() || b == b' ' { b as char } else { '.' })
        .collect();
    format!("{:?}", text)
}

fn access_outcome(r: Result<String, AccessError>, expect: Option<Expect>) -> (String, bool) {
    match r {
        Ok(s) => (s, expect_matches(expect, Expect::Ok)),
        Err(AccessError::Fault(ev)) => (ev.to_string(), expect_matches(expect, Expect::Fault)),
        Err(e @ AccessError::Terminated(_)) => (e.to_string(), false),
    }
}
