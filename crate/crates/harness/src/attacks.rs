//! Five attacks against a running fixture. Each one gets a fresh group with
//! the fixture's scripts already executed, so the victim object exists and
//! holds data.

use arbiter_core::label::{ObjectLabel, Permission};
use arbiter_core::monitor::MonitorConfig;
use arbiter_core::protection::{AccessError, FaultPolicy, PageRange, ProtectionError};
use arbiter_core::rpc::{Reply, Request};
use arbiter_core::{Group, PrincipalId};

use crate::config::{self, Resolved};
use crate::report::{AttackReport, AttackResult, Verdict};
use crate::scenario::Session;
use crate::HarnessError;

/// Who attacks whom in a bundled scenario.
#[derive(Debug, Clone, Copy)]
pub struct Cast {
    pub attacker: &'static str,
    pub victim: &'static str,
    pub deputy: &'static str,
    /// An object the attacker may legitimately read; the deputy must serve
    /// requests for it.
    pub control: &'static str,
}

pub fn cast_for(scenario: &str) -> Option<Cast> {
    match scenario {
        "calendar" => Some(Cast { attacker: "bob", victim: "alice_cal", deputy: "scheduler", control: "result" }),
        "kvcache" => Some(Cast { attacker: "B", victim: "a_data", deputy: "A", control: "cq_item" }),
        _ => None,
    }
}

struct Stage {
    s: Session,
    attacker: usize,
    attacker_id: PrincipalId,
    deputy: usize,
    victim_addr: u32,
    victim_size: u32,
    control_addr: u32,
    secret: Vec<u8>,
}

fn stage(resolved: &Resolved, cast: Cast) -> Result<Stage, HarnessError> {
    let mut s = Session::start(resolved.clone())?;
    s.run_scripts()?;
    let attacker = s.index(cast.attacker).ok_or_else(|| HarnessError::Runtime("attacker missing".into()))?;
    let deputy = s.index(cast.deputy).ok_or_else(|| HarnessError::Runtime("deputy missing".into()))?;
    let victim_addr = *s.addrs.get(cast.victim).ok_or_else(|| HarnessError::Runtime("victim not allocated".into()))?;
    let control_addr = *s.addrs.get(cast.control).ok_or_else(|| HarnessError::Runtime("control not allocated".into()))?;
    let victim_size = resolved.config.objects[resolved.object_index(cast.victim).unwrap()].size;
    let secret = s.group.mmu().raw_read(PrincipalId::ARBITER, victim_addr, victim_size).unwrap();
    let attacker_id = s.principal_id(attacker).unwrap();
    Ok(Stage { s, attacker, attacker_id, deputy, victim_addr, victim_size, control_addr, secret })
}

fn verdict(blocked: bool, evidence: String, id: u8, name: &str) -> AttackResult {
    AttackResult {
        id,
        name: name.to_string(),
        verdict: if blocked { Verdict::Blocked } else { Verdict::NotBlocked },
        evidence,
    }
}

fn direct_read(st: &mut Stage) -> AttackResult {
    let (addr, len) = (st.victim_addr, st.victim_size);
    let r = st.s.with(st.attacker, move |m| m.read(addr, len));
    let logged = st.s.group.mmu().fault_log().iter().any(|f| f.principal == st.attacker_id && f.addr == addr);
    match r {
        Err(AccessError::Fault(ev)) if logged => verdict(true, ev.to_string(), 1, "direct read"),
        Err(e) => verdict(false, format!("unexpected error {e}"), 1, "direct read"),
        Ok(bytes) => verdict(bytes != st.secret, format!("read returned {} bytes", bytes.len()), 1, "direct read"),
    }
}

fn mprotect(st: &mut Stage) -> AttackResult {
    let mmu = st.s.group.mmu().clone();
    let before = mmu.snapshot(st.attacker_id).unwrap();
    let range = PageRange { first: st.victim_addr / 4096, count: 1 };
    let addr = st.victim_addr;
    let (r, read) = st.s.with(st.attacker, move |m| {
        let r = m.mprotect(range, Permission::RW);
        m.set_fault_policy(FaultPolicy::Handle);
        let read = m.read(addr, 1);
        (r, read)
    });
    let unchanged = mmu.snapshot(st.attacker_id).unwrap() == before;
    let blocked = r == Err(ProtectionError::NotMonitor) && unchanged && read.is_err();
    let ev = format!(
        "mprotect -> {}; table unchanged: {unchanged}; read after: {}",
        r.map(|_| "ok".to_string()).unwrap_or_else(|e| e.to_string()),
        if read.is_err() { "fault" } else { "ok" }
    );
    verdict(blocked, ev, 2, "mprotect on the segment")
}

fn free_and_remap(st: &mut Stage, victim_label: ObjectLabel) -> AttackResult {
    let digest = st.s.group.inspect(|m| m.state_digest());
    let (addr, size) = (st.victim_addr, st.victim_size);
    let (free, realloc) = st.s.with(st.attacker, move |m| (m.free(addr), m.realloc(addr, size)));
    let after = st.s.group.inspect(|m| m.state_digest());
    let label = st.s.root.get_mem_label(addr);
    let blocked = free.as_ref().is_err_and(|e| e.is_denied())
        && realloc.as_ref().is_err_and(|e| e.is_denied())
        && digest == after
        && label.as_ref() == Ok(&victim_label);
    let ev = format!(
        "free -> {}; realloc -> {}; state unchanged: {}",
        show(free.map(|_| ())),
        show(realloc.map(|_| ())),
        digest == after
    );
    verdict(blocked, ev, 3, "free then remap")
}

fn reregister(st: &mut Stage) -> AttackResult {
    let before = st.s.group.inspect(|m| m.registry().principals().count());
    let mut conn = match st.s.group.connect() {
        Ok(c) => c,
        Err(e) => return verdict(true, format!("connect refused: {e}"), 4, "re-register from a new group"),
    };
    let reply = conn.call(Request::Register { label: None, ownership: None });
    drop(conn);
    let after = st.s.group.inspect(|m| m.registry().principals().count());
    let denied = matches!(reply, Ok(Reply::Denied(_)));

    // the attacker's own group starts from an empty, separately backed segment
    let other = Group::boot(MonitorConfig::default());
    let seen = match other.register(None, None) {
        Ok(mut m) => {
            m.set_fault_policy(FaultPolicy::Handle);
            let direct = m.read(st.victim_addr, st.victim_size);
            let mut same_addr = None;
            for _ in 0..4096 {
                match m.malloc(st.victim_size, &ObjectLabel::Unlabeled) {
                    Ok(a) if a >= st.victim_addr => {
                        same_addr = Some(a);
                        break;
                    }
                    Ok(_) => {}
                    Err(_) => break,
                }
            }
            let bytes = same_addr.filter(|&a| a == st.victim_addr).map(|a| m.read(a, st.victim_size));
            (direct.is_err(), bytes.and_then(|b| b.ok()))
        }
        Err(_) => (true, None),
    };
    other.shutdown();
    let leaked = seen.1.as_ref().is_some_and(|b| b == &st.secret);
    let blocked = denied && before == after && seen.0 && !leaked;
    let ev = format!(
        "register in old group -> {}; old registry {before}->{after}; new group: victim address {}, same-address bytes {}",
        match &reply {
            Ok(r) => format!("{:?}", r.status()),
            Err(e) => e.to_string(),
        },
        if seen.0 { "unmapped" } else { "readable" },
        match &seen.1 {
            Some(b) if b.iter().all(|&x| x == 0) => "zero",
            Some(b) if b == &st.secret => "victim data",
            Some(_) => "other",
            None => "not reached",
        }
    );
    verdict(blocked, ev, 4, "re-register from a new group")
}

fn show(r: Result<(), arbiter_core::runtime::MemberError>) -> String {
    match r {
        Ok(()) => "ok".to_string(),
        Err(e) => e.to_string(),
    }
}

/// The attacker hands the deputy a reference and asks for its contents.
fn confused_deputy(st: &mut Stage) -> AttackResult {
    let requester = st.attacker_id;
    let serve = move |m: &mut arbiter_core::Member, addr: u32, len: u32| -> Result<Vec<u8>, String> {
        let p = m.get_privilege(requester, addr).map_err(|e| e.to_string())?;
        if !p.read {
            return Err(format!("refused: requester has {p} on {addr:#x}"));
        }
        m.read(addr, len).map_err(|e| e.to_string())
    };
    let (v_addr, v_len, c_addr) = (st.victim_addr, st.victim_size, st.control_addr);
    let (forged, control) = st.s.with(st.deputy, move |m| (serve(m, v_addr, v_len), serve(m, c_addr, 1)));
    let blocked = forged.is_err() && control.is_ok();
    let ev = format!(
        "forged reference -> {}; legitimate reference -> {}",
        forged.err().unwrap_or_else(|| "served".into()),
        if control.is_ok() { "served" } else { "refused" }
    );
    verdict(blocked, ev, 5, "confused deputy")
}

pub fn run_attacks(scenario: &str) -> Result<AttackReport, HarnessError> {
    let text = config::bundled(scenario).ok_or_else(|| HarnessError::UnknownScenario(scenario.to_string()))?;
    let cast = cast_for(scenario).unwrap();
    let resolved = config::load(text)?;
    let victim_label = resolved.object_labels[resolved.object_index(cast.victim).unwrap()].clone();

    let mut results = Vec::new();
    for id in 1..=5u8 {
        let mut st = stage(&resolved, cast)?;
        let r = match id {
            1 => direct_read(&mut st),
            2 => mprotect(&mut st),
            3 => free_and_remap(&mut st, victim_label.clone()),
            4 => reregister(&mut st),
            _ => confused_deputy(&mut st),
        };
        st.s.finish();
        results.push(r);
    }
    Ok(AttackReport {
        scenario: scenario.to_string(),
        attacker: cast.attacker.to_string(),
        victim: cast.victim.to_string(),
        deputy: cast.deputy.to_string(),
        results,
    })
}
