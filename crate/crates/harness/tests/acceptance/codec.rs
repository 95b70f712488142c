//! Decoder robustness on arbitrary input and encode/decode identity on
//! generated messages.

use arbiter_core::label::{AccessKind, Category, CategoryKind, Label, ObjectLabel, Ownership, Permission};
use arbiter_core::protection::{Disposition, FaultEvent};
use arbiter_core::rpc::{
    decode_request, decode_response, encode_request, encode_response, OkBody, Opcode, Reply, Request, RequestFrame,
    ResponseFrame,
};
use arbiter_core::{ExitStatus, PrincipalId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const RANDOM_INPUTS: usize = 1_000_000;
const ROUND_TRIPS: usize = 100_000;

fn category(r: &mut ChaCha8Rng) -> Category {
    let kind = if r.gen() { CategoryKind::Secrecy } else { CategoryKind::Integrity };
    let id = if r.gen_bool(0.5) { r.gen_range(1..32) } else { r.gen() };
    Category::new(id, kind)
}

fn cats<T: FromIterator<Category>>(r: &mut ChaCha8Rng) -> T {
    let n = r.gen_range(0..6);
    (0..n).map(|_| category(r)).collect()
}

fn object_label(r: &mut ChaCha8Rng) -> ObjectLabel {
    if r.gen_bool(0.2) {
        ObjectLabel::Unlabeled
    } else {
        ObjectLabel::Labeled(cats(r))
    }
}

fn text(r: &mut ChaCha8Rng) -> String {
    let n = r.gen_range(0..20);
    let mut s: String = (0..n).map(|_| b"abcxyz_/.0189"[r.gen_range(0..13)] as char).collect();
    if r.gen_bool(0.1) {
        s.push('é');
    }
    s
}

fn kind(r: &mut ChaCha8Rng) -> CategoryKind {
    if r.gen() {
        CategoryKind::Secrecy
    } else {
        CategoryKind::Integrity
    }
}

fn request(r: &mut ChaCha8Rng) -> Request {
    match r.gen_range(0..14) {
        0 => Request::Register {
            label: r.gen_bool(0.5).then(|| cats::<Label>(r)),
            ownership: r.gen_bool(0.5).then(|| cats::<Ownership>(r)),
        },
        1 => Request::Malloc { size: r.gen(), label: object_label(r) },
        2 => Request::Free { addr: r.gen() },
        3 => Request::Calloc { count: r.gen(), size: r.gen(), label: object_label(r) },
        4 => Request::Realloc { addr: r.gen(), size: r.gen() },
        5 => Request::Mmap { length: r.gen(), offset: r.gen(), label: object_label(r), path: text(r) },
        6 => Request::CreateCategory { kind: kind(r), name: text(r) },
        7 => Request::GetLabel,
        8 => Request::GetOwnership,
        9 => Request::GetMemLabel { addr: r.gen() },
        10 => Request::GetPrivilege { target: PrincipalId(r.gen()), addr: r.gen() },
        11 => Request::ThreadCreate {
            entry: r.gen(),
            label: r.gen_bool(0.5).then(|| cats::<Label>(r)),
            ownership: r.gen_bool(0.5).then(|| cats::<Ownership>(r)),
        },
        12 => Request::ThreadJoin { child: PrincipalId(r.gen()) },
        _ => Request::Null,
    }
}

fn ok_body(op: Opcode, r: &mut ChaCha8Rng) -> OkBody {
    match op {
        Opcode::Register | Opcode::ThrCreate => OkBody::Principal(PrincipalId(r.gen())),
        Opcode::Malloc | Opcode::Calloc | Opcode::Realloc | Opcode::Mmap => OkBody::Addr(r.gen()),
        Opcode::Free | Opcode::NullOp => OkBody::Empty,
        Opcode::CreateCat => OkBody::Category(category(r)),
        Opcode::GetLabel => OkBody::Label(cats(r)),
        Opcode::GetOwn => OkBody::Ownership(cats(r)),
        Opcode::GetMemLabel => OkBody::ObjectLabel(object_label(r)),
        Opcode::GetPriv => OkBody::Permission(Permission::from_bits(r.gen_range(0..4)).unwrap()),
        Opcode::ThrJoin => OkBody::Exit(if r.gen() {
            ExitStatus::Exited(r.gen())
        } else {
            ExitStatus::Terminated(FaultEvent {
                principal: PrincipalId(r.gen()),
                addr: r.gen(),
                kind: if r.gen() { AccessKind::Read } else { AccessKind::Write },
                disposition: if r.gen() { Disposition::Terminated } else { Disposition::Handled },
            })
        }),
    }
}

fn response(r: &mut ChaCha8Rng) -> ResponseFrame {
    let op = Opcode::ALL[r.gen_range(0..Opcode::ALL.len())];
    let reply = match r.gen_range(0..6) {
        0 => Reply::Denied(text(r)),
        1 => Reply::Malformed(text(r)),
        2 => Reply::Error(text(r)),
        _ => Reply::Ok(ok_body(op, r)),
    };
    ResponseFrame { opcode: op as u8, seq: r.gen(), reply }
}

fn request_frame(r: &mut ChaCha8Rng) -> RequestFrame {
    RequestFrame { seq: r.gen(), claim: r.gen_bool(0.3).then(|| PrincipalId(r.gen())), request: request(r) }
}

/// Pure noise, a plausible header over noise, or a mutated valid frame.
fn input(r: &mut ChaCha8Rng) -> Vec<u8> {
    let noise = |r: &mut ChaCha8Rng, n: usize| (0..n).map(|_| r.gen::<u8>()).collect::<Vec<u8>>();
    match r.gen_range(0..4) {
        0 => {
            let n = r.gen_range(0..64);
            noise(r, n)
        }
        1 => {
            let n = r.gen_range(0..48);
            let mut v = ((n + 5) as u32).to_le_bytes().to_vec();
            v.push(if r.gen_bool(0.8) { r.gen_range(0..16) } else { r.gen() });
            v.extend(noise(r, n + 4));
            v
        }
        2 => {
            let mut v = encode_request(&request_frame(r));
            for _ in 0..r.gen_range(1..4) {
                let i = r.gen_range(0..v.len());
                v[i] = r.gen();
            }
            v
        }
        _ => {
            let mut v = encode_response(&response(r));
            match r.gen_range(0..3) {
                0 => v.truncate(r.gen_range(0..v.len())),
                1 => v.extend(noise(r, 3)),
                _ => {
                    let i = r.gen_range(0..v.len());
                    v[i] ^= 0x80;
                }
            }
            v
        }
    }
}

pub fn run() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(0xc0dec);
    let (mut valid_req, mut valid_resp, mut malformed) = (0u64, 0u64, 0u64);
    for i in 0..RANDOM_INPUTS {
        let bytes = input(&mut r);
        let req = std::panic::catch_unwind(|| decode_request(&bytes)).map_err(|_| format!("input {i}: decode_request panicked on {bytes:02x?}"))?;
        match req {
            Ok(f) => {
                // an accepted frame must be exactly what its re-encoding says
                if encode_request(&f) != bytes {
                    return Err(format!("input {i}: accepted request does not re-encode to its bytes"));
                }
                valid_req += 1;
            }
            Err(_) => malformed += 1,
        }
        let resp = std::panic::catch_unwind(|| decode_response(&bytes)).map_err(|_| format!("input {i}: decode_response panicked on {bytes:02x?}"))?;
        if let Ok(f) = resp {
            if decode_response(&encode_response(&f)) != Ok(f) {
                return Err(format!("input {i}: accepted response does not round-trip"));
            }
            valid_resp += 1;
        }
    }
    for i in 0..ROUND_TRIPS {
        let f = request_frame(&mut r);
        let bytes = encode_request(&f);
        if decode_request(&bytes).as_ref() != Ok(&f) {
            return Err(format!("message {i}: request {f:?} did not round-trip"));
        }
        let g = response(&mut r);
        if decode_response(&encode_response(&g)).as_ref() != Ok(&g) {
            return Err(format!("message {i}: response {g:?} did not round-trip"));
        }
    }
    Ok(format!(
        "{RANDOM_INPUTS} inputs: {valid_req} valid requests, {valid_resp} valid responses, {malformed} request MALFORMED, no panics; {ROUND_TRIPS} request and response round trips"
    ))
}
