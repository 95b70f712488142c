//! Exhaustive comparison over a four-category universe. Sets are 4-bit masks:
//! bits 0-1 are secrecy categories, bits 2-3 integrity categories.

use std::time::{Duration, Instant};

use arbiter_core::label::{check_alloc, check_create, perms_for, Category, CategoryKind, Label, ObjectLabel, Ownership};

use crate::Outcome;

const SECRECY: u8 = 0b0011;
const INTEGRITY: u8 = 0b1100;

fn cat(bit: u8) -> Category {
    let kind = if SECRECY & (1 << bit) != 0 { CategoryKind::Secrecy } else { CategoryKind::Integrity };
    Category::new(10 + bit as u64, kind)
}

fn cats(mask: u8) -> impl Iterator<Item = Category> {
    (0..4u8).filter(move |b| mask & (1 << b) != 0).map(cat)
}

fn label(mask: u8) -> Label {
    cats(mask).collect()
}

fn own(mask: u8) -> Ownership {
    cats(mask).collect()
}

/// Secrecy may only grow and integrity only shrink along a flow.
fn flows(a: u8, b: u8) -> bool {
    (a & SECRECY) & !b == 0 && (b & INTEGRITY) & !a == 0
}

fn flows_owned(a: u8, b: u8, o: u8) -> bool {
    flows(a & !o, b & !o)
}

pub fn run() -> Outcome {
    let t = Instant::now();
    let labels: Vec<Label> = (0..16).map(label).collect();
    let owns: Vec<Ownership> = (0..16).map(own).collect();
    let objects: Vec<ObjectLabel> = (0..16).map(|m| ObjectLabel::Labeled(label(m))).collect();
    let mut mismatches = Vec::new();
    let (mut perm_cases, mut create_cases, mut alloc_cases) = (0, 0, 0);

    for lt in 0..16u8 {
        for ot in 0..16u8 {
            let (l, o) = (&labels[lt as usize], &owns[ot as usize]);
            for la in 0..16u8 {
                let obj = &objects[la as usize];
                perm_cases += 1;
                let p = perms_for(l, o, obj);
                let want = (flows_owned(la, lt, ot), flows_owned(lt, la, ot));
                if (p.read, p.write) != want {
                    mismatches.push(format!("perms_for({lt:04b},{ot:04b},{la:04b}) = {p}"));
                }
                alloc_cases += 1;
                if check_alloc(l, o, obj) != flows_owned(lt, la, ot) {
                    mismatches.push(format!("check_alloc({lt:04b},{ot:04b},{la:04b})"));
                }
                for oc in 0..16u8 {
                    create_cases += 1;
                    let want = flows_owned(lt, la, ot) && oc & !ot == 0;
                    if check_create(l, o, &labels[la as usize], &owns[oc as usize]) != want {
                        mismatches.push(format!("check_create({lt:04b},{ot:04b},{la:04b},{oc:04b})"));
                    }
                }
            }
            // unlabeled objects are open to everybody and allocatable by anyone
            perm_cases += 1;
            alloc_cases += 1;
            let p = perms_for(l, o, &ObjectLabel::Unlabeled);
            if !(p.read && p.write) {
                mismatches.push(format!("perms_for({lt:04b},{ot:04b},unlabeled) = {p}"));
            }
            if !check_alloc(l, o, &ObjectLabel::Unlabeled) {
                mismatches.push(format!("check_alloc({lt:04b},{ot:04b},unlabeled)"));
            }
        }
    }
    let elapsed = t.elapsed();
    if !mismatches.is_empty() {
        let n = mismatches.len();
        mismatches.truncate(8);
        return Err(format!("{n} mismatches, first: {}", mismatches.join(", ")));
    }
    if elapsed >= Duration::from_secs(1) {
        return Err(format!("took {:.3}s", elapsed.as_secs_f64()));
    }
    Ok(format!(
        "0 mismatches over {perm_cases} perms_for, {create_cases} check_create, {alloc_cases} check_alloc cases in {:.3}s",
        elapsed.as_secs_f64()
    ))
}
