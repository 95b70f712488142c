//! Label algebra for principals and data objects.
//!
//! A [`Label`] is a set of secrecy (`*_r`) and integrity (`*_w`) categories.
//! Principals additionally carry an [`Ownership`] set whose categories they
//! may bypass. Data objects may also be [`ObjectLabel::Unlabeled`], which is a
//! distinct value from the empty label and grants everybody read and write.
//!
//! All decision procedures here are pure functions over immutable values.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CategoryKind {
    Secrecy,
    Integrity,
}

impl CategoryKind {
    /// Suffix used in the textual form: `r` for secrecy, `w` for integrity.
    pub fn suffix(self) -> char {
        match self {
            CategoryKind::Secrecy => 'r',
            CategoryKind::Integrity => 'w',
        }
    }

    pub fn from_suffix(c: char) -> Option<Self> {
        match c {
            'r' => Some(CategoryKind::Secrecy),
            'w' => Some(CategoryKind::Integrity),
            _ => None,
        }
    }
}

/// An atomic protection unit. Ordering follows the id, i.e. creation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Category {
    pub id: u64,
    pub kind: CategoryKind,
}

impl Category {
    pub fn new(id: u64, kind: CategoryKind) -> Self {
        Category { id, kind }
    }

    pub fn is_secrecy(&self) -> bool {
        self.kind == CategoryKind::Secrecy
    }

    pub fn is_integrity(&self) -> bool {
        self.kind == CategoryKind::Integrity
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LabelError {
    #[error("category counter exhausted")]
    CounterExhausted,
    #[error("malformed label text: {0}")]
    Syntax(String),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("duplicate category name `{0}`")]
    DuplicateName(String),
}

/// Group-scoped source of fresh category ids. Ids start at 1 and strictly
/// increase.
#[derive(Debug, Clone)]
pub struct CategoryCounter {
    next: u64,
}

impl Default for CategoryCounter {
    fn default() -> Self {
        CategoryCounter { next: 1 }
    }
}

impl CategoryCounter {
    pub fn starting_at(next: u64) -> Self {
        CategoryCounter { next }
    }

    pub fn peek(&self) -> u64 {
        self.next
    }

    /// Mints a category with a fresh id. Recording the creator as owner is
    /// the monitor's job.
    pub fn mint(&mut self, kind: CategoryKind) -> Result<Category, LabelError> {
        if self.next == u64::MAX {
            return Err(LabelError::CounterExhausted);
        }
        let id = self.next;
        self.next += 1;
        Ok(Category { id, kind })
    }
}

macro_rules! category_set {
    ($name:ident) => {
        #[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(BTreeSet<Category>);

        impl $name {
            pub fn new() -> Self {
                $name(BTreeSet::new())
            }

            pub fn contains(&self, c: &Category) -> bool {
                self.0.contains(c)
            }

            pub fn iter(&self) -> impl Iterator<Item = &Category> + '_ {
                self.0.iter()
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn categories(&self) -> &BTreeSet<Category> {
                &self.0
            }

            pub fn is_subset(&self, other: &Self) -> bool {
                self.0.is_subset(&other.0)
            }
        }

        impl FromIterator<Category> for $name {
            fn from_iter<I: IntoIterator<Item = Category>>(iter: I) -> Self {
                $name(iter.into_iter().collect())
            }
        }

        impl From<BTreeSet<Category>> for $name {
            fn from(set: BTreeSet<Category>) -> Self {
                $name(set)
            }
        }
    };
}

category_set!(Label);
category_set!(Ownership);

impl Label {
    /// `self - owned`.
    pub fn without(&self, owned: &Ownership) -> Label {
        Label(self.0.difference(&owned.0).copied().collect())
    }
}

impl Ownership {
    pub(crate) fn insert(&mut self, c: Category) -> bool {
        self.0.insert(c)
    }
}

/// Label attached to a data object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectLabel {
    /// Allocated without a label: read-writable by every member.
    Unlabeled,
    Labeled(Label),
}

impl ObjectLabel {
    pub fn as_label(&self) -> Option<&Label> {
        match self {
            ObjectLabel::Unlabeled => None,
            ObjectLabel::Labeled(l) => Some(l),
        }
    }

    pub fn categories(&self) -> impl Iterator<Item = &Category> + '_ {
        self.as_label().into_iter().flat_map(|l| l.iter())
    }
}

impl From<Label> for ObjectLabel {
    fn from(l: Label) -> Self {
        ObjectLabel::Labeled(l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Permission {
    pub read: bool,
    pub write: bool,
}

impl Permission {
    pub const NONE: Permission = Permission { read: false, write: false };
    pub const R: Permission = Permission { read: true, write: false };
    pub const W: Permission = Permission { read: false, write: true };
    pub const RW: Permission = Permission { read: true, write: true };

    pub fn allows(&self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.read,
            AccessKind::Write => self.write,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match (self.read, self.write) {
            (true, true) => "RW",
            (true, false) => "R",
            (false, true) => "W",
            (false, false) => "--",
        }
    }

    pub fn parse(s: &str) -> Option<Permission> {
        match s {
            "RW" => Some(Permission::RW),
            "R" => Some(Permission::R),
            "W" => Some(Permission::W),
            "--" => Some(Permission::NONE),
            _ => None,
        }
    }

    pub fn bits(&self) -> u8 {
        (self.read as u8) | ((self.write as u8) << 1)
    }

    pub fn from_bits(bits: u8) -> Option<Permission> {
        if bits > 3 {
            return None;
        }
        Some(Permission { read: bits & 1 != 0, write: bits & 2 != 0 })
    }
}

impl fmt::Display for Permission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
}

impl AccessKind {
    pub fn as_char(self) -> char {
        match self {
            AccessKind::Read => 'r',
            AccessKind::Write => 'w',
        }
    }
}

/// `a ⊑ b`: every secrecy category of `a` is in `b` and every integrity
/// category of `b` is in `a`.
pub fn can_flow(a: &Label, b: &Label) -> bool {
    a.iter().filter(|c| c.is_secrecy()).all(|c| b.contains(c))
        && b.iter().filter(|c| c.is_integrity()).all(|c| a.contains(c))
}

/// `a ⊑_O b`, i.e. `a - O ⊑ b - O`.
pub fn can_flow_owned(a: &Label, b: &Label, owned: &Ownership) -> bool {
    a.iter()
        .filter(|c| c.is_secrecy() && !owned.contains(c))
        .all(|c| b.contains(c))
        && b.iter()
            .filter(|c| c.is_integrity() && !owned.contains(c))
            .all(|c| a.contains(c))
}

/// Access a thread with `(thread_label, owned)` has on an object labeled
/// `object`.
pub fn perms_for(thread_label: &Label, owned: &Ownership, object: &ObjectLabel) -> Permission {
    match object {
        ObjectLabel::Unlabeled => Permission::RW,
        ObjectLabel::Labeled(obj) => Permission {
            read: can_flow_owned(obj, thread_label, owned),
            write: can_flow_owned(thread_label, obj, owned),
        },
    }
}

/// Thread creation: the child label must be reachable from the parent's and
/// the child's ownership must be a subset of the parent's.
pub fn check_create(parent_label: &Label, parent_owned: &Ownership, label: &Label, owned: &Ownership) -> bool {
    can_flow_owned(parent_label, label, parent_owned) && owned.is_subset(parent_owned)
}

/// Memory allocation is a flow from the thread to the new object.
pub fn check_alloc(thread_label: &Label, owned: &Ownership, object: &ObjectLabel) -> bool {
    match object {
        ObjectLabel::Unlabeled => true,
        ObjectLabel::Labeled(l) => can_flow_owned(thread_label, l, owned),
    }
}

/// Bidirectional map between categories and their base names.
///
/// The textual form of a category is `<base>_<r|w>`, so one base name may be
/// in use twice: once per kind.
#[derive(Debug, Clone, Default)]
pub struct CategoryNames {
    by_name: HashMap<(String, CategoryKind), Category>,
    by_cat: BTreeMap<Category, String>,
}

impl CategoryNames {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, cat: Category) -> Result<(), LabelError> {
        let key = (name.to_string(), cat.kind);
        if self.by_name.contains_key(&key) || self.by_cat.contains_key(&cat) {
            return Err(LabelError::DuplicateName(format!("{}_{}", name, cat.kind.suffix())));
        }
        self.by_name.insert(key, cat);
        self.by_cat.insert(cat, name.to_string());
        Ok(())
    }

    pub fn lookup(&self, text: &str) -> Option<Category> {
        let (base, kind) = split_category(text)?;
        self.by_name.get(&(base.to_string(), kind)).copied()
    }

    pub fn name_of(&self, cat: &Category) -> String {
        match self.by_cat.get(cat) {
            Some(base) => format!("{}_{}", base, cat.kind.suffix()),
            None => format!("c{}_{}", cat.id, cat.kind.suffix()),
        }
    }

    pub fn len(&self) -> usize {
        self.by_cat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_cat.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Category, &String)> + '_ {
        self.by_cat.iter()
    }

    pub fn format_set<'a>(&self, cats: impl Iterator<Item = &'a Category>) -> String {
        let parts: Vec<String> = cats.map(|c| self.name_of(c)).collect();
        format!("{{{}}}", parts.join(", "))
    }

    pub fn format_label(&self, label: &Label) -> String {
        self.format_set(label.iter())
    }

    pub fn format_ownership(&self, own: &Ownership) -> String {
        self.format_set(own.iter())
    }

    pub fn format_object_label(&self, label: &ObjectLabel) -> String {
        match label {
            ObjectLabel::Unlabeled => "null".to_string(),
            ObjectLabel::Labeled(l) => self.format_label(l),
        }
    }

    /// Parses `{a_r, b_w}` into a set of known categories.
    pub fn parse_set(&self, text: &str) -> Result<BTreeSet<Category>, LabelError> {
        let t = text.trim();
        let inner = t
            .strip_prefix('{')
            .and_then(|s| s.strip_suffix('}'))
            .ok_or_else(|| LabelError::Syntax(t.to_string()))?;
        let mut out = BTreeSet::new();
        for part in inner.split(',') {
            let part = part.trim();
            if part.is_empty() {
                if inner.trim().is_empty() {
                    continue;
                }
                return Err(LabelError::Syntax(t.to_string()));
            }
            if split_category(part).is_none() {
                return Err(LabelError::Syntax(part.to_string()));
            }
            let cat = self
                .lookup(part)
                .ok_or_else(|| LabelError::UnknownCategory(part.to_string()))?;
            out.insert(cat);
        }
        Ok(out)
    }

    pub fn parse_label(&self, text: &str) -> Result<Label, LabelError> {
        self.parse_set(text).map(Label::from)
    }

    pub fn parse_ownership(&self, text: &str) -> Result<Ownership, LabelError> {
        self.parse_set(text).map(Ownership::from)
    }

    /// Like [`parse_label`](Self::parse_label) but accepts `null` for
    /// [`ObjectLabel::Unlabeled`].
    pub fn parse_object_label(&self, text: &str) -> Result<ObjectLabel, LabelError> {
        if text.trim() == "null" {
            Ok(ObjectLabel::Unlabeled)
        } else {
            self.parse_label(text).map(ObjectLabel::Labeled)
        }
    }
}

fn split_category(text: &str) -> Option<(&str, CategoryKind)> {
    let (base, suffix) = text.rsplit_once('_')?;
    if base.is_empty() {
        return None;
    }
    let mut chars = suffix.chars();
    let kind = CategoryKind::from_suffix(chars.next()?)?;
    if chars.next().is_some() {
        return None;
    }
    Some((base, kind))
}
