//! Scenario fixtures.
//!
//! A fixture declares categories, principals with their labels and scripts,
//! the shared objects, and the access matrix that mediated probing must
//! reproduce. Labels use the `{name_r, name_w}` text form.

use std::collections::{BTreeMap, BTreeSet};

use arbiter_core::label::{Category, CategoryKind, CategoryNames, Label, ObjectLabel, Ownership};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// Name of the implicit bootstrap principal that mints every category and
/// spawns the declared principals.
pub const ROOT: &str = "root";

pub const CALENDAR: &str = include_str!("../fixtures/calendar.json");
pub const KVCACHE: &str = include_str!("../fixtures/kvcache.json");

pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "calendar" => Some(CALENDAR),
        "kvcache" => Some(KVCACHE),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindDecl {
    Secrecy,
    Integrity,
}

impl From<KindDecl> for CategoryKind {
    fn from(k: KindDecl) -> Self {
        match k {
            KindDecl::Secrecy => CategoryKind::Secrecy,
            KindDecl::Integrity => CategoryKind::Integrity,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryDecl {
    pub name: String,
    pub kind: KindDecl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expect {
    Ok,
    Denied,
    Fault,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Label,
    Ownership,
    MemLabel,
    Privilege,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    Alloc {
        object: String,
        #[serde(default)]
        zeroed: bool,
        #[serde(default)]
        expect: Option<Expect>,
    },
    Free {
        object: String,
        #[serde(default)]
        expect: Option<Expect>,
    },
    Read {
        object: String,
        #[serde(default)]
        expect: Option<Expect>,
    },
    Write {
        object: String,
        /// Defaults to seeded pseudo-random bytes.
        #[serde(default)]
        data: Option<String>,
        #[serde(default)]
        expect: Option<Expect>,
    },
    Query {
        what: QueryKind,
        #[serde(default)]
        object: Option<String>,
        /// Principal whose privilege is asked for; defaults to the caller.
        #[serde(default)]
        target: Option<String>,
    },
    Spawn {
        principal: String,
    },
    Join {
        principal: String,
    },
    Barrier,
}

impl Step {
    pub fn describe(&self) -> String {
        match self {
            Step::Alloc { object, .. } => format!("alloc {object}"),
            Step::Free { object, .. } => format!("free {object}"),
            Step::Read { object, .. } => format!("read {object}"),
            Step::Write { object, .. } => format!("write {object}"),
            Step::Query { what, object, target } => {
                let mut s = format!("query {what:?}").to_lowercase();
                if let Some(o) = object {
                    s.push_str(&format!(" {o}"));
                }
                if let Some(t) = target {
                    s.push_str(&format!(" for {t}"));
                }
                s
            }
            Step::Spawn { principal } => format!("spawn {principal}"),
            Step::Join { principal } => format!("join {principal}"),
            Step::Barrier => "barrier".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrincipalDecl {
    pub name: String,
    pub label: String,
    pub ownership: String,
    /// Spawned by this principal's `spawn` step instead of by root.
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub script: Vec<Step>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectDecl {
    pub name: String,
    pub label: String,
    pub size: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub categories: Vec<CategoryDecl>,
    pub principals: Vec<PrincipalDecl>,
    pub objects: Vec<ObjectDecl>,
    /// principal -> object -> one of `RW`, `R`, `W`, `--`.
    pub expected_matrix: BTreeMap<String, BTreeMap<String, String>>,
}

/// A config after validation, with labels resolved against the ids the
/// root principal will mint (1, 2, ... in declaration order).
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ScenarioConfig,
    pub names: CategoryNames,
    pub categories: Vec<Category>,
    pub labels: Vec<(Label, Ownership)>,
    pub object_labels: Vec<ObjectLabel>,
}

impl Resolved {
    pub fn principal_index(&self, name: &str) -> Option<usize> {
        self.config.principals.iter().position(|p| p.name == name)
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.config.objects.iter().position(|o| o.name == name)
    }
}

const CELLS: [&str; 4] = ["RW", "R", "W", "--"];

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::ConfigInvalid(msg.into())
}

pub fn parse(text: &str) -> Result<ScenarioConfig, HarnessError> {
    serde_json::from_str(text).map_err(|e| invalid(format!("bad JSON: {e}")))
}

pub fn load(text: &str) -> Result<Resolved, HarnessError> {
    validate(parse(text)?)
}

pub fn validate(config: ScenarioConfig) -> Result<Resolved, HarnessError> {
    let mut names = CategoryNames::new();
    let mut categories = Vec::new();
    for (i, c) in config.categories.iter().enumerate() {
        if c.name.is_empty() || !c.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_') {
            return Err(invalid(format!("bad category name {:?}", c.name)));
        }
        let cat = Category::new(i as u64 + 1, c.kind.into());
        names.insert(&c.name, cat).map_err(|e| invalid(e.to_string()))?;
        categories.push(cat);
    }

    let mut seen = BTreeSet::new();
    let mut labels = Vec::new();
    for p in &config.principals {
        if p.name == ROOT || !seen.insert(p.name.as_str()) {
            return Err(invalid(format!("duplicate or reserved principal name {:?}", p.name)));
        }
        let l = names
            .parse_label(&p.label)
            .map_err(|e| invalid(format!("principal {}: label: {e}", p.name)))?;
        let o = names
            .parse_ownership(&p.ownership)
            .map_err(|e| invalid(format!("principal {}: ownership: {e}", p.name)))?;
        labels.push((l, o));
    }

    let mut object_labels = Vec::new();
    let mut seen_obj = BTreeSet::new();
    for o in &config.objects {
        if !seen_obj.insert(o.name.as_str()) {
            return Err(invalid(format!("duplicate object {:?}", o.name)));
        }
        if o.size == 0 {
            return Err(invalid(format!("object {} has zero size", o.name)));
        }
        let l = names
            .parse_object_label(&o.label)
            .map_err(|e| invalid(format!("object {}: label: {e}", o.name)))?;
        object_labels.push(l);
    }

    // spawn topology: a parent must be declared earlier and spawn the child
    // exactly once; join only one's own children
    for (i, p) in config.principals.iter().enumerate() {
        if let Some(parent) = &p.parent {
            if parent == ROOT {
                continue;
            }
            let pi = config
                .principals
                .iter()
                .position(|q| &q.name == parent)
                .ok_or_else(|| invalid(format!("principal {}: unknown parent {parent}", p.name)))?;
            if pi >= i {
                return Err(invalid(format!("principal {}: parent {parent} must be declared first", p.name)));
            }
            let spawns = config.principals[pi]
                .script
                .iter()
                .filter(|s| matches!(s, Step::Spawn { principal } if principal == &p.name))
                .count();
            if spawns != 1 {
                return Err(invalid(format!("{parent} must spawn {} exactly once", p.name)));
            }
        }
    }
    for p in &config.principals {
        for step in &p.script {
            match step {
                Step::Alloc { object, .. }
                | Step::Free { object, .. }
                | Step::Read { object, .. }
                | Step::Write { object, .. } => {
                    if !seen_obj.contains(object.as_str()) {
                        return Err(invalid(format!("{}: unknown object {object}", p.name)));
                    }
                }
                Step::Query { what, object, target } => {
                    if let Some(o) = object {
                        if !seen_obj.contains(o.as_str()) {
                            return Err(invalid(format!("{}: unknown object {o}", p.name)));
                        }
                    }
                    if let Some(t) = target {
                        if t != ROOT && !seen.contains(t.as_str()) {
                            return Err(invalid(format!("{}: unknown principal {t}", p.name)));
                        }
                    }
                    if matches!(what, QueryKind::MemLabel | QueryKind::Privilege) && object.is_none() {
                        return Err(invalid(format!("{}: query needs an object", p.name)));
                    }
                }
                Step::Spawn { principal } | Step::Join { principal } => {
                    let child = config.principals.iter().find(|q| &q.name == principal);
                    if child.and_then(|c| c.parent.as_deref()) != Some(p.name.as_str()) {
                        return Err(invalid(format!("{}: {principal} is not its child", p.name)));
                    }
                }
                Step::Barrier => {}
            }
        }
    }

    for p in &config.principals {
        let row = config
            .expected_matrix
            .get(&p.name)
            .ok_or_else(|| invalid(format!("expected matrix lacks principal {}", p.name)))?;
        for o in &config.objects {
            let cell = row
                .get(&o.name)
                .ok_or_else(|| invalid(format!("expected matrix lacks cell {}/{}", p.name, o.name)))?;
            if !CELLS.contains(&cell.as_str()) {
                return Err(invalid(format!("bad matrix cell {cell:?} for {}/{}", p.name, o.name)));
            }
        }
        if row.len() != config.objects.len() {
            return Err(invalid(format!("expected matrix row {} names unknown objects", p.name)));
        }
    }
    if config.expected_matrix.len() != config.principals.len() {
        return Err(invalid("expected matrix names unknown principals"));
    }

    Ok(Resolved { config, names, categories, labels, object_labels })
}
