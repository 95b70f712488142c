//! User-space privilege separation for mutually distrusting principals that
//! share one memory segment.
//!
//! Members of a group never touch the shared segment's protection state
//! themselves. They send requests to the group's [`monitor`], which
//! authenticates the sender by connection credential, authorizes the request
//! against the [`label`] rules, carves memory with the permission-oriented
//! [`allocator`] and configures every member's view in the simulated MMU
//! ([`protection`]). [`runtime`] runs a monitor on its own thread and gives
//! members a blocking client API over [`rpc`].

use std::fmt;

pub mod allocator;
pub mod label;
pub mod monitor;
pub mod protection;
pub mod rpc;
pub mod runtime;

/// Identifier of a principal within a group. The arbiter is always id 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct PrincipalId(pub u64);

impl PrincipalId {
    pub const ARBITER: PrincipalId = PrincipalId(0);
}

impl fmt::Display for PrincipalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub use label::{
    can_flow, can_flow_owned, check_alloc, check_create, perms_for, AccessKind, Category, CategoryKind,
    CategoryNames, Label, ObjectLabel, Ownership, Permission,
};
pub use monitor::{ExitStatus, Monitor};
pub use runtime::{Group, Member};
