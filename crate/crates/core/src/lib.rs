//! Core of the workflow gate: the access-control model, the workflow
//! reference monitor, the federated sign-on protocol, presence supervision,
//! training by recording, and persistence.
//!
//! Everything here is independent of HTTP; the `gate-server` crate wires it
//! into a reverse proxy.

pub mod clock;
pub mod credentials;
pub mod federation;
pub mod fixtures;
pub mod model;
pub mod monitor;
pub mod page;
pub mod presence;
pub mod rule;
pub mod session;
pub mod store;
pub mod training;
pub mod validate;

pub use model::{allowed_workflows, required_auth_methods};
pub use monitor::{evaluate, Decision, DenyReason, MonitorRequest};
pub use page::{Method, PageId};
pub use rule::{eval_param_rule, HostState, ParamRule, Params};
pub use validate::{validate_policy, Violation};
