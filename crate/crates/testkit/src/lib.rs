//! Test support shared by the gate crates: random inputs and brute-force
//! reference implementations that the real code is checked against.

pub mod gen;
pub mod oracle;

pub use gen::{monitor_case, random_db, MonitorCase};
pub use oracle::{path_exists, single_workflow_verdicts, Table};
