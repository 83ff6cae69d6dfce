//! Operator client for the domain manager and the embedded scenario runner.

pub mod client;
pub mod render;
pub mod scenario;
