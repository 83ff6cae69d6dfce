//! Intent-driven orchestration core: intents, dependency planning, a
//! Configuration-as-Data package store, admission control, simulated edge
//! clusters, monitoring, mesh planning and the domain manager engine.

pub mod admission;
pub mod edge;
pub mod intent;
pub mod manager;
pub mod mesh;
pub mod monitoring;
pub mod planner;
pub mod quantity;
pub mod store;
