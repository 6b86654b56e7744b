//! Deterministic discrete-event engine, links and topologies.
//!
//! Time is `f64` seconds. Events at equal times run in insertion order.
//! Each link owns a seeded loss generator and each switch its own ECMP hash
//! salt, so changing one knob leaves unrelated randomness untouched.

mod engine;
mod fabric;
mod routing;
mod topology;

pub use engine::{Scheduler, SimTime};
pub use fabric::{DropRule, Fabric, FabricStats, TraceRecord, Transmit};
pub use routing::{flow_key, mix64, Routes};
pub use topology::{
    build_fat_tree, build_leaf_spine, build_star, Endpoint, Link, LinkDecl, LinkParams, Node,
    NodeDecl, NodeId, PortId, Role, Topology, TopologyBuilder, TopologyFile,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetsimError {
    #[error("cannot schedule at {at}s, clock is already at {now}s")]
    TimeRegression { now: f64, at: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}
