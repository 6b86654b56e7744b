//! Packet-level simulator for switch-assisted RDMA multicast.

pub mod harness;
pub mod host;
pub mod netsim;
pub mod switch;
pub mod psn;
pub mod wire;
