//! Scenario files (TOML).
//!
//! ```toml
//! name = "bcast-1mb"
//! seed = 7
//! loss_rate = 0.0
//!
//! [topology]
//! kind = "star"          # star | leaf_spine | fat_tree | file
//! hosts = 4
//! [topology.link]        # optional LinkParams overrides
//! prop_delay_s = 1e-6
//!
//! [group]                # optional
//! members = [0, 1, 2, 3] # host indices, default all hosts
//! master = 0
//! initial_psn = 0
//!
//! [workload]
//! kind = "bcast"         # bcast | multi_unicast | ring_overlay | replication | hpl | source_switch
//! msg_bytes = 1048576
//!
//! [host]                 # optional HostConfig overrides
//! [cc]                   # optional rate-control overrides
//! [sim]                  # optional SimConfig overrides
//! ```

use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::world::SimConfig;
use super::HarnessError;
use crate::host::HostConfig;
use crate::netsim::{build_fat_tree, build_leaf_spine, build_star, LinkParams, Topology};
use crate::wire::{GroupIp, Psn, MAX_ENVELOPE_ENTRIES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySpec {
    Star {
        hosts: usize,
        #[serde(default)]
        link: LinkParams,
    },
    LeafSpine {
        leaves: usize,
        spines: usize,
        hosts_per_leaf: usize,
        #[serde(default)]
        link: LinkParams,
    },
    FatTree {
        k: usize,
        #[serde(default)]
        link: LinkParams,
    },
    /// Topology file; relative paths resolve against the scenario's directory.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupSpec {
    /// Host indices; empty means every host.
    pub members: Vec<usize>,
    pub master: usize,
    pub initial_psn: u32,
    pub group_ip: Ipv4Addr,
}

impl Default for GroupSpec {
    fn default() -> Self {
        Self {
            members: Vec::new(),
            master: 0,
            initial_psn: 0,
            group_ip: Ipv4Addr::new(239, 1, 0, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    /// Switch-replicated multicast.
    #[default]
    Multicast,
    /// One unicast RC connection per receiver.
    Unicast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    #[default]
    Uniform,
    /// 80% of the bytes come from the first source of each column.
    Centralized,
}

fn one() -> u32 {
    1
}

fn depth() -> u32 {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Workload {
    /// The master sends `messages` messages to the group.
    Bcast {
        msg_bytes: u64,
        #[serde(default = "one")]
        messages: u32,
    },
    /// The master sends the same message to every receiver over unicast.
    MultiUnicast {
        msg_bytes: u64,
        #[serde(default = "one")]
        messages: u32,
    },
    /// Chunked store-and-forward relay along the member list.
    RingOverlay { msg_bytes: u64, chunk_bytes: u64 },
    /// Back-to-back WRITE IOs from the master to `n_copies` replicas.
    Replication {
        io_bytes: u64,
        n_copies: usize,
        duration_s: f64,
        #[serde(default = "depth")]
        depth: u32,
        #[serde(default)]
        transport: Transport,
    },
    /// Communication pattern of an `n` x `n` process grid: a broadcast
    /// along each row, then every column member in turn broadcasts its
    /// share of `rs_bytes` to its column.
    Hpl {
        n: usize,
        pb_bytes: u64,
        rs_bytes: u64,
        #[serde(default)]
        distribution: Distribution,
        #[serde(default)]
        transport: Transport,
        #[serde(default = "one")]
        epochs: u32,
    },
    /// Each listed source sends `packets_per_source` full packets in turn.
    SourceSwitch {
        packets_per_source: u32,
        sources: Vec<usize>,
    },
}

impl Workload {
    pub fn kind(&self) -> &'static str {
        match self {
            Workload::Bcast { .. } => "bcast",
            Workload::MultiUnicast { .. } => "multi_unicast",
            Workload::RingOverlay { .. } => "ring_overlay",
            Workload::Replication { .. } => "replication",
            Workload::Hpl { .. } => "hpl",
            Workload::SourceSwitch { .. } => "source_switch",
        }
    }
}

/// Rate-control overrides applied on top of `[host]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcOverrides {
    pub rate_min_bps: Option<f64>,
    pub rate_ai_bps: Option<f64>,
    pub t_ai_s: Option<f64>,
    pub cnp_interval_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss_rate: f64,
    pub topology: TopologySpec,
    #[serde(default)]
    pub group: GroupSpec,
    pub workload: Workload,
    #[serde(default)]
    pub host: HostConfig,
    #[serde(default)]
    pub cc: CcOverrides,
    #[serde(default)]
    pub sim: SimConfig,
    /// Whether `[host] rto_s` was given; otherwise it is derived from the
    /// topology's base RTT.
    #[serde(skip)]
    pub explicit_rto: bool,
    /// Whether `[sim] age_interval_s` was given; otherwise it is four base
    /// RTTs.
    #[serde(skip)]
    pub explicit_age: bool,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::ScenarioInvalid(msg.into())
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, HarnessError> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        let explicit_rto = raw
            .get("host")
            .and_then(|h| h.as_table())
            .is_some_and(|h| h.contains_key("rto_s"));
        let explicit_age = raw
            .get("sim")
            .and_then(|h| h.as_table())
            .is_some_and(|h| h.contains_key("age_interval_s"));
        let mut sc: Scenario = raw.try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        sc.explicit_rto = explicit_rto;
        sc.explicit_age = explicit_age;
        Ok(sc)
    }

    pub fn from_file(path: &Path) -> Result<Scenario, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let mut sc = Self::from_toml(&text)?;
        sc.base_dir = path.parent().map(Path::to_path_buf);
        Ok(sc)
    }

    /// Builds the topology with the scenario's loss rate applied to every link.
    pub fn build_topology(&self) -> Result<Topology, HarnessError> {
        let topo = match &self.topology {
            TopologySpec::Star { hosts, link } => build_star(*hosts, *link),
            TopologySpec::LeafSpine {
                leaves,
                spines,
                hosts_per_leaf,
                link,
            } => build_leaf_spine(*leaves, *spines, *hosts_per_leaf, *link),
            TopologySpec::FatTree { k, link } => build_fat_tree(*k, *link),
            TopologySpec::File { path } => {
                let path = match &self.base_dir {
                    Some(base) if path.is_relative() => base.join(path),
                    _ => path.clone(),
                };
                Topology::from_file(&path)
            }
        };
        let mut topo = topo.map_err(|e| invalid(e.to_string()))?;
        if self.loss_rate > 0.0 {
            topo.set_loss_rate(self.loss_rate);
        }
        Ok(topo)
    }

    pub fn group_ip(&self) -> Result<GroupIp, HarnessError> {
        GroupIp::new(self.group.group_ip).ok_or_else(|| invalid(format!("{} is not a multicast address", self.group.group_ip)))
    }

    pub fn initial_psn(&self) -> Psn {
        Psn::new(self.group.initial_psn)
    }

    /// Group members as host indices, master included.
    pub fn members(&self, n_hosts: usize) -> Vec<usize> {
        if self.group.members.is_empty() {
            (0..n_hosts).collect()
        } else {
            self.group.members.clone()
        }
    }

    /// Members other than the master, in listed order.
    pub fn receivers(&self, n_hosts: usize) -> Vec<usize> {
        self.members(n_hosts)
            .into_iter()
            .filter(|&m| m != self.group.master)
            .collect()
    }

    /// Host configuration with `[cc]` applied. The RTO is three times
    /// `base_rtt_s` unless set explicitly.
    pub fn host_config(&self, base_rtt_s: f64) -> HostConfig {
        let mut h = self.host.clone();
        if let Some(v) = self.cc.rate_min_bps {
            h.rate_min_bps = v;
        }
        if let Some(v) = self.cc.rate_ai_bps {
            h.rate_ai_bps = v;
        }
        if let Some(v) = self.cc.t_ai_s {
            h.t_ai_s = v;
        }
        if let Some(v) = self.cc.cnp_interval_s {
            h.cnp_interval_s = v;
        }
        if !self.explicit_rto {
            h.rto_s = 3.0 * base_rtt_s;
        }
        h
    }

    /// Simulator settings with the aging period derived from `base_rtt_s`
    /// unless given explicitly.
    pub fn sim_config(&self, base_rtt_s: f64) -> SimConfig {
        let mut c = self.sim.clone();
        if !self.explicit_age {
            c.age_interval_s = 4.0 * base_rtt_s;
        }
        c
    }

    /// Checks everything that can be checked without running. Returns the
    /// built topology.
    pub fn validate(&self) -> Result<Topology, HarnessError> {
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return Err(invalid("loss_rate must be in [0, 1]"));
        }
        let topo = self.build_topology()?;
        let n_hosts = topo.hosts().len();
        self.group_ip()?;
        let members = self.members(n_hosts);
        if let Some(&m) = members.iter().find(|&&m| m >= n_hosts) {
            return Err(invalid(format!("member {m} is not a host (topology has {n_hosts})")));
        }
        let mut sorted = members.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != members.len() {
            return Err(invalid("duplicate group member"));
        }
        if !members.contains(&self.group.master) {
            return Err(invalid("master must be a group member"));
        }
        if members.len() > MAX_ENVELOPE_ENTRIES * usize::from(u16::MAX) {
            return Err(invalid("group too large"));
        }
        let sim = &self.sim;
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(sim.proc_delay_s) || !nonneg(sim.hop_delay_s) {
            return Err(invalid("sim delays must be finite and non-negative"));
        }
        if !(sim.age_interval_s.is_finite() && sim.age_interval_s > 0.0) {
            return Err(invalid("sim.age_interval_s must be positive"));
        }
        if !(sim.max_sim_time_s.is_finite() && sim.max_sim_time_s > 0.0) {
            return Err(invalid("sim.max_sim_time_s must be positive"));
        }
        self.host_config(1e-6)
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        let n_receivers = members.len() - 1;
        let positive = |name: &str, v: u64| {
            if v == 0 {
                Err(invalid(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        match &self.workload {
            Workload::Bcast { msg_bytes, messages } | Workload::MultiUnicast { msg_bytes, messages } => {
                positive("msg_bytes", *msg_bytes)?;
                positive("messages", u64::from(*messages))?;
                if n_receivers == 0 {
                    return Err(invalid("at least one receiver is required"));
                }
            }
            Workload::RingOverlay { msg_bytes, chunk_bytes } => {
                positive("msg_bytes", *msg_bytes)?;
                positive("chunk_bytes", *chunk_bytes)?;
                if n_receivers < 2 {
                    return Err(invalid("ring overlay needs at least two receivers"));
                }
            }
            Workload::Replication {
                io_bytes,
                n_copies,
                duration_s,
                depth,
                ..
            } => {
                positive("io_bytes", *io_bytes)?;
                positive("n_copies", *n_copies as u64)?;
                positive("depth", u64::from(*depth))?;
                if !(duration_s.is_finite() && *duration_s > 0.0) {
                    return Err(invalid("duration_s must be positive"));
                }
                if *n_copies > n_receivers {
                    return Err(invalid(format!("n_copies {n_copies} exceeds the {n_receivers} receivers")));
                }
            }
            Workload::Hpl {
                n,
                pb_bytes,
                rs_bytes,
                epochs,
                ..
            } => {
                positive("n", *n as u64)?;
                positive("pb_bytes", *pb_bytes)?;
                positive("rs_bytes", *rs_bytes)?;
                positive("epochs", u64::from(*epochs))?;
                if n * n > n_hosts {
                    return Err(invalid(format!("an {n}x{n} grid needs {} hosts", n * n)));
                }
            }
            Workload::SourceSwitch {
                packets_per_source,
                sources,
            } => {
                positive("packets_per_source", u64::from(*packets_per_source))?;
                if sources.is_empty() {
                    return Err(invalid("sources must not be empty"));
                }
                if let Some(s) = sources.iter().find(|s| !members.contains(s)) {
                    return Err(invalid(format!("source {s} is not a member")));
                }
            }
        }
        Ok(topo)
    }
}
