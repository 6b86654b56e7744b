use std::collections::VecDeque;
use std::net::Ipv4Addr;

use rayon::prelude::*;

use super::metrics::MetricsReport;
use super::scenario::{Distribution, Scenario, Transport, Workload};
use super::workload::{Phase, PlanDriver, ReplicationDriver, RingDriver, Route, Transfer};
use super::world::{LoggedSwitchEvent, World};
use super::HarnessError;
use crate::netsim::{mix64, Role, Topology, TraceRecord};
use crate::switch::SwitchEvent;
use crate::wire::{GroupIp, AETH_LEN, BTH_LEN, ETH_HEADER_LEN, IPV4_HEADER_LEN, UDP_HEADER_LEN};

const HEADERS: usize = ETH_HEADER_LEN + IPV4_HEADER_LEN + UDP_HEADER_LEN + BTH_LEN;

/// Everything a run produces.
pub struct RunOutput {
    pub report: MetricsReport,
    pub switch_log: Vec<LoggedSwitchEvent>,
    pub trace: Vec<TraceRecord>,
}

/// Longest host-to-host path in links.
pub fn host_diameter(topo: &Topology) -> usize {
    let mut best = 0;
    for &h in topo.hosts() {
        let mut dist = vec![usize::MAX; topo.nodes.len()];
        dist[h] = 0;
        let mut q = VecDeque::from([h]);
        while let Some(u) = q.pop_front() {
            if u != h && topo.node(u).role == Role::Host {
                best = best.max(dist[u]);
                continue;
            }
            for p in 0..topo.node(u).n_ports {
                if let Some(peer) = topo.peer(u, p) {
                    if dist[peer.node] == usize::MAX {
                        dist[peer.node] = dist[u] + 1;
                        q.push_back(peer.node);
                    }
                }
            }
        }
    }
    best
}

/// Unloaded round trip of one full data packet and its ACK across the
/// longest host-to-host path.
pub fn base_rtt_s(topo: &Topology, mtu_payload: usize, proc_delay_s: f64) -> f64 {
    let d = host_diameter(topo).max(1) as f64;
    let prop = topo.links.iter().map(|l| l.params.prop_delay_s).fold(0.0, f64::max);
    let bw = topo
        .links
        .iter()
        .map(|l| l.params.bandwidth_bps)
        .fold(f64::INFINITY, f64::min);
    let data = (HEADERS + mtu_payload) as f64 * 8.0 / bw;
    let ack = (HEADERS + AETH_LEN) as f64 * 8.0 / bw;
    d * (2.0 * prop + data + ack) + 2.0 * (d - 1.0) * proc_delay_s
}

/// Lower bound on the ring overlay completion time: `hops` store-and-forward
/// stages of `n_chunks` chunks, each stage adding `hop_delay_s` plus the
/// one-way path latency `path_latency_s`.
pub fn ring_overlay_bound(
    msg_bytes: u64,
    chunk_bytes: u64,
    hops: usize,
    bandwidth_bps: f64,
    hop_delay_s: f64,
    path_latency_s: f64,
    mtu_payload: usize,
) -> f64 {
    let chunk = chunk_bytes.min(msg_bytes).max(1);
    let n_chunks = msg_bytes.div_ceil(chunk);
    let chunk_time = |bytes: u64| {
        let pkts = bytes.div_ceil(mtu_payload as u64).max(1);
        (bytes + pkts * HEADERS as u64) as f64 * 8.0 / bandwidth_bps
    };
    let c = chunk_time(chunk);
    hops as f64 * (hop_delay_s + path_latency_s) + (n_chunks as f64 + hops as f64 - 1.0) * c
}

type GroupSpecs = Vec<(GroupIp, usize, Vec<usize>)>;
type RouteFn = Box<dyn Fn(usize, usize) -> Route>;

fn grid_groups(n: usize) -> (GroupSpecs, GroupSpecs) {
    let rows = (0..n)
        .map(|r| {
            let ip = GroupIp::new(Ipv4Addr::new(239, 2, 0, r as u8 + 1)).expect("multicast range");
            (ip, r * n + r, (0..n).map(|c| r * n + c).collect())
        })
        .collect();
    let cols = (0..n)
        .map(|c| {
            let ip = GroupIp::new(Ipv4Addr::new(239, 3, 0, c as u8 + 1)).expect("multicast range");
            (ip, c, (0..n).map(|r| r * n + c).collect())
        })
        .collect();
    (rows, cols)
}

fn shares(total: u64, n: usize, dist: Distribution) -> Vec<u64> {
    if n == 1 {
        return vec![total];
    }
    match dist {
        Distribution::Uniform => {
            let base = total / n as u64;
            let mut v = vec![base; n];
            v[0] += total - base * n as u64;
            v
        }
        Distribution::Centralized => {
            let big = total * 4 / 5;
            let rest = total - big;
            let each = rest / (n as u64 - 1);
            let mut v = vec![each; n];
            v[0] = big + rest - each * (n as u64 - 1);
            v
        }
    }
}

/// Runs one scenario to completion.
pub fn run(sc: &Scenario) -> Result<MetricsReport, HarnessError> {
    Ok(run_detailed(sc)?.report)
}

pub fn run_detailed(sc: &Scenario) -> Result<RunOutput, HarnessError> {
    let topo = sc.validate()?;
    let n_hosts = topo.hosts().len();
    let rtt = base_rtt_s(&topo, sc.host.mtu_payload, sc.sim.proc_delay_s);
    let hcfg = sc.host_config(rtt);
    let mut w = World::new(topo, sc.seed, &hcfg, sc.sim_config(rtt));
    let mut report = MetricsReport::new(&sc.name, sc.workload.kind(), sc.seed, sc.loss_rate);
    let master = sc.group.master;
    let members = sc.members(n_hosts);
    let receivers = sc.receivers(n_hosts);
    let psn = sc.initial_psn();
    let group_spec = || -> Result<_, HarnessError> { Ok(vec![(sc.group_ip()?, master, members.clone())]) };

    let t0 = w.now();
    match &sc.workload {
        Workload::Bcast { msg_bytes, messages } => {
            let groups = w.register_groups(&group_spec()?, psn)?;
            report.set("registration_s", w.now() - t0);
            let phase = vec![vec![Transfer {
                src: master,
                route: Route::Group(0),
                bytes: *msg_bytes,
                messages: *messages,
            }]];
            run_plan(&mut w, &mut report, groups, vec![phase], sc.seed)?;
        }
        Workload::MultiUnicast { msg_bytes, messages } => {
            let phase = vec![vec![Transfer {
                src: master,
                route: Route::Unicast(receivers.clone()),
                bytes: *msg_bytes,
                messages: *messages,
            }]];
            run_plan(&mut w, &mut report, Vec::new(), vec![phase], sc.seed)?;
        }
        Workload::SourceSwitch {
            packets_per_source,
            sources,
        } => {
            let groups = w.register_groups(&group_spec()?, psn)?;
            report.set("registration_s", w.now() - t0);
            let bytes = u64::from(*packets_per_source) * hcfg.mtu_payload as u64;
            let chain = sources
                .iter()
                .map(|&s| Transfer {
                    src: s,
                    route: Route::Group(0),
                    bytes,
                    messages: 1,
                })
                .collect();
            run_plan(&mut w, &mut report, groups, vec![vec![chain]], sc.seed)?;
        }
        Workload::Hpl {
            n,
            pb_bytes,
            rs_bytes,
            distribution,
            transport,
            epochs,
        } => {
            let n = *n;
            let (rows, cols) = grid_groups(n);
            let rs = shares(*rs_bytes, n, *distribution);
            let (groups, row_route, col_route): (_, RouteFn, RouteFn) =
                match transport {
                    Transport::Multicast => {
                        let all: Vec<_> = rows.iter().chain(cols.iter()).cloned().collect();
                        let groups = w.register_groups(&all, psn)?;
                        report.set("registration_s", w.now() - t0);
                        (groups, Box::new(|r, _| Route::Group(r)), Box::new(move |c, _| Route::Group(n + c)))
                    }
                    Transport::Unicast => {
                        let rows2 = rows.clone();
                        let cols2 = cols.clone();
                        (
                            Vec::new(),
                            Box::new(move |r, src| Route::Unicast(rows2[r].2.iter().copied().filter(|&h| h != src).collect())),
                            Box::new(move |c, src| Route::Unicast(cols2[c].2.iter().copied().filter(|&h| h != src).collect())),
                        )
                    }
                };
            let mut phases: Vec<Phase> = Vec::new();
            for _ in 0..*epochs {
                phases.push(
                    rows.iter()
                        .enumerate()
                        .map(|(r, (_, src, _))| {
                            vec![Transfer {
                                src: *src,
                                route: row_route(r, *src),
                                bytes: *pb_bytes,
                                messages: 1,
                            }]
                        })
                        .collect(),
                );
                phases.push(
                    cols.iter()
                        .enumerate()
                        .map(|(c, (_, _, col))| {
                            col.iter()
                                .zip(&rs)
                                .map(|(&src, &bytes)| Transfer {
                                    src,
                                    route: col_route(c, src),
                                    bytes,
                                    messages: 1,
                                })
                                .collect()
                        })
                        .collect(),
                );
            }
            run_plan(&mut w, &mut report, groups, phases, sc.seed)?;
        }
        Workload::RingOverlay { msg_bytes, chunk_bytes } => {
            let mut chain = vec![master];
            chain.extend(&receivers);
            let mut d = RingDriver::new(&mut w, chain, *msg_bytes, *chunk_bytes, sc.sim.hop_delay_s, sc.seed);
            d.start(&mut w);
            w.run(&mut d)?;
            let jct = d.jct_s().expect("driver finished");
            report.set("jct_s", jct);
            report.set("goodput_bps", *msg_bytes as f64 * 8.0 / jct);
            report.set("chunks", d.n_chunks() as f64);
            report.set("rx.digest_mismatches", d.mismatches as f64);
            report.set("checksum_ok", f64::from(u8::from(d.mismatches == 0)));
        }
        Workload::Replication {
            io_bytes,
            n_copies,
            duration_s,
            depth,
            transport,
        } => {
            let replicas: Vec<usize> = receivers[..*n_copies].to_vec();
            let groups = if *transport == Transport::Multicast && *n_copies > 1 {
                let mut g = vec![master];
                g.extend(&replicas);
                let groups = w.register_groups(&[(sc.group_ip()?, master, g)], psn)?;
                report.set("registration_s", w.now() - t0);
                groups
            } else {
                Vec::new()
            };
            let mut d = ReplicationDriver::new(&mut w, master, &replicas, groups.first(), *io_bytes, *depth, *duration_s, sc.seed);
            d.start(&mut w)?;
            w.run(&mut d)?;
            report.set("ios_completed", d.completed as f64);
            report.set("iops_proxy", d.iops_proxy());
            report.set("goodput_bps", d.completed as f64 * *io_bytes as f64 * 8.0 / duration_s);
        }
    }
    common_metrics(&w, &mut report);
    Ok(RunOutput {
        report,
        switch_log: std::mem::take(&mut w.switch_log),
        trace: w.fabric.trace().to_vec(),
    })
}

fn run_plan(w: &mut World, report: &mut MetricsReport, groups: Vec<super::world::GroupHandle>, phases: Vec<Phase>, seed: u64) -> Result<(), HarnessError> {
    let mut d = PlanDriver::new(groups, phases, seed);
    d.start(w)?;
    w.run(&mut d)?;
    let jct = d.jct_s().expect("driver finished");
    report.set("jct_s", jct);
    report.set("goodput_bps", d.bytes_sent as f64 * 8.0 / jct);
    report.set("rx.messages", d.received as f64);
    report.set("rx.digest_mismatches", d.mismatches as f64);
    report.set("checksum_ok", f64::from(u8::from(d.mismatches == 0 && d.undelivered() == 0)));
    for (i, end) in d.phase_ends.iter().enumerate() {
        report.set(&format!("phase_end_s.{i:03}"), *end - d.started);
    }
    for (i, (src, psn)) in d.first_psns.iter().enumerate() {
        report.set(&format!("first_psn.{i:03}.host{src}"), f64::from(*psn));
    }
    Ok(())
}

fn common_metrics(w: &World, r: &mut MetricsReport) {
    let f = &w.fabric.stats;
    r.set("sim_time_s", w.now().as_secs());
    r.set("events", w.sched.processed() as f64);
    r.set("fabric.injected", f.injected as f64);
    r.set("fabric.delivered", f.delivered as f64);
    r.set("fabric.in_flight", f.in_flight as f64);
    r.set("fabric.bytes_tx", f.bytes_tx as f64);
    r.set("fabric.conserved", f64::from(u8::from(f.conserved())));
    r.set("drops.loss", f.dropped_loss as f64);
    r.set("drops.queue", f.dropped_queue as f64);
    r.set("ecn_marked", f.ecn_marked as f64);
    r.set("switch.errors", w.stats.switch_errors as f64);
    r.set("switch.unroutable", w.stats.unroutable as f64);
    let (mut switches, mut nacks_fwd) = (0u64, 0u64);
    for e in &w.switch_log {
        match e.event {
            SwitchEvent::SourceSwitch { .. } => switches += 1,
            SwitchEvent::NackForwarded { .. } => nacks_fwd += 1,
        }
    }
    r.set("switch.source_switches", switches as f64);
    r.set("switch.nacks_forwarded", nacks_fwd as f64);

    let qps = w.hosts.iter().flat_map(|h| h.qps());
    let mut sum = crate::host::QpStats::default();
    let mut min_rate = f64::INFINITY;
    for q in qps {
        let s = &q.stats;
        sum.data_sent += s.data_sent;
        sum.retransmissions += s.retransmissions;
        sum.mr_updates_sent += s.mr_updates_sent;
        sum.timeouts += s.timeouts;
        sum.nacks_sent += s.nacks_sent;
        sum.nacks_rx += s.nacks_rx;
        sum.cnps_sent += s.cnps_sent;
        sum.cnps_rx += s.cnps_rx;
        sum.duplicates += s.duplicates;
        sum.rejected += s.rejected;
        sum.delivered_bytes += s.delivered_bytes;
        min_rate = min_rate.min(s.min_rate_bps);
    }
    r.set("host.data_sent", sum.data_sent as f64);
    r.set("retransmissions", sum.retransmissions as f64);
    r.set("host.mr_updates_sent", sum.mr_updates_sent as f64);
    r.set("host.timeouts", sum.timeouts as f64);
    r.set("host.nacks_sent", sum.nacks_sent as f64);
    r.set("host.nacks_rx", sum.nacks_rx as f64);
    r.set("host.cnps_sent", sum.cnps_sent as f64);
    r.set("host.cnps_rx", sum.cnps_rx as f64);
    r.set("host.duplicates", sum.duplicates as f64);
    r.set("host.rejected", sum.rejected as f64);
    r.set("host.delivered_bytes", sum.delivered_bytes as f64);
    if min_rate.is_finite() {
        r.set("host.min_rate_bps", min_rate);
    }
    let unknown: u64 = w.hosts.iter().map(|h| h.stats.unknown_qpn_drops).sum();
    r.set("host.unknown_qpn_drops", unknown as f64);
}

/// Seed of the `i`-th repetition. Identical across loss rates so that each
/// lossy run is normalized against the lossless run with the same seed.
pub fn derived_seed(base: u64, i: usize) -> u64 {
    mix64(base.wrapping_add(i as u64))
}

/// Runs `sc` at every loss rate with `seeds` derived seeds each and adds
/// `normalized_goodput` relative to the lossless run of the same seed.
/// Reports come back ordered by rate, then seed index.
pub fn sweep(sc: &Scenario, rates: &[f64], seeds: usize) -> Result<Vec<MetricsReport>, HarnessError> {
    if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(HarnessError::ScenarioInvalid(format!("loss rate {r} outside [0, 1]")));
    }
    if seeds == 0 {
        return Err(HarnessError::ScenarioInvalid("seeds must be positive".into()));
    }
    let mut all_rates = vec![0.0];
    all_rates.extend(rates.iter().copied().filter(|&r| r != 0.0));
    let jobs: Vec<(usize, usize)> = (0..all_rates.len())
        .flat_map(|ri| (0..seeds).map(move |si| (ri, si)))
        .collect();
    let results: Vec<MetricsReport> = jobs
        .par_iter()
        .map(|&(ri, si)| {
            let mut s = sc.clone();
            s.loss_rate = all_rates[ri];
            s.seed = derived_seed(sc.seed, si);
            run(&s)
        })
        .collect::<Result<_, _>>()?;
    let baseline: Vec<f64> = results[..seeds]
        .iter()
        .map(|r| r.get("goodput_bps").unwrap_or(0.0))
        .collect();
    let mut out = Vec::new();
    for &rate in rates {
        let ri = all_rates.iter().position(|&r| r == rate).expect("rate is listed");
        for si in 0..seeds {
            let mut r = results[ri * seeds + si].clone();
            let g = r.get("goodput_bps").unwrap_or(0.0);
            let norm = if baseline[si] > 0.0 { g / baseline[si] } else { 0.0 };
            r.set("normalized_goodput", norm);
            out.push(r);
        }
    }
    Ok(out)
}
