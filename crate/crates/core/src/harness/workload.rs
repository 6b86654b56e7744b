use std::collections::{BTreeMap, VecDeque};
use std::net::Ipv4Addr;

use bytes::Bytes;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::world::{Driver, GroupHandle, World};
use super::HarnessError;
use crate::host::{Completion, WorkRequest};
use crate::netsim::SimTime;
use crate::wire::MrInfo;

/// Deterministic message contents.
pub struct Payloads {
    pool: Bytes,
    next: usize,
}

const PAYLOAD_SLACK: usize = 4096;

impl Payloads {
    pub fn new(seed: u64, max_bytes: u64) -> Self {
        let mut buf = vec![0u8; max_bytes as usize + PAYLOAD_SLACK];
        ChaCha8Rng::seed_from_u64(seed ^ 0x7061_796c).fill_bytes(&mut buf);
        Self {
            pool: Bytes::from(buf),
            next: 0,
        }
    }

    /// A fresh message of `len` bytes and its SHA-256.
    pub fn take(&mut self, len: u64) -> (Bytes, [u8; 32]) {
        let off = (self.next * 61) % PAYLOAD_SLACK;
        self.next += 1;
        let b = self.pool.slice(off..off + len as usize);
        let d = Sha256::digest(&b).into();
        (b, d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Route {
    /// Through the group at this index of the driver's group list.
    Group(usize),
    /// Over one unicast connection per destination host.
    Unicast(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    pub src: usize,
    pub route: Route,
    pub bytes: u64,
    pub messages: u32,
}

/// Phases run one after another. Within a phase, chains run concurrently
/// and the transfers of a chain run back to back. A multicast transfer
/// whose source differs from the group's previous source first hands the
/// send role over.
pub type Phase = Vec<Vec<Transfer>>;

pub struct PlanDriver {
    pub groups: Vec<GroupHandle>,
    phases: Vec<Phase>,
    phase: usize,
    cursor: Vec<usize>,
    outstanding: Vec<usize>,
    chains_left: usize,
    waiting: BTreeMap<(usize, usize), (usize, u32)>,
    rc: BTreeMap<(usize, usize), (usize, usize)>,
    expected: BTreeMap<(usize, usize), VecDeque<[u8; 32]>>,
    group_src: Vec<Option<usize>>,
    payloads: Payloads,
    pub started: SimTime,
    pub finished: Option<SimTime>,
    pub phase_ends: Vec<SimTime>,
    pub bytes_sent: u64,
    pub received: u64,
    pub mismatches: u64,
    /// First PSN of every multicast transfer, in start order.
    pub first_psns: Vec<(usize, u32)>,
}

impl PlanDriver {
    pub fn new(groups: Vec<GroupHandle>, phases: Vec<Phase>, seed: u64) -> Self {
        let max = phases
            .iter()
            .flatten()
            .flatten()
            .map(|t| t.bytes)
            .max()
            .unwrap_or(0);
        let n_groups = groups.len();
        Self {
            groups,
            phases,
            phase: 0,
            cursor: Vec::new(),
            outstanding: Vec::new(),
            chains_left: 0,
            waiting: BTreeMap::new(),
            rc: BTreeMap::new(),
            expected: BTreeMap::new(),
            group_src: vec![None; n_groups],
            payloads: Payloads::new(seed, max),
            started: SimTime::ZERO,
            finished: None,
            phase_ends: Vec::new(),
            bytes_sent: 0,
            received: 0,
            mismatches: 0,
            first_psns: Vec::new(),
        }
    }

    pub fn start(&mut self, w: &mut World) -> Result<(), HarnessError> {
        self.started = w.now();
        self.start_phase(w)
    }

    pub fn jct_s(&self) -> Option<f64> {
        self.finished.map(|f| f - self.started)
    }

    fn start_phase(&mut self, w: &mut World) -> Result<(), HarnessError> {
        if self.phase == self.phases.len() {
            self.finished = Some(w.now());
            return Ok(());
        }
        let n = self.phases[self.phase].len();
        self.cursor = vec![0; n];
        self.outstanding = vec![0; n];
        self.chains_left = n;
        for c in 0..n {
            self.start_transfer(w, c)?;
        }
        if n == 0 {
            self.end_phase(w)?;
        }
        Ok(())
    }

    fn end_phase(&mut self, w: &mut World) -> Result<(), HarnessError> {
        self.phase_ends.push(w.now());
        self.phase += 1;
        self.start_phase(w)
    }

    fn start_transfer(&mut self, w: &mut World, chain: usize) -> Result<(), HarnessError> {
        let t = self.phases[self.phase][chain][self.cursor[chain]].clone();
        match &t.route {
            Route::Group(gi) => {
                let g = &self.groups[*gi];
                if let Some(prev) = self.group_src[*gi] {
                    if prev != t.src {
                        w.switch_source(g, prev, t.src)?;
                    }
                }
                self.group_src[*gi] = Some(t.src);
                let qp = g.qps[&t.src];
                self.first_psns.push((t.src, w.hosts[t.src].qp(qp).sq_psn.value()));
                let sinks: Vec<(usize, usize)> = g
                    .qps
                    .iter()
                    .filter(|(&h, _)| h != t.src)
                    .map(|(&h, &q)| (h, q))
                    .collect();
                self.post(w, &t, qp, &sinks)?;
                self.waiting.insert((t.src, qp), (chain, t.messages));
                self.outstanding[chain] = 1;
            }
            Route::Unicast(dsts) => {
                for &d in dsts {
                    let (qa, qb) = *self
                        .rc
                        .entry((t.src, d))
                        .or_insert_with(|| w.connect_rc(t.src, d, crate::wire::Psn::ZERO));
                    self.post(w, &t, qa, &[(d, qb)])?;
                    self.waiting.insert((t.src, qa), (chain, t.messages));
                }
                self.outstanding[chain] = dsts.len();
            }
        }
        w.kick(t.src);
        if self.outstanding[chain] == 0 {
            self.finish_transfer(w, chain)?;
        }
        Ok(())
    }

    fn post(&mut self, w: &mut World, t: &Transfer, qp: usize, sinks: &[(usize, usize)]) -> Result<(), HarnessError> {
        for _ in 0..t.messages {
            let (msg, digest) = self.payloads.take(t.bytes);
            w.hosts[t.src].post_send(qp, WorkRequest::send(msg))?;
            self.bytes_sent += t.bytes;
            for s in sinks {
                self.expected.entry(*s).or_default().push_back(digest);
            }
        }
        Ok(())
    }

    fn finish_transfer(&mut self, w: &mut World, chain: usize) -> Result<(), HarnessError> {
        self.cursor[chain] += 1;
        if self.cursor[chain] < self.phases[self.phase][chain].len() {
            return self.start_transfer(w, chain);
        }
        self.chains_left -= 1;
        if self.chains_left == 0 {
            self.end_phase(w)?;
        }
        Ok(())
    }

    /// Messages still expected at some receiver.
    pub fn undelivered(&self) -> usize {
        self.expected.values().map(VecDeque::len).sum()
    }
}

impl Driver for PlanDriver {
    fn on_completion(&mut self, w: &mut World, host: usize, c: &Completion) -> Result<(), HarnessError> {
        match c {
            Completion::Sent { qp, .. } => {
                let Some((chain, left)) = self.waiting.get_mut(&(host, *qp)) else {
                    return Ok(());
                };
                *left -= 1;
                if *left == 0 {
                    let chain = *chain;
                    self.waiting.remove(&(host, *qp));
                    self.outstanding[chain] -= 1;
                    if self.outstanding[chain] == 0 {
                        self.finish_transfer(w, chain)?;
                    }
                }
            }
            Completion::Received { qp, digest, .. } => {
                self.received += 1;
                match self.expected.get_mut(&(host, *qp)).and_then(VecDeque::pop_front) {
                    Some(d) if d == *digest => {}
                    _ => self.mismatches += 1,
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn done(&self, _w: &World) -> bool {
        self.finished.is_some() && self.undelivered() == 0
    }
}

/// Chunked relay `chain[0] -> chain[1] -> ...` over unicast connections.
/// Every hop waits `hop_delay_s` between receiving a chunk and sending it on;
/// the first hop waits before its first send too.
pub struct RingDriver {
    chain: Vec<usize>,
    links: Vec<(usize, usize)>,
    rx_hop: BTreeMap<(usize, usize), usize>,
    chunks: Vec<(Bytes, [u8; 32])>,
    received: Vec<usize>,
    hop_delay_s: f64,
    pub started: SimTime,
    pub finished: Option<SimTime>,
    pub mismatches: u64,
}

impl RingDriver {
    pub fn new(w: &mut World, chain: Vec<usize>, msg_bytes: u64, chunk_bytes: u64, hop_delay_s: f64, seed: u64) -> Self {
        let mut payloads = Payloads::new(seed, msg_bytes);
        let (msg, _) = payloads.take(msg_bytes);
        let chunk = chunk_bytes.min(msg_bytes).max(1) as usize;
        let chunks = msg
            .chunks(chunk)
            .map(|c| {
                let b = msg.slice_ref(c);
                let d = Sha256::digest(&b).into();
                (b, d)
            })
            .collect();
        let mut links = Vec::new();
        let mut rx_hop = BTreeMap::new();
        for (i, pair) in chain.windows(2).enumerate() {
            let (qa, qb) = w.connect_rc(pair[0], pair[1], crate::wire::Psn::ZERO);
            links.push((qa, qb));
            rx_hop.insert((pair[1], qb), i);
        }
        let hops = links.len();
        Self {
            chain,
            links,
            rx_hop,
            chunks,
            received: vec![0; hops],
            hop_delay_s,
            started: SimTime::ZERO,
            finished: None,
            mismatches: 0,
        }
    }

    pub fn start(&mut self, w: &mut World) {
        self.started = w.now();
        for k in 0..self.chunks.len() {
            w.schedule_hook(w.now() + self.hop_delay_s, tag(0, k));
        }
    }

    pub fn n_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn jct_s(&self) -> Option<f64> {
        self.finished.map(|f| f - self.started)
    }
}

fn tag(hop: usize, chunk: usize) -> u64 {
    (hop as u64) << 32 | chunk as u64
}

impl Driver for RingDriver {
    fn on_completion(&mut self, w: &mut World, host: usize, c: &Completion) -> Result<(), HarnessError> {
        let Completion::Received { qp, digest, .. } = c else {
            return Ok(());
        };
        let Some(&hop) = self.rx_hop.get(&(host, *qp)) else {
            return Ok(());
        };
        let k = self.received[hop];
        self.received[hop] += 1;
        if self.chunks.get(k).map(|c| c.1) != Some(*digest) {
            self.mismatches += 1;
        }
        if hop + 1 < self.links.len() {
            w.schedule_hook(w.now() + self.hop_delay_s, tag(hop + 1, k));
        } else if self.received[hop] == self.chunks.len() {
            self.finished = Some(w.now());
        }
        Ok(())
    }

    fn on_hook(&mut self, w: &mut World, t: u64) -> Result<(), HarnessError> {
        let (hop, k) = ((t >> 32) as usize, (t & 0xFFFF_FFFF) as usize);
        let src = self.chain[hop];
        let chunk = self.chunks[k].0.clone();
        w.hosts[src].post_send(self.links[hop].0, WorkRequest::send(chunk))?;
        w.kick(src);
        Ok(())
    }

    fn done(&self, _w: &World) -> bool {
        self.finished.is_some()
    }
}

/// Closed-loop WRITE IOs from a client to its replicas with a fixed number
/// of IOs outstanding. An IO completes once every replica acknowledged it.
pub struct ReplicationDriver {
    client: usize,
    /// Client QPs the IO is posted on: one group QP, or one per replica.
    qps: Vec<usize>,
    mrs: BTreeMap<Ipv4Addr, MrInfo>,
    io: Bytes,
    depth: u64,
    posted: u64,
    acked: BTreeMap<usize, u64>,
    pub completed: u64,
    pub started: SimTime,
    end: SimTime,
    duration_s: f64,
}

const END_HOOK: u64 = u64::MAX;

impl ReplicationDriver {
    /// `group` selects multicast; otherwise one unicast connection per replica is used.
    #[allow(clippy::too_many_arguments)]
    pub fn new(w: &mut World, client: usize, replicas: &[usize], group: Option<&GroupHandle>, io_bytes: u64, depth: u32, duration_s: f64, seed: u64) -> Self {
        let mut mrs = BTreeMap::new();
        for &r in replicas {
            let info = w.hosts[r].register_mr(io_bytes as usize);
            mrs.insert(w.host_ip(r), info);
        }
        let qps = match group {
            Some(g) => vec![g.qps[&client]],
            None => replicas
                .iter()
                .map(|&r| w.connect_rc(client, r, crate::wire::Psn::ZERO).0)
                .collect(),
        };
        let (io, _) = Payloads::new(seed, io_bytes).take(io_bytes);
        Self {
            client,
            acked: qps.iter().map(|&q| (q, 0)).collect(),
            qps,
            mrs,
            io,
            depth: u64::from(depth),
            posted: 0,
            completed: 0,
            started: SimTime::ZERO,
            end: SimTime::ZERO,
            duration_s,
        }
    }

    pub fn start(&mut self, w: &mut World) -> Result<(), HarnessError> {
        self.started = w.now();
        self.end = w.now() + self.duration_s;
        w.schedule_hook(self.end, END_HOOK);
        self.fill(w)
    }

    fn fill(&mut self, w: &mut World) -> Result<(), HarnessError> {
        while self.posted - self.completed < self.depth {
            for &q in &self.qps {
                let wr = WorkRequest::write(self.io.clone(), self.mrs.clone());
                w.hosts[self.client].post_send(q, wr)?;
            }
            self.posted += 1;
        }
        w.kick(self.client);
        Ok(())
    }

    pub fn iops_proxy(&self) -> f64 {
        self.completed as f64 / self.duration_s
    }
}

impl Driver for ReplicationDriver {
    fn on_completion(&mut self, w: &mut World, host: usize, c: &Completion) -> Result<(), HarnessError> {
        let Completion::Sent { qp, .. } = c else {
            return Ok(());
        };
        if host != self.client || w.now() > self.end {
            return Ok(());
        }
        if let Some(n) = self.acked.get_mut(qp) {
            *n += 1;
            let done = self.acked.values().copied().min().unwrap_or(0);
            if done > self.completed {
                self.completed = done;
                self.fill(w)?;
            }
        }
        Ok(())
    }

    fn done(&self, w: &World) -> bool {
        w.now() >= self.end && self.end > self.started
    }
}

/// Waits until every group is registered and all member QPs are ready.
pub struct WaitReady<'a>(pub &'a [GroupHandle]);

impl Driver for WaitReady<'_> {
    fn on_completion(&mut self, _w: &mut World, _host: usize, _c: &Completion) -> Result<(), HarnessError> {
        Ok(())
    }

    fn done(&self, w: &World) -> bool {
        self.0.iter().all(|g| w.group_ready(g))
    }
}
