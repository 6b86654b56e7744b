use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use proptest::prelude::*;
use sha2::{Digest, Sha256};

use super::*;
use crate::switch::{decode_mr_list, is_mr_update};
use crate::wire::{DataOp, PacketKind};

const SRC: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
const DST: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);

fn group() -> GroupIp {
    GroupIp::new(Ipv4Addr::new(239, 0, 0, 7)).unwrap()
}

fn qp(psn: u32) -> QueuePair {
    let mut q = QueuePair::new(&HostConfig::default(), Qpn::new(0x100), DST, Qpn::new(0x200), MacAddr::ZERO, Psn::new(psn));
    q.ready = true;
    q
}

fn drain(q: &mut QueuePair) -> Vec<Packet> {
    let mut out = Vec::new();
    while let Some(p) = q.next_packet(0.0, SRC, MacAddr::ZERO) {
        out.push(p);
    }
    out
}

fn psns(ps: &[Packet]) -> Vec<u32> {
    ps.iter().map(|p| p.psn().unwrap().value()).collect()
}

fn data(psn: u32, last: bool, payload: &'static [u8]) -> Packet {
    let mut q = qp(psn);
    q.post_send(&HostConfig::default(), WorkRequest::send(payload)).unwrap();
    let mut p = drain(&mut q).remove(0);
    let d = match &mut p.body {
        Body::Data(d) => d,
        _ => unreachable!(),
    };
    d.bth.last = last;
    d.bth.ack_req = last;
    p
}

fn rx(q: &mut QueuePair, p: &Packet) -> Vec<(PacketKind, u32)> {
    let mut mrs = BTreeMap::new();
    q.on_data(&HostConfig::default(), 0.0, p, &mut mrs, DST, MacAddr::ZERO)
        .iter()
        .map(|f| (f.kind(), f.psn().unwrap().value()))
        .collect()
}

#[test]
fn send_is_segmented_with_consecutive_psns() {
    let mut q = qp(40);
    q.post_send(&HostConfig::default(), WorkRequest::send(vec![7u8; 4096])).unwrap();
    let ps = drain(&mut q);
    assert_eq!(psns(&ps), vec![40, 41, 42, 43]);
    let flags: Vec<_> = ps.iter().map(|p| p.bth().unwrap().ack_req).collect();
    assert_eq!(flags, vec![false, false, false, true]);
    assert!(ps.iter().all(|p| p.as_data().unwrap().payload.len() == 1024));
    assert_eq!(q.sq_psn, Psn::new(44));
}

#[test]
fn post_send_errors() {
    let mut q = qp(0);
    q.ready = false;
    assert_eq!(q.post_send(&HostConfig::default(), WorkRequest::send(vec![1u8])), Err(HostError::NotRegistered));
    let mut q = qp(0);
    let wr = WorkRequest::write(vec![1u8], BTreeMap::new());
    assert_eq!(q.post_send(&HostConfig::default(), wr), Err(HostError::MissingMr(DST)));
}

#[test]
fn zero_byte_send_consumes_one_psn_and_is_delivered_once() {
    let mut tx = qp(9);
    tx.post_send(&HostConfig::default(), WorkRequest::send(Vec::<u8>::new())).unwrap();
    let ps = drain(&mut tx);
    assert_eq!(psns(&ps), vec![9]);
    assert!(ps[0].as_data().unwrap().payload.is_empty());
    let mut r = qp(9);
    assert_eq!(rx(&mut r, &ps[0]), vec![(PacketKind::Ack, 9)]);
    assert_eq!(rx(&mut r, &ps[0]), vec![(PacketKind::Ack, 9)]);
    let d = r.take_delivered();
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].len, 0);
    assert_eq!(d[0].digest, <[u8; 32]>::from(Sha256::digest(b"")));
}

#[test]
fn multicast_write_emits_mr_update_first() {
    let cfg = HostConfig::default();
    let mut q = qp(5);
    q.group = Some(group());
    q.dest_ip = group().addr();
    let mrs: BTreeMap<_, _> = (2..5)
        .map(|i| (Ipv4Addr::new(10, 0, 0, i), MrInfo { va: 0x1000 * u64::from(i), rkey: i.into() }))
        .collect();
    q.post_send(&cfg, WorkRequest::write(vec![3u8; 3000], mrs.clone())).unwrap();
    let ps = drain(&mut q);
    assert_eq!(ps.len(), 4);
    let first = ps[0].as_data().unwrap();
    assert!(is_mr_update(first));
    assert_eq!(decode_mr_list(&first.payload).unwrap(), mrs.into_iter().collect::<Vec<_>>());
    assert_eq!(psns(&ps), vec![5, 5, 6, 7]);
    match ps[1].as_data().unwrap().op {
        DataOp::WriteFirst(r) => assert_eq!((r.va, r.rkey, r.dma_len), (0, 0, 3000)),
        _ => panic!("expected WRITE first"),
    }
    assert_eq!(ps[2].as_data().unwrap().op, DataOp::WriteMiddle);
    assert_eq!(ps[3].as_data().unwrap().op, DataOp::WriteLast);
    assert_eq!(q.stats.mr_updates_sent, 1);

    // go-back-N over the WRITE-first re-emits the MR-update ahead of it
    assert!(q.on_nack(Psn::new(5)));
    let again = drain(&mut q);
    assert_eq!(psns(&again), vec![5, 5, 6, 7]);
    assert!(is_mr_update(again[0].as_data().unwrap()));
    // but not when the WRITE-first was already acknowledged
    assert!(q.on_nack(Psn::new(6)));
    let tail = drain(&mut q);
    assert_eq!(psns(&tail), vec![6, 7]);
}

#[test]
fn receiver_in_order_gap_and_duplicate() {
    let mut r = qp(5);
    assert_eq!(rx(&mut r, &data(5, false, b"a")), vec![(PacketKind::Ack, 5)]);
    assert_eq!(r.rq_psn, Psn::new(6));
    assert_eq!(rx(&mut r, &data(7, false, b"c")), vec![(PacketKind::Nack, 6)]);
    assert!(r.nack_armed);
    assert_eq!(rx(&mut r, &data(8, false, b"d")), vec![]);
    assert_eq!(rx(&mut r, &data(3, false, b"x")), vec![(PacketKind::Ack, 5)]);
    assert_eq!(rx(&mut r, &data(6, false, b"b")), vec![(PacketKind::Ack, 6)]);
    assert!(!r.nack_armed);
    assert_eq!(r.stats.delivered_pkts, 2);
    assert_eq!(r.stats.duplicates, 1);
    assert_eq!(r.stats.out_of_order, 2);
}

#[test]
fn ack_coalescing() {
    let cfg = HostConfig {
        ack_coalesce: 3,
        ..Default::default()
    };
    let mut r = QueuePair::new(&cfg, Qpn::new(1), DST, Qpn::new(2), MacAddr::ZERO, Psn::ZERO);
    let mut mrs = BTreeMap::new();
    let mut acks = Vec::new();
    for i in 0..5 {
        let fb = r.on_data(&cfg, 0.0, &data(i, i == 4, b"z"), &mut mrs, DST, MacAddr::ZERO);
        acks.extend(fb.iter().map(|p| p.psn().unwrap().value()));
    }
    assert_eq!(acks, vec![2, 4]);
}

#[test]
fn cnp_is_paced_per_qp() {
    let cfg = HostConfig::default();
    let mut r = QueuePair::new(&cfg, Qpn::new(1), DST, Qpn::new(2), MacAddr::ZERO, Psn::ZERO);
    let mut mrs = BTreeMap::new();
    let mut cnps = 0;
    for (i, t) in [0.0, 10e-6, 49e-6, 50e-6, 60e-6].into_iter().enumerate() {
        let mut p = data(i as u32, false, b"q");
        p.ip.ecn = Ecn::Ce;
        let fb = r.on_data(&cfg, t, &p, &mut mrs, DST, MacAddr::ZERO);
        cnps += fb.iter().filter(|f| f.kind() == PacketKind::Cnp).count();
    }
    assert_eq!(cnps, 2);
}

#[test]
fn ack_handling() {
    let cfg = HostConfig::default();
    let mut q = qp(0);
    q.post_send(&cfg, WorkRequest::send(vec![0u8; 10 * 1024])).unwrap();
    drain(&mut q);
    assert!(q.on_ack(Psn::new(3)));
    assert!(q.on_ack(Psn::new(6)));
    assert_eq!(q.acked_psn, Psn::new(6));
    assert!(!q.on_ack(Psn::new(4)));
    assert_eq!(q.acked_psn, Psn::new(6));
    assert_eq!(q.unacked(), 3);
    assert!(!q.on_ack(Psn::new(50)), "ACK beyond what was sent");
    assert!(q.on_ack(Psn::new(9)));
    assert_eq!(q.take_sent(), vec![0]);

    let mut w = qp(0xFFFFFD);
    w.post_send(&cfg, WorkRequest::send(vec![0u8; 6 * 1024])).unwrap();
    drain(&mut w);
    assert!(w.on_ack(Psn::new(0xFFFFFE)));
    assert!(w.on_ack(Psn::new(0x000002)));
    assert_eq!(w.acked_psn, Psn::new(2));
}

#[test]
fn nack_go_back_n() {
    let cfg = HostConfig::default();
    let mut q = qp(5);
    q.post_send(&cfg, WorkRequest::send(vec![0u8; 5 * 1024])).unwrap();
    assert_eq!(psns(&drain(&mut q)), vec![5, 6, 7, 8, 9]);
    assert!(q.on_nack(Psn::new(7)));
    assert_eq!(q.acked_psn, Psn::new(6));
    assert_eq!(psns(&drain(&mut q)), vec![7, 8, 9]);
    assert_eq!(q.stats.retransmissions, 3);

    // stale NACK after a later ACK
    q.on_ack(Psn::new(7));
    assert!(!q.on_nack(Psn::new(5)));
    assert_eq!(q.acked_psn, Psn::new(7));
    assert!(drain(&mut q).is_empty());

    // NACK for the next unsent PSN acknowledges everything
    assert!(q.on_nack(q.sq_psn));
    assert_eq!(q.acked_psn, Psn::new(9));
    assert!(q.is_quiesced());
    assert!(drain(&mut q).is_empty());
}

#[test]
fn rto_retransmits_and_backs_off() {
    let cfg = HostConfig::default();
    let mut q = qp(5);
    q.post_send(&cfg, WorkRequest::send(vec![0u8; 5 * 1024])).unwrap();
    drain(&mut q);
    q.rto_armed = true;
    let base = q.current_rto();
    assert!(q.rto_expire(&cfg, q.rto_token));
    assert_eq!(psns(&drain(&mut q)), vec![5, 6, 7, 8, 9]);
    assert_eq!(q.current_rto(), 2.0 * base);
    q.rto_armed = true;
    assert!(!q.rto_expire(&cfg, q.rto_token + 1), "stale token");
    assert!(q.rto_expire(&cfg, q.rto_token));
    assert_eq!(q.current_rto(), 4.0 * base);
    for _ in 0..10 {
        q.rto_armed = true;
        q.rto_expire(&cfg, q.rto_token);
    }
    assert_eq!(q.current_rto(), 16.0 * base);

    q.on_ack(Psn::new(9));
    assert_eq!(q.current_rto(), base);
    q.rto_armed = true;
    assert!(!q.rto_expire(&cfg, q.rto_token), "nothing outstanding");
}

#[test]
fn rate_control() {
    let cfg = HostConfig {
        line_rate_bps: 100.0,
        rate_min_bps: 10.0,
        rate_ai_bps: 5.0,
        ..Default::default()
    };
    let mut q = QueuePair::new(&cfg, Qpn::new(1), DST, Qpn::new(2), MacAddr::ZERO, Psn::ZERO);
    q.on_cnp(&cfg);
    assert_eq!(q.rate_bps, 50.0);
    for _ in 0..5 {
        q.on_cnp(&cfg);
    }
    assert_eq!(q.rate_bps, 10.0);
    q.on_cnp(&cfg);
    assert_eq!(q.rate_bps, 10.0);
    for k in 1..=3 {
        assert!(q.rate_recover(&cfg));
        assert_eq!(q.rate_bps, 10.0 + 5.0 * f64::from(k));
    }
    while q.rate_recover(&cfg) {}
    assert_eq!(q.rate_bps, 100.0);
}

#[test]
fn source_switch_example() {
    let cfg = HostConfig::default();
    let mut a = qp(0);
    let mut b = qp(0);
    a.sq_psn = Psn::new(100);
    a.acked_psn = Psn::new(99);
    b.rq_psn = Psn::new(100);
    switch_source(&mut a, &mut b).unwrap();
    assert_eq!(b.sq_psn, Psn::new(100));
    assert_eq!(a.rq_psn, Psn::new(100));

    let mut c = qp(7);
    let mut d = qp(7);
    switch_source(&mut c, &mut d).unwrap();
    assert_eq!((c.sq_psn, c.rq_psn, d.sq_psn, d.rq_psn), (Psn::new(7), Psn::new(7), Psn::new(7), Psn::new(7)));

    b.post_send(&cfg, WorkRequest::send(vec![1u8])).unwrap();
    assert_eq!(switch_source(&mut a, &mut b), Err(HostError::NotQuiesced));
}

fn membership(n: u32) -> GroupMembership {
    let members = (0..n)
        .map(|i| EnvelopeEntry {
            ip: Ipv4Addr::from(0x0A00_0000 + i + 1),
            qpn: Qpn::new(0x100 + i),
        })
        .collect();
    GroupMembership::new(group(), SRC, members)
}

#[test]
fn envelope_partitioning() {
    let counts = |n| {
        build_envelopes(&membership(n), MacAddr::ZERO, Psn::new(10))
            .unwrap()
            .iter()
            .map(|p| {
                let e = p.as_envelope().unwrap();
                (e.seq, e.total, e.entries.len())
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(counts(3), vec![(1, 1, 3)]);
    assert_eq!(counts(183), vec![(1, 1, 183)]);
    assert_eq!(counts(184), vec![(1, 2, 183), (2, 2, 1)]);
    assert_eq!(build_envelopes(&membership(0), MacAddr::ZERO, Psn::ZERO), Err(HostError::NoMembers));

    let ps = build_envelopes(&membership(184), MacAddr::ZERO, Psn::new(0)).unwrap();
    assert_eq!(ps[0].envelope_init_ack_psn(), Some(Psn::MAX));
    assert_eq!(ps[1].envelope_init_ack_psn(), None);
    assert!(ps.iter().all(|p| p.ip.dst == group().addr()));
}

#[test]
fn envelope_confirmation_and_readiness() {
    let mut master = Host::new(SRC, MacAddr::from_index(1), HostConfig::default());
    let mut member = Host::new(DST, MacAddr::from_index(2), HostConfig::default());
    let (mq, mqpn) = master.create_group_qp(group(), Psn::new(0));
    let (rq, rqpn) = member.create_group_qp(group(), Psn::new(0));
    let g = GroupMembership::new(
        group(),
        SRC,
        vec![EnvelopeEntry { ip: SRC, qpn: mqpn }, EnvelopeEntry { ip: DST, qpn: rqpn }],
    );
    let env = master.master_register(SimTime::ZERO, g, Psn::new(50)).unwrap();
    assert_eq!(env.len(), 1);

    let conf = member.on_packet(SimTime::ZERO, &env[0]);
    assert_eq!(conf.len(), 1);
    assert_eq!(conf[0].ip.dst, SRC);
    assert_eq!(conf[0].kind(), PacketKind::Ack);
    let again = member.on_packet(SimTime::ZERO, &env[0]);
    assert_eq!(again, conf, "confirmation is re-sent on replay");
    assert_eq!(member.take_completions(), vec![Completion::Ready { qp: rq }]);
    assert_eq!(member.qp(rq).rq_psn, Psn::new(50));

    let mut stranger = Host::new(Ipv4Addr::new(10, 0, 0, 9), MacAddr::ZERO, HostConfig::default());
    assert!(stranger.on_packet(SimTime::ZERO, &env[0]).is_empty());

    assert!(master.on_packet(SimTime::ZERO, &conf[0]).is_empty());
    assert!(master.take_completions().is_empty());
    assert!(master.on_packet(SimTime::ZERO, &env[0]).is_empty());
    assert_eq!(
        master.take_completions(),
        vec![Completion::Ready { qp: mq }, Completion::Registered { group: group() }]
    );
    assert!(master.membership(group()).unwrap().is_complete());
    master.on_packet(SimTime::ZERO, &conf[0]);
    assert!(master.take_completions().is_empty());
}

#[test]
fn register_timer_resends_until_complete() {
    let mut master = Host::new(SRC, MacAddr::from_index(1), HostConfig::default());
    master.master_register(SimTime::ZERO, membership(2), Psn::ZERO).unwrap();
    let timers = master.take_timers();
    assert_eq!(timers.len(), 1);
    let resent = master.on_timer(timers[0].0, timers[0].1);
    assert_eq!(resent.len(), 1);
    assert_eq!(master.stats.envelopes_sent, 2);
}

#[test]
fn write_is_validated_against_local_mr() {
    let cfg = HostConfig::default();
    let mut host = Host::new(DST, MacAddr::ZERO, cfg.clone());
    let mr = host.register_mr(4096);
    let (r, rqpn) = host.create_qp(SRC, Qpn::new(0x100), MacAddr::ZERO, Psn::ZERO);

    let mut tx = qp(0);
    tx.dest_qpn = rqpn;
    let msg: Vec<u8> = (0..2000u32).map(|i| i as u8).collect();
    let mrs = BTreeMap::from([(DST, MrInfo { va: mr.va + 100, rkey: mr.rkey })]);
    tx.post_send(&cfg, WorkRequest::write(msg.clone(), mrs)).unwrap();
    for p in drain(&mut tx) {
        host.on_packet(SimTime::ZERO, &p);
    }
    assert_eq!(&host.mr(mr.rkey).unwrap().buffer[100..2100], &msg[..]);
    assert_eq!(host.qp(r).stats.delivered_pkts, 2);

    let mut bad = qp(2);
    bad.dest_qpn = rqpn;
    let mrs = BTreeMap::from([(DST, MrInfo { va: mr.va, rkey: mr.rkey + 7 })]);
    bad.post_send(&cfg, WorkRequest::write(vec![1u8; 10], mrs)).unwrap();
    for p in drain(&mut bad) {
        assert!(host.on_packet(SimTime::ZERO, &p).is_empty());
    }
    let overflow = BTreeMap::from([(DST, MrInfo { va: mr.va + 4000, rkey: mr.rkey })]);
    bad.post_send(&cfg, WorkRequest::write(vec![1u8; 200], overflow)).unwrap();
    bad.on_nack(Psn::new(2));
    drain(&mut bad);
    assert_eq!(host.qp(r).stats.rejected, 1);
    assert_eq!(host.qp(r).rq_psn, Psn::new(2));
}

#[test]
fn unknown_qpn_is_counted() {
    let mut host = Host::new(DST, MacAddr::ZERO, HostConfig::default());
    host.on_packet(SimTime::ZERO, &data(0, true, b"x"));
    assert_eq!(host.stats.unknown_qpn_drops, 1);
}

#[test]
fn pacer_respects_rate_and_round_robin() {
    let cfg = HostConfig {
        line_rate_bps: 1e9,
        ..Default::default()
    };
    let mut h = Host::new(SRC, MacAddr::ZERO, cfg);
    let (a, _) = h.create_qp(DST, Qpn::new(2), MacAddr::ZERO, Psn::ZERO);
    let (b, _) = h.create_qp(DST, Qpn::new(3), MacAddr::ZERO, Psn::ZERO);
    h.post_send(a, WorkRequest::send(vec![0u8; 2048])).unwrap();
    h.post_send(b, WorkRequest::send(vec![0u8; 2048])).unwrap();
    let mut order = Vec::new();
    for _ in 0..2 {
        match h.poll_tx(SimTime::ZERO) {
            TxPoll::Packet(p) => order.push(p.bth().unwrap().dst_qpn.value()),
            other => panic!("{other:?}"),
        }
    }
    assert_eq!(order, vec![2, 3]);
    let TxPoll::Wait(t) = h.poll_tx(SimTime::ZERO) else {
        panic!("expected pacing wait");
    };
    let gap = (1024 + 14 + 20 + 8 + 12) as f64 * 8.0 / 1e9;
    assert!((t.as_secs() - gap).abs() < 1e-15);
    assert_eq!(h.take_timers().len(), 2, "one RTO per QP");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Lossy loopback between two QPs: the receiver reassembles the exact
    /// message, PSNs are delivered once each in order, and the sender never
    /// regresses or exceeds its window.
    #[test]
    fn lossy_loopback_delivers_exactly_once(
        len in 0usize..20_000,
        start in prop_oneof![Just(0xFFFFF0u32), 0u32..0x1000000],
        drops in proptest::collection::vec(any::<bool>(), 64),
        window in 1u32..16,
    ) {
        let cfg = HostConfig { window, ..Default::default() };
        let mut tx = QueuePair::new(&cfg, Qpn::new(1), DST, Qpn::new(2), MacAddr::ZERO, Psn::new(start));
        tx.ready = true;
        let mut r = QueuePair::new(&cfg, Qpn::new(2), SRC, Qpn::new(1), MacAddr::ZERO, Psn::new(start));
        let msg: Vec<u8> = (0..len).map(|i| (i * 31 % 251) as u8).collect();
        tx.post_send(&cfg, WorkRequest::send(msg.clone())).unwrap();
        let mut mrs = BTreeMap::new();
        let mut k = 0usize;
        let lossy = |k: &mut usize| { *k += 1; drops[*k % drops.len()] && *k < 4 * drops.len() };
        let mut expected = Psn::new(start);
        let mut delivered_prev = 0;
        for _round in 0..10_000 {
            let mut progressed = false;
            while let Some(p) = tx.next_packet(0.0, SRC, MacAddr::ZERO) {
                prop_assert!(tx.unacked() <= window as usize);
                if lossy(&mut k) { continue; }
                for fb in r.on_data(&cfg, 0.0, &p, &mut mrs, DST, MacAddr::ZERO) {
                    if lossy(&mut k) { continue; }
                    let before = tx.acked_psn;
                    match fb.body {
                        Body::Ack(a) => { tx.on_ack(a.bth.psn); }
                        Body::Nack(b) => { tx.on_nack(b.psn); }
                        _ => {}
                    }
                    prop_assert!(before == tx.acked_psn || crate::psn::psn_newer_exact(tx.acked_psn, before).unwrap());
                    progressed = true;
                }
                if r.stats.delivered_pkts > delivered_prev {
                    prop_assert_eq!(r.rq_psn, expected.next());
                    expected = expected.next();
                    delivered_prev = r.stats.delivered_pkts;
                }
            }
            if tx.is_quiesced() { break; }
            if !progressed {
                tx.rto_armed = true;
                tx.rto_expire(&cfg, tx.rto_token);
            }
        }
        prop_assert!(tx.is_quiesced());
        let d = r.take_delivered();
        prop_assert_eq!(d.len(), 1);
        prop_assert_eq!(d[0].len as usize, len);
        prop_assert_eq!(d[0].digest, <[u8; 32]>::from(Sha256::digest(&msg)));
        prop_assert_eq!(tx.take_sent(), vec![0]);
    }
}
