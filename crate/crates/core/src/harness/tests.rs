use super::*;
use crate::netsim::{build_star, LinkParams};

fn scenario(workload: &str, extra: &str) -> Scenario {
    let text = format!(
        r#"
name = "t"
seed = 3
{extra}
[topology]
kind = "star"
hosts = 4
[workload]
{workload}
"#
    );
    Scenario::from_toml(&text).unwrap()
}

fn star(hosts: usize, workload: &str, extra: &str) -> Scenario {
    let text = format!(
        "name = \"t\"\nseed = 3\n{extra}\n[topology]\nkind = \"star\"\nhosts = {hosts}\n[workload]\n{workload}\n"
    );
    Scenario::from_toml(&text).unwrap()
}

fn metric(r: &MetricsReport, name: &str) -> f64 {
    r.get(name).unwrap_or_else(|| panic!("missing metric {name}"))
}

#[test]
fn bcast_delivers_and_conserves() {
    let r = run(&scenario("kind = \"bcast\"\nmsg_bytes = 1048576", "")).unwrap();
    assert_eq!(metric(&r, "checksum_ok"), 1.0);
    assert_eq!(metric(&r, "rx.messages"), 3.0);
    assert_eq!(metric(&r, "fabric.conserved"), 1.0);
    assert_eq!(metric(&r, "fabric.in_flight"), 0.0);
    assert_eq!(metric(&r, "retransmissions"), 0.0);
    assert_eq!(metric(&r, "switch.errors"), 0.0);
    assert!(metric(&r, "registration_s") > 0.0);
    let g = metric(&r, "goodput_bps");
    assert!(g > 80e9 && g < 100e9, "goodput {g}");
}

#[test]
fn bcast_time_independent_of_receiver_count() {
    let wl = "kind = \"bcast\"\nmsg_bytes = 1048576";
    let small = metric(&run(&star(3, wl, "")).unwrap(), "jct_s");
    let large = metric(&run(&star(9, wl, "")).unwrap(), "jct_s");
    assert!((large / small - 1.0).abs() < 0.05, "{small} vs {large}");
}

#[test]
fn multi_unicast_scales_with_receivers() {
    let wl = "kind = \"multi_unicast\"\nmsg_bytes = 524288";
    let two = metric(&run(&star(3, wl, "")).unwrap(), "jct_s");
    let four = metric(&run(&star(5, wl, "")).unwrap(), "jct_s");
    let ratio = four / two;
    assert!(ratio > 1.8 && ratio < 2.2, "ratio {ratio}");
}

#[test]
fn single_copy_replication_matches_unicast() {
    let base = "kind = \"replication\"\nio_bytes = 65536\nn_copies = 1\nduration_s = 1e-3";
    let a = run(&scenario(base, "")).unwrap();
    let b = run(&scenario(&format!("{base}\ntransport = \"unicast\""), "")).unwrap();
    assert_eq!(metric(&a, "iops_proxy"), metric(&b, "iops_proxy"));
    assert!(a.get("registration_s").is_none());
}

#[test]
fn replication_multicast_beats_unicast() {
    let base = "kind = \"replication\"\nio_bytes = 65536\nn_copies = 3\nduration_s = 1e-3";
    let g = metric(&run(&scenario(base, "")).unwrap(), "iops_proxy");
    let u = metric(&run(&scenario(&format!("{base}\ntransport = \"unicast\""), "")).unwrap(), "iops_proxy");
    assert!(g / u > 2.5, "{g} vs {u}");
}

#[test]
fn ring_overlay_respects_bound() {
    let sc = scenario("kind = \"ring_overlay\"\nmsg_bytes = 1048576\nchunk_bytes = 65536", "");
    let r = run(&sc).unwrap();
    assert_eq!(metric(&r, "checksum_ok"), 1.0);
    assert_eq!(metric(&r, "chunks"), 16.0);
    let link = LinkParams::default();
    let path = 2.0 * link.prop_delay_s + sc.sim.proc_delay_s;
    let bound = ring_overlay_bound(1 << 20, 65536, 3, link.bandwidth_bps, sc.sim.hop_delay_s, path, 1024);
    let jct = metric(&r, "jct_s");
    assert!(jct >= bound * 0.999, "{jct} below bound {bound}");
    assert!(jct <= bound * 1.25, "{jct} far above bound {bound}");
}

#[test]
fn ring_bound_closed_form() {
    // 4 chunks of 1000 B, one packet each at 8 Gbps: 1054 B -> 1.054 us per chunk.
    let b = ring_overlay_bound(4000, 1000, 2, 8e9, 1e-6, 0.5e-6, 1024);
    let expect = 2.0 * 1.5e-6 + 5.0 * 1.054e-6;
    assert!((b - expect).abs() < 1e-12, "{b} vs {expect}");
    // chunk larger than the message collapses to one chunk
    let one = ring_overlay_bound(100, 1000, 1, 8e9, 0.0, 0.0, 1024);
    assert!((one - 154.0 / 1e9).abs() < 1e-15);
}

#[test]
fn base_rtt_matches_hand_computation() {
    let topo = build_star(4, LinkParams::default()).unwrap();
    assert_eq!(host_diameter(&topo), 2);
    let data = (1024.0 + 54.0) * 8.0 / 100e9;
    let ack = (54.0 + 4.0) * 8.0 / 100e9;
    let expect = 2.0 * (2e-6 + data + ack) + 2.0 * 300e-9;
    assert!((base_rtt_s(&topo, 1024, 300e-9) - expect).abs() < 1e-15);
}

#[test]
fn source_switch_continues_psn() {
    let r = run(&scenario("kind = \"source_switch\"\npackets_per_source = 100\nsources = [0, 1, 2]", "")).unwrap();
    assert_eq!(metric(&r, "first_psn.000.host0"), 0.0);
    assert_eq!(metric(&r, "first_psn.001.host1"), 100.0);
    assert_eq!(metric(&r, "first_psn.002.host2"), 200.0);
    assert_eq!(metric(&r, "host.nacks_sent"), 0.0);
    assert_eq!(metric(&r, "switch.source_switches"), 2.0);
}

#[test]
fn hpl_multicast_faster_than_unicast() {
    let wl = "kind = \"hpl\"\nn = 3\npb_bytes = 262144\nrs_bytes = 262144";
    let g = run(&star(9, wl, "")).unwrap();
    let u = run(&star(9, &format!("{wl}\ntransport = \"unicast\""), "")).unwrap();
    assert_eq!(metric(&g, "checksum_ok"), 1.0);
    assert_eq!(metric(&u, "checksum_ok"), 1.0);
    assert!(metric(&g, "jct_s") < metric(&u, "jct_s"));
}

#[test]
fn lossy_bcast_recovers() {
    let r = run(&scenario("kind = \"bcast\"\nmsg_bytes = 2097152", "loss_rate = 1e-3")).unwrap();
    assert_eq!(metric(&r, "checksum_ok"), 1.0);
    assert!(metric(&r, "drops.loss") > 0.0);
    assert!(metric(&r, "retransmissions") > 0.0);
    assert_eq!(metric(&r, "fabric.conserved"), 1.0);
}

#[test]
fn sweep_normalizes_against_lossless_seed() {
    let sc = scenario("kind = \"bcast\"\nmsg_bytes = 262144", "");
    let out = sweep(&sc, &[0.0, 1e-3], 2).unwrap();
    assert_eq!(out.len(), 4);
    assert_eq!(out[0].loss_rate, 0.0);
    assert_eq!(out[0].seed, derived_seed(3, 0));
    assert_eq!(out[1].seed, derived_seed(3, 1));
    assert_eq!(out[2].seed, out[0].seed);
    for r in &out[..2] {
        assert_eq!(metric(r, "normalized_goodput"), 1.0);
    }
    assert_eq!(mean_at(&out, 0.0, "normalized_goodput"), Some(1.0));
    assert!(mean_at(&out, 1e-3, "normalized_goodput").unwrap() <= 1.0);
    // only the lossy rate requested: the baseline still runs
    let only = sweep(&sc, &[1e-3], 2).unwrap();
    assert_eq!(only.len(), 2);
    assert_eq!(csv_string(&only).unwrap(), csv_string(&out[2..]).unwrap());
    assert!(sweep(&sc, &[2.0], 1).is_err());
    assert!(sweep(&sc, &[0.0], 0).is_err());
}

#[test]
fn runs_are_deterministic() {
    let sc = scenario("kind = \"bcast\"\nmsg_bytes = 524288", "loss_rate = 1e-3");
    let a = csv_string(&[run(&sc).unwrap()]).unwrap();
    let b = csv_string(&[run(&sc).unwrap()]).unwrap();
    assert_eq!(a, b);
    let mut other = sc.clone();
    other.seed = 4;
    assert_ne!(a, csv_string(&[run(&other).unwrap()]).unwrap());
}

#[test]
fn exceeding_time_limit_is_deadlock() {
    let sc = scenario("kind = \"bcast\"\nmsg_bytes = 1048576", "[sim]\nmax_sim_time_s = 10e-6");
    let e = run(&sc).unwrap_err();
    assert!(matches!(e, HarnessError::Deadlock { .. }), "{e}");
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn invalid_scenarios_are_rejected() {
    let cases = [
        ("kind = \"bcast\"\nmsg_bytes = 0", ""),
        ("kind = \"bcast\"\nmsg_bytes = 10", "[group]\nmembers = [0, 7]"),
        ("kind = \"bcast\"\nmsg_bytes = 10", "[group]\nmembers = [1, 1]\nmaster = 1"),
        ("kind = \"bcast\"\nmsg_bytes = 10", "[group]\nmembers = [1, 2]"),
        ("kind = \"bcast\"\nmsg_bytes = 10", "[group]\nmembers = [0]"),
        ("kind = \"bcast\"\nmsg_bytes = 10", "[group]\ngroup_ip = \"10.0.0.1\""),
        ("kind = \"ring_overlay\"\nmsg_bytes = 10\nchunk_bytes = 0", ""),
        ("kind = \"replication\"\nio_bytes = 10\nn_copies = 4\nduration_s = 1e-3", ""),
        ("kind = \"hpl\"\nn = 3\npb_bytes = 1\nrs_bytes = 1", ""),
        ("kind = \"source_switch\"\npackets_per_source = 1\nsources = []", ""),
        ("kind = \"bcast\"\nmsg_bytes = 10", "[host]\nmtu_payload = 0"),
        ("kind = \"bcast\"\nmsg_bytes = 10", "[sim]\nage_interval_s = 0.0"),
    ];
    for (wl, extra) in cases {
        let sc = scenario(wl, extra);
        let e = sc.validate().unwrap_err();
        assert_eq!(e.exit_code(), 2, "{wl} {extra}: {e}");
    }
    let text = "name = \"t\"\nseed = 1\nloss_rate = 1.5\n[topology]\nkind = \"star\"\nhosts = 4\n[workload]\nkind = \"bcast\"\nmsg_bytes = 1\n";
    assert!(Scenario::from_toml(text).unwrap().validate().is_err());
    assert!(Scenario::from_toml("name = 1").is_err());
    assert!(Scenario::from_toml(&text.replace("seed = 1", "seed = 1\nbogus = 2")).is_err());
}

#[test]
fn timers_derive_from_base_rtt() {
    let sc = scenario("kind = \"bcast\"\nmsg_bytes = 10", "");
    assert!((sc.host_config(10e-6).rto_s - 30e-6).abs() < 1e-15);
    let pinned = scenario("kind = \"bcast\"\nmsg_bytes = 10", "[host]\nrto_s = 1e-3");
    assert_eq!(pinned.host_config(10e-6).rto_s, 1e-3);
    assert!((sc.sim_config(10e-6).age_interval_s - 40e-6).abs() < 1e-15);
    let aged = scenario("kind = \"bcast\"\nmsg_bytes = 10", "[sim]\nage_interval_s = 1e-3");
    assert_eq!(aged.sim_config(10e-6).age_interval_s, 1e-3);
}

#[test]
fn reports_round_trip_through_files() {
    let r = run(&scenario("kind = \"bcast\"\nmsg_bytes = 4096", "")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_reports(dir.path(), "metrics", std::slice::from_ref(&r)).unwrap();
    let json = std::fs::read_to_string(dir.path().join("metrics.json")).unwrap();
    let back: Vec<MetricsReport> = serde_json::from_str(&json).unwrap();
    assert_eq!(back[0].metrics.len(), r.metrics.len());
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("scenario,seed,loss_rate,metric,value\n"));
    assert_eq!(csv.lines().count(), r.metrics.len() + 1);
}
