use gleamsim::harness::{csv_string, run, run_detailed, Scenario};
use proptest::prelude::*;

fn scenario(topology: &str, workload: &str, seed: u64, loss: f64) -> Scenario {
    let mut sc = Scenario::from_toml(&format!(
        "name = \"sim\"\nloss_rate = {loss}\n[topology]\n{topology}\n[workload]\n{workload}\n"
    ))
    .unwrap();
    sc.seed = seed;
    sc
}

const TOPOLOGIES: [&str; 3] = [
    "kind = \"star\"\nhosts = 5",
    "kind = \"leaf_spine\"\nleaves = 3\nspines = 2\nhosts_per_leaf = 2",
    "kind = \"fat_tree\"\nk = 4",
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lossy_broadcast_delivers_every_byte_once(
        topo in 0usize..3,
        seed in any::<u64>(),
        loss in prop_oneof![Just(0.0), Just(1e-4), Just(1e-3), Just(5e-3)],
        kb in 1u64..300,
        messages in 1u32..3,
        psn in prop_oneof![Just(0u32), Just(0xFFFF00), any::<u32>().prop_map(|v| v & 0xFFFFFF)],
    ) {
        let mut sc = scenario(
            TOPOLOGIES[topo],
            &format!("kind = \"bcast\"\nmsg_bytes = {}\nmessages = {messages}", kb * 1000 + 7),
            seed,
            loss,
        );
        sc.group.initial_psn = psn;
        let r = run(&sc).unwrap();
        let receivers = sc.receivers(match topo { 0 => 5, 1 => 6, _ => 16 }).len() as f64;
        prop_assert_eq!(r.get("checksum_ok"), Some(1.0));
        prop_assert_eq!(r.get("rx.messages"), Some(receivers * f64::from(messages)));
        prop_assert_eq!(r.get("fabric.conserved"), Some(1.0));
        prop_assert_eq!(r.get("switch.errors"), Some(0.0));
        prop_assert_eq!(r.get("host.rejected"), Some(0.0));
        prop_assert_eq!(r.get("host.delivered_bytes"), Some(receivers * f64::from(messages) * (kb * 1000 + 7) as f64));
    }
}

#[test]
fn identical_seeds_give_identical_traces() {
    let mut sc = scenario(TOPOLOGIES[1], "kind = \"bcast\"\nmsg_bytes = 200000", 9, 2e-3);
    sc.sim.trace = true;
    let a = run_detailed(&sc).unwrap();
    let b = run_detailed(&sc).unwrap();
    assert!(!a.trace.is_empty());
    let ser = |t: &[_]| serde_json::to_string(t).unwrap();
    assert_eq!(ser(&a.trace), ser(&b.trace));
    assert_eq!(csv_string(&[a.report]).unwrap(), csv_string(&[b.report]).unwrap());
}

#[test]
fn every_workload_runs_on_a_leaf_spine() {
    let workloads = [
        "kind = \"bcast\"\nmsg_bytes = 100000",
        "kind = \"multi_unicast\"\nmsg_bytes = 100000",
        "kind = \"ring_overlay\"\nmsg_bytes = 100000\nchunk_bytes = 16384",
        "kind = \"replication\"\nio_bytes = 16384\nn_copies = 3\nduration_s = 2e-4",
        "kind = \"hpl\"\nn = 2\npb_bytes = 50000\nrs_bytes = 50000\nepochs = 2",
        "kind = \"source_switch\"\npackets_per_source = 20\nsources = [0, 3, 5, 0]",
    ];
    for wl in workloads {
        for loss in [0.0, 1e-3] {
            let r = run(&scenario(TOPOLOGIES[1], wl, 4, loss)).unwrap_or_else(|e| panic!("{wl}: {e}"));
            if let Some(ok) = r.get("checksum_ok") {
                assert_eq!(ok, 1.0, "{wl} at {loss}");
            }
            assert_eq!(r.get("fabric.conserved"), Some(1.0), "{wl}");
            assert_eq!(r.get("switch.errors"), Some(0.0), "{wl}");
        }
    }
}

