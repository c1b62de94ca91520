use fybrr_core::sim::{run_scenario, Action, Fault, Scenario};

/// Randomized schedules per run; FYBRR_SCENARIOS overrides.
fn scenario_count() -> u64 {
    std::env::var("FYBRR_SCENARIOS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1000)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn offline_receiver_catches_up_after_rejoining() {
    let s = Scenario::new(4, 1)
        .at(0, 1, Action::Stop)
        .at(10, 0, Action::Send { to: 1, len: 120 })
        .at(20, 2, Action::Send { to: 1, len: 30 })
        .at(30, 1, Action::Start)
        .at(40, 1, Action::Sync);
    let r = run_scenario(&s).await.unwrap();
    assert!(r.passed(), "{:?}", r.assertion_failures);
    assert_eq!(r.sent, 2);
    assert_eq!(r.delivered.len(), 2);
    assert_eq!(r.queued, 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn online_peers_use_only_the_direct_path() {
    let s = Scenario::new(3, 2)
        .at(0, 0, Action::Send { to: 1, len: 10 })
        .at(10, 1, Action::Send { to: 2, len: 10 })
        .at(20, 2, Action::Send { to: 0, len: 10 });
    let r = run_scenario(&s).await.unwrap();
    assert!(r.passed(), "{:?}", r.assertion_failures);
    assert_eq!(r.delivered.len(), 3);
    assert!(r
        .log
        .iter()
        .filter(|e| e.event == "deliver")
        .all(|e| e.detail.ends_with("direct")));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn corrupted_chunk_never_surfaces() {
    let s = Scenario::new(4, 3)
        .at(0, 1, Action::Stop)
        .at(10, 0, Action::Send { to: 1, len: 300 })
        .fault(20, Fault::CorruptChunk)
        .at(30, 1, Action::Start)
        .at(40, 1, Action::Sync);
    let r = run_scenario(&s).await.unwrap();
    assert_eq!(r.corrupted_surfaced, 0);
    assert_eq!(r.duplicates, 0);
    assert!(r.passed(), "{:?}", r.assertion_failures);
    assert!(r
        .log
        .iter()
        .any(|e| e.event == "fault" && e.detail.contains("corrupted")));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn rendezvous_loss_is_survivable() {
    let s = Scenario::new(3, 4)
        .fault(0, Fault::KillRendezvous)
        .at(10, 0, Action::Send { to: 1, len: 50 })
        .at(20, 1, Action::Sync);
    let r = run_scenario(&s).await.unwrap();
    assert_eq!(r.corrupted_surfaced, 0);
    assert_eq!(r.duplicates, 0);
    assert_eq!(r.delivered.len() + r.queued + r.failed, r.sent);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn randomized_schedules_deliver_each_message_once_by_one_path() {
    for seed in 0..scenario_count() {
        let s = Scenario::random(4, 25, seed);
        let r = run_scenario(&s).await.unwrap();
        assert!(r.passed(), "seed {seed}: {:?}", r.assertion_failures);
        assert_eq!(r.path_mismatches, 0, "seed {seed}");
        assert_eq!(
            r.delivered.len(),
            r.sent,
            "seed {seed}: {} queued, {} failed",
            r.queued,
            r.failed
        );
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn same_seed_same_outcome() {
    let s = Scenario::random(4, 20, 99);
    let a = run_scenario(&s).await.unwrap();
    let b = run_scenario(&s).await.unwrap();
    assert_eq!(a.delivered, b.delivered);
    assert_eq!(a.sent, b.sent);
    let events = |r: &fybrr_core::sim::ScenarioReport| -> Vec<(u64, Option<usize>, String)> {
        r.log
            .iter()
            .filter(|e| e.event != "deliver")
            .map(|e| (e.t, e.node, e.event.clone()))
            .collect()
    };
    assert_eq!(events(&a), events(&b));
}

#[tokio::test]
async fn scenario_files_parse() {
    let s = Scenario::parse("n_nodes=3\nseed=1\n[schedule]\n0 1 stop\n10 0 send 1 20\n20 1 start\n").unwrap();
    let r = run_scenario(&s).await.unwrap();
    assert!(r.passed(), "{:?}", r.assertion_failures);
    assert_eq!(r.delivered.len(), 1);
}
