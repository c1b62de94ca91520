use fybrr_core::crypto::{PeerId, PeerIdentity};
use fybrr_core::dht::{brute_force_closest, DhtError, DhtRecord, RecordKind, K};
use fybrr_core::node::{Node, NodeConfig};
use fybrr_core::sim::{Swarm, SwarmOptions};

fn options(n: usize, seed: u64) -> SwarmOptions {
    SwarmOptions {
        n_nodes: n,
        with_rendezvous: false,
        persist: false,
        seed,
        ..SwarmOptions::default()
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn records_outlive_their_publisher() {
    let mut swarm = Swarm::start(options(12, 1)).await.unwrap();
    let publisher = swarm.node(3).clone();
    let key = [0x42; 32];
    let expiry = publisher.clock().now_ms() + 60_000;
    let rec = DhtRecord::provider(publisher.identity(), key, &publisher.node_info(), expiry).unwrap();
    let stored = publisher.dht().store_record(&rec).await.unwrap();
    assert!(stored >= 2, "replicated to {stored} nodes");
    swarm.stop_node(3).await.unwrap();

    let found = swarm.node(7).dht().find_value(&key, RecordKind::Provider).await;
    assert_eq!(found.len(), 1);
    assert_eq!(found[0].publisher, publisher.peer_id());
    assert_eq!(found[0].provider_info().unwrap().peer_id, publisher.peer_id());
    assert!(swarm
        .node(7)
        .dht()
        .find_value(&[0x43; 32], RecordKind::Provider)
        .await
        .is_empty());
    swarm.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn tampered_or_expired_records_are_refused() {
    let swarm = Swarm::start(options(4, 2)).await.unwrap();
    let n = swarm.node(0).clone();
    let now = n.clock().now_ms();
    let mut rec = DhtRecord::new_signed(
        n.identity(),
        [1; 32],
        RecordKind::QueueHead,
        vec![1, 2, 3],
        now + 60_000,
    )
    .unwrap();
    rec.value[0] ^= 1;
    assert!(matches!(
        n.dht().store_record(&rec).await,
        Err(DhtError::InvalidSignature)
    ));
    let old = DhtRecord::new_signed(
        n.identity(),
        [1; 32],
        RecordKind::QueueHead,
        vec![1],
        now.saturating_sub(1),
    )
    .unwrap();
    assert!(matches!(n.dht().store_record(&old).await, Err(DhtError::Expired)));
    swarm.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn lookups_find_the_true_closest_nodes() {
    let swarm = Swarm::start(options(30, 3)).await.unwrap();
    for i in swarm.running() {
        swarm.node(i).dht().refresh().await;
    }
    let ids: Vec<PeerId> = (0..swarm.len()).map(|i| swarm.peer_id(i)).collect();
    for t in 0..10u8 {
        let target = [t.wrapping_mul(37); 32];
        let got: Vec<PeerId> = swarm
            .node(t as usize)
            .dht()
            .find_node(&target)
            .await
            .into_iter()
            .map(|n| n.peer_id)
            .collect();
        assert_eq!(got, brute_force_closest(&ids, &target, K), "target {t}");
    }
    swarm.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn a_lone_node_answers_from_itself() {
    let node = Node::start(NodeConfig::ephemeral(PeerIdentity::generate()))
        .await
        .unwrap();
    let got = node.dht().find_node(&[9; 32]).await;
    assert!(got.iter().all(|n| n.peer_id == node.peer_id()));
    assert!(node.dht().find_value(&[9; 32], RecordKind::Provider).await.is_empty());
    node.shutdown().await;
}
