use std::time::Duration;

use fybrr_core::crypto::PeerIdentity;
use fybrr_core::node::{DeliveryPath, Node, NodeConfig, NodeError, OutboundState};
use fybrr_core::sim::{Swarm, SwarmOptions};

fn opts(n: usize) -> SwarmOptions {
    SwarmOptions {
        n_nodes: n,
        ..SwarmOptions::default()
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn online_peers_exchange_directly_both_ways() {
    let swarm = Swarm::start(opts(2)).await.unwrap();
    let (a, b) = (swarm.node(0).clone(), swarm.node(1).clone());

    let out = a.send_message(&b.peer_id(), b"hello b").await.unwrap();
    assert_eq!(out.state, OutboundState::SentDirect);
    let back = b.send_message(&a.peer_id(), b"hello a").await.unwrap();
    assert_eq!(back.state, OutboundState::SentDirect);

    let inbox_b = b.inbox();
    assert_eq!(inbox_b.len(), 1);
    assert_eq!(inbox_b[0].plaintext, b"hello b");
    assert_eq!(inbox_b[0].path, DeliveryPath::Direct);
    assert_eq!(inbox_b[0].from, a.peer_id());
    assert_eq!(a.inbox()[0].plaintext, b"hello a");
    // the queue was never touched
    assert_eq!(swarm.queued_entries(), 0);
    swarm.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn offline_recipient_gets_queued_message_on_sync() {
    let mut swarm = Swarm::start(opts(4)).await.unwrap();
    swarm.stop_node(1).await.unwrap();
    let to = swarm.peer_id(1);

    let out = swarm.node(0).send_message(&to, b"while you were away").await.unwrap();
    assert_eq!(out.state, OutboundState::Queued, "{:?}", out.error);
    assert!(swarm.queued_entries() > 0);

    let b = swarm.start_node(1).await.unwrap();
    // a starting node syncs on its own; an explicit sync waits for that run
    b.sync_inbox().await.unwrap();
    let got = b.inbox();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].plaintext, b"while you were away");
    assert_eq!(got[0].path, DeliveryPath::Dmq);
    assert_eq!(got[0].from, swarm.peer_id(0));
    // acked everywhere, and a second sync is empty
    assert!(b.sync_inbox().await.unwrap().is_empty());
    swarm.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn files_travel_with_their_name() {
    let mut swarm = Swarm::start(SwarmOptions {
        chunk_size: 4096,
        ..opts(3)
    })
    .await
    .unwrap();
    let data: Vec<u8> = (0..50_000u32).map(|i| (i * 7 % 251) as u8).collect();
    let to = swarm.peer_id(2);
    swarm.stop_node(2).await.unwrap();
    let out = swarm.node(0).send_file(&to, "photo.bin", &data).await.unwrap();
    assert_eq!(out.state, OutboundState::Queued);
    let c = swarm.start_node(2).await.unwrap();
    c.sync_inbox().await.unwrap();
    let got = c.inbox();
    assert_eq!(got[0].filename.as_deref(), Some("photo.bin"));
    assert_eq!(got[0].plaintext, data);
    swarm.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn no_connectivity_fails_the_message() {
    let id = PeerIdentity::generate();
    let other = PeerIdentity::generate();
    let node = Node::start(NodeConfig::ephemeral(id)).await.unwrap();
    node.learn_keys(&other.public_keys()).unwrap();
    let out = node.send_message(&other.peer_id(), b"into the void").await.unwrap();
    assert_eq!(out.state, OutboundState::Failed);
    assert!(out.error.unwrap().contains("no swarm peers"));
    // unknown recipients are rejected before any attempt
    let stranger = PeerIdentity::generate().peer_id();
    assert!(matches!(
        node.send_message(&stranger, b"x").await,
        Err(NodeError::UnknownRecipient(_))
    ));
    assert!(matches!(
        node.send_message(&other.peer_id(), &vec![0; 1024 * 1024 + 1]).await,
        Err(NodeError::TooLarge(_))
    ));
    node.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn third_node_serves_pinned_chunks() {
    let mut swarm = Swarm::start(SwarmOptions {
        replication: 1,
        ..opts(3)
    })
    .await
    .unwrap();
    let to = swarm.peer_id(1);
    swarm.stop_node(1).await.unwrap();
    swarm.node(0).send_message(&to, b"held by someone else").await.unwrap();
    // the sender released its own copy, so only node 2 can serve it
    swarm.node(0).gc();
    assert!(swarm.node(0).blocks().is_empty());
    assert!(!swarm.node(2).blocks().is_empty());
    swarm.stop_node(0).await.unwrap();
    let b = swarm.start_node(1).await.unwrap();
    b.sync_inbox().await.unwrap();
    assert_eq!(b.inbox()[0].plaintext, b"held by someone else");
    swarm.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn history_survives_restart_sealed() {
    let mut swarm = Swarm::start(opts(2)).await.unwrap();
    let b = swarm.peer_id(1);
    swarm.node(0).send_message(&b, b"remember me").await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    swarm.stop_node(1).await.unwrap();
    let b = swarm.start_node(1).await.unwrap();
    let inbox = b.inbox();
    assert_eq!(inbox.len(), 1);
    assert_eq!(inbox[0].plaintext, b"remember me");
    swarm.shutdown().await;
}
