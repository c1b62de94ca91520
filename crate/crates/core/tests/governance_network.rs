use std::time::Duration;

use fybrr_core::consensus::{Choice, ProposalKind, Tally};
use fybrr_core::crypto::PeerIdentity;
use fybrr_core::node::{Node, NodeConfig, OutboundState};
use fybrr_core::sim::{Swarm, SwarmOptions};

/// Polls until every listed node reports `epoch`, syncing as it goes.
async fn wait_epoch(nodes: &[&Node], epoch: u64) {
    let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
    loop {
        if nodes.iter().all(|n| n.membership().epoch == epoch) {
            return;
        }
        assert!(tokio::time::Instant::now() < deadline, "epoch {epoch} not reached");
        for n in nodes {
            n.sync_governance().await;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn proposals_and_ballots_spread_over_the_swarm() {
    let swarm = Swarm::start(SwarmOptions {
        n_nodes: 3,
        ..SwarmOptions::default()
    })
    .await
    .unwrap();
    let (a, b, c) = (swarm.node(0).clone(), swarm.node(1).clone(), swarm.node(2).clone());
    assert_eq!(a.membership().members.len(), 1);

    // a single founder decides alone
    let p = a
        .propose(ProposalKind::AddMember {
            keys: b.identity().public_keys(),
        })
        .await
        .unwrap();
    // proposing is not voting
    assert_eq!(a.proposal_status(&p.id()).unwrap().tally, Tally::Pending);
    let s = a.vote(&p.id(), Choice::Yes).await.unwrap();
    assert_eq!(s.tally, Tally::Accepted);
    wait_epoch(&[&a, &b, &c], 1).await;

    // two members: one yes is not a strict majority
    let p = b
        .propose(ProposalKind::AddMember {
            keys: c.identity().public_keys(),
        })
        .await
        .unwrap();
    let s = a.vote(&p.id(), Choice::Yes).await.unwrap();
    assert_eq!(s.tally, Tally::Pending);
    // a repeated ballot is recognised and not counted again
    let again = a.vote(&p.id(), Choice::Yes).await.unwrap();
    assert_eq!((again.yes, again.tally), (1, Tally::Pending));
    // b hears a's ballot by gossip before casting its own
    let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
    while b.proposal_status(&p.id()).unwrap().yes < 1 {
        assert!(tokio::time::Instant::now() < deadline);
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let s = b.vote(&p.id(), Choice::Yes).await.unwrap();
    assert_eq!(s.tally, Tally::Accepted);
    wait_epoch(&[&a, &b, &c], 2).await;
    for n in [&a, &b, &c] {
        assert_eq!(n.membership(), a.membership());
        assert_eq!(n.export_membership_log(), a.export_membership_log());
    }
    // a non-member cannot vote
    let p = a
        .propose(ProposalKind::SetPolicy {
            name: "retention_days".into(),
            value: "7".into(),
        })
        .await
        .unwrap();
    let outsider = Node::start(NodeConfig::ephemeral(PeerIdentity::generate()))
        .await
        .unwrap();
    assert!(outsider.vote(&p.id(), Choice::Yes).await.is_err());
    outsider.shutdown().await;
    swarm.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn membership_survives_a_restart() {
    let mut swarm = Swarm::start(SwarmOptions {
        n_nodes: 2,
        ..SwarmOptions::default()
    })
    .await
    .unwrap();
    let a = swarm.node(0).clone();
    let p = a
        .propose(ProposalKind::AddMember {
            keys: swarm.identity(1).public_keys(),
        })
        .await
        .unwrap();
    a.vote(&p.id(), Choice::Yes).await.unwrap();
    let before = a.membership();
    assert_eq!(before.epoch, 1);
    swarm.stop_node(0).await.unwrap();
    let a = swarm.start_node(0).await.unwrap();
    assert_eq!(a.membership(), before);
    swarm.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn private_swarm_channels_need_membership() {
    let swarm = Swarm::start(SwarmOptions {
        n_nodes: 3,
        swarm_key: Some(b"correct horse battery staple".to_vec()),
        ..SwarmOptions::default()
    })
    .await
    .unwrap();
    let (a, b) = (swarm.node(0).clone(), swarm.node(1).clone());
    assert_eq!(a.status_json()["private"], true);

    // b is not a member yet: no direct channel either way
    let out = b.send_message(&a.peer_id(), b"let me in").await.unwrap();
    assert_ne!(out.state, OutboundState::SentDirect);

    let p = a
        .propose(ProposalKind::AddMember {
            keys: b.identity().public_keys(),
        })
        .await
        .unwrap();
    a.vote(&p.id(), Choice::Yes).await.unwrap();
    wait_epoch(&[&a, &b], 1).await;

    let deadline = tokio::time::Instant::now() + Duration::from_secs(10);
    loop {
        let out = a.send_message(&b.peer_id(), b"welcome").await.unwrap();
        if out.state == OutboundState::SentDirect {
            break;
        }
        assert!(
            tokio::time::Instant::now() < deadline,
            "no direct path after admission: {:?}",
            out.error
        );
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    swarm.shutdown().await;
}
