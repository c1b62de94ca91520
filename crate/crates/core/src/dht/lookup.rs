//! Iterative node lookup as a transport-agnostic state machine.
//!
//! Rounds query up to `alpha` of the closest unqueried candidates. Once a
//! round fails to bring anything closer than the best candidate seen before
//! it, every unqueried node within the current `k` closest is queried, and
//! the lookup finishes when the `k` closest non-failed candidates have all
//! answered.

use std::collections::BTreeMap;
use std::future::Future;

use futures::future::join_all;

use super::{xor_distance, Distance, Key, NodeInfo};
use crate::crypto::PeerId;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum State {
    Pending,
    InFlight,
    Responded,
    Failed,
}

#[derive(Clone, Debug)]
struct Candidate {
    info: NodeInfo,
    state: State,
}

#[derive(Clone, Debug)]
pub struct Lookup {
    target: Key,
    k: usize,
    alpha: usize,
    candidates: BTreeMap<Distance, Candidate>,
    best_before_round: Option<Distance>,
    exhaustive: bool,
    rounds: usize,
}

impl Lookup {
    pub fn new(target: Key, k: usize, alpha: usize) -> Self {
        Self {
            target,
            k,
            alpha: alpha.max(1),
            candidates: BTreeMap::new(),
            best_before_round: None,
            exhaustive: false,
            rounds: 0,
        }
    }

    pub fn target(&self) -> &Key {
        &self.target
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// Adds the local node as an already-answered candidate.
    pub fn add_responded(&mut self, info: NodeInfo) {
        let d = xor_distance(info.peer_id.as_bytes(), &self.target);
        self.candidates.insert(
            d,
            Candidate {
                info,
                state: State::Responded,
            },
        );
    }

    pub fn add_candidates(&mut self, nodes: impl IntoIterator<Item = NodeInfo>) {
        for n in nodes {
            let d = xor_distance(n.peer_id.as_bytes(), &self.target);
            self.candidates.entry(d).or_insert(Candidate {
                info: n,
                state: State::Pending,
            });
        }
    }

    fn window(&self) -> impl Iterator<Item = (&Distance, &Candidate)> {
        self.candidates
            .iter()
            .filter(|(_, c)| c.state != State::Failed)
            .take(self.k)
    }

    fn best(&self) -> Option<Distance> {
        self.candidates
            .iter()
            .find(|(_, c)| c.state != State::Failed)
            .map(|(d, _)| *d)
    }

    /// Next batch to query; empty when the lookup is complete.
    pub fn next_queries(&mut self) -> Vec<NodeInfo> {
        self.best_before_round = self.best();
        let limit = if self.exhaustive { self.k } else { self.alpha };
        let picked: Vec<Distance> = self
            .window()
            .filter(|(_, c)| c.state == State::Pending)
            .take(limit)
            .map(|(d, _)| *d)
            .collect();
        if !picked.is_empty() {
            self.rounds += 1;
        }
        picked
            .into_iter()
            .map(|d| {
                let c = self.candidates.get_mut(&d).unwrap();
                c.state = State::InFlight;
                c.info.clone()
            })
            .collect()
    }

    fn find_mut(&mut self, peer: &PeerId) -> Option<&mut Candidate> {
        let d = xor_distance(peer.as_bytes(), &self.target);
        self.candidates.get_mut(&d)
    }

    pub fn on_response(&mut self, peer: &PeerId, nodes: Vec<NodeInfo>) {
        if let Some(c) = self.find_mut(peer) {
            c.state = State::Responded;
        }
        self.add_candidates(nodes);
    }

    pub fn on_failure(&mut self, peer: &PeerId) {
        if let Some(c) = self.find_mut(peer) {
            c.state = State::Failed;
        }
    }

    /// Call after every response of a batch has been applied.
    pub fn end_round(&mut self) {
        if !self.exhaustive && self.best() >= self.best_before_round {
            self.exhaustive = true;
        }
    }

    pub fn is_done(&self) -> bool {
        self.window().all(|(_, c)| c.state == State::Responded)
    }

    /// Up to `k` answering nodes, closest first.
    pub fn result(&self) -> Vec<NodeInfo> {
        self.candidates
            .values()
            .filter(|c| c.state == State::Responded)
            .take(self.k)
            .map(|c| c.info.clone())
            .collect()
    }

    pub fn failed(&self) -> Vec<PeerId> {
        self.candidates
            .values()
            .filter(|c| c.state == State::Failed)
            .map(|c| c.info.peer_id)
            .collect()
    }
}

/// Drives a lookup to completion, running each batch concurrently.
/// `query` returns the peer's closer nodes, or `None` if it did not answer.
pub async fn drive<F, Fut>(mut lookup: Lookup, query: F) -> Lookup
where
    F: Fn(NodeInfo) -> Fut,
    Fut: Future<Output = Option<Vec<NodeInfo>>>,
{
    loop {
        let batch = lookup.next_queries();
        if batch.is_empty() {
            break;
        }
        let replies = join_all(batch.into_iter().map(|n| {
            let id = n.peer_id;
            let fut = query(n);
            async move { (id, fut.await) }
        }))
        .await;
        for (id, reply) in replies {
            match reply {
                Some(nodes) => lookup.on_response(&id, nodes),
                None => lookup.on_failure(&id),
            }
        }
        lookup.end_round();
    }
    lookup
}
