//! The DHT as seen by one node: routing table, local records, and the
//! iterative lookups that run over [`RpcClient`].

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use futures::future::join_all;
use parking_lot::{Mutex, RwLock};
use tracing::debug;

use super::lookup::{drive, Lookup};
use super::record::{decode_records, encode_records};
use super::routing::random_key_in_bucket;
use super::{
    decode_nodes, encode_nodes, DhtError, DhtRecord, InsertOutcome, Key, NodeInfo, RecordKind, RecordStore,
    RoutingTable, ALPHA, K, RECORD_TTL_MS,
};
use crate::clock::Clock;
use crate::crypto::{PeerId, PeerIdentity};
use crate::rpc::{expect, msg, RequestHeader, RpcClient, RpcError};
use crate::wire::{Decoder, Encoder, Frame};

#[derive(Clone, Debug)]
pub struct DhtConfig {
    pub k: usize,
    pub alpha: usize,
    pub record_ttl_ms: u64,
}

impl Default for DhtConfig {
    fn default() -> Self {
        Self {
            k: K,
            alpha: ALPHA,
            record_ttl_ms: RECORD_TTL_MS,
        }
    }
}

#[derive(Debug)]
pub struct Dht {
    identity: PeerIdentity,
    local: NodeInfo,
    swarm_digest: [u8; 32],
    table: RwLock<RoutingTable>,
    records: Mutex<RecordStore>,
    rpc: Arc<RpcClient>,
    clock: Clock,
    config: DhtConfig,
}

impl Dht {
    pub fn new(
        identity: PeerIdentity,
        endpoint: SocketAddr,
        swarm_digest: [u8; 32],
        rpc: Arc<RpcClient>,
        clock: Clock,
        config: DhtConfig,
    ) -> Self {
        let local = NodeInfo::new(identity.peer_id(), endpoint);
        Self {
            table: RwLock::new(RoutingTable::with_k(identity.peer_id(), config.k)),
            identity,
            local,
            swarm_digest,
            records: Mutex::new(RecordStore::new()),
            rpc,
            clock,
            config,
        }
    }

    pub fn local(&self) -> &NodeInfo {
        &self.local
    }

    pub fn peer_id(&self) -> PeerId {
        self.local.peer_id
    }

    pub fn config(&self) -> &DhtConfig {
        &self.config
    }

    pub fn swarm_digest(&self) -> &[u8; 32] {
        &self.swarm_digest
    }

    pub fn rpc(&self) -> &Arc<RpcClient> {
        &self.rpc
    }

    pub fn routing_snapshot(&self) -> RoutingTable {
        self.table.read().clone()
    }

    pub fn known_peers(&self) -> Vec<NodeInfo> {
        self.table.read().all()
    }

    pub fn peer_count(&self) -> usize {
        self.table.read().len()
    }

    pub fn lookup_peer(&self, peer: &PeerId) -> Option<NodeInfo> {
        self.table.read().get(peer).cloned()
    }

    pub fn local_records(&self, key: &Key, kind: RecordKind) -> Vec<DhtRecord> {
        self.records.lock().get(key, kind, self.clock.now_ms())
    }

    pub fn record_count(&self) -> usize {
        self.records.lock().len()
    }

    pub fn header(&self) -> Encoder {
        RequestHeader {
            swarm_digest: self.swarm_digest,
            sender: self.local.clone(),
        }
        .encode()
    }

    /// Sends one request and keeps the routing table in step with the outcome.
    pub async fn request(self: &Arc<Self>, to: &NodeInfo, kind: u8, body: &[u8]) -> Result<Frame, RpcError> {
        let frame = Frame::new(kind, self.header().raw(body).finish());
        match self.rpc.call(to.endpoint, &frame).await {
            Ok(f) => {
                let mut seen = to.clone();
                seen.last_seen = self.clock.now_ms();
                self.observe(seen);
                Ok(f)
            }
            Err(e) => {
                if !matches!(e, RpcError::Remote(_)) {
                    self.table.write().remove(&to.peer_id);
                }
                Err(e)
            }
        }
    }

    /// Learns about a peer. A full bucket pings its least-recently-seen entry
    /// in the background and keeps it if it answers.
    pub fn observe(self: &Arc<Self>, node: NodeInfo) {
        let outcome = self.table.write().insert(node.clone());
        if let InsertOutcome::Full { least_recent } = outcome {
            let me = self.clone();
            tokio::spawn(async move {
                let alive = me.ping_node(&least_recent).await.is_ok();
                let mut t = me.table.write();
                if alive {
                    t.touch(&least_recent.peer_id, me.clock.now_ms());
                } else {
                    t.replace(&least_recent.peer_id, node);
                }
            });
        }
    }

    pub fn forget(&self, peer: &PeerId) {
        self.table.write().remove(peer);
    }

    async fn ping_node(self: &Arc<Self>, to: &NodeInfo) -> Result<NodeInfo, RpcError> {
        let frame = Frame::new(msg::PING, self.header().finish());
        let reply = expect(self.rpc.call(to.endpoint, &frame).await?, msg::PONG)?;
        let info = NodeInfo::decode(&reply)?;
        if info.peer_id != to.peer_id {
            return Err(RpcError::Remote("peer id changed".into()));
        }
        Ok(info)
    }

    /// Pings a bare endpoint and returns (and records) whoever answers.
    pub async fn ping(self: &Arc<Self>, endpoint: SocketAddr) -> Result<NodeInfo, RpcError> {
        let frame = Frame::new(msg::PING, self.header().finish());
        let reply = expect(self.rpc.call(endpoint, &frame).await?, msg::PONG)?;
        let mut info = NodeInfo::decode(&reply)?;
        info.endpoint = endpoint;
        info.last_seen = self.clock.now_ms();
        if info.peer_id != self.local.peer_id {
            self.observe(info.clone());
        }
        Ok(info)
    }

    async fn find_node_rpc(self: &Arc<Self>, to: NodeInfo, target: Key) -> Option<Vec<NodeInfo>> {
        let reply = self.request(&to, msg::FIND_NODE, &target).await.ok()?;
        let body = expect(reply, msg::NODES).ok()?;
        let mut d = Decoder::new(&body);
        decode_nodes(&mut d).ok()
    }

    fn start_lookup(&self, target: &Key) -> Lookup {
        let mut l = Lookup::new(*target, self.config.k, self.config.alpha);
        l.add_responded(self.local.clone());
        l.add_candidates(self.table.read().closest(target, self.config.k));
        l
    }

    /// Iterative lookup of the `k` live nodes closest to `target`, including
    /// this node, sorted by distance.
    pub async fn find_node(self: &Arc<Self>, target: &Key) -> Vec<NodeInfo> {
        let lookup = self.start_lookup(target);
        let target = *target;
        let done = drive(lookup, |n| self.find_node_rpc(n, target)).await;
        done.result()
    }

    /// Writes a verified record to the `k` nodes closest to its key.
    /// Returns the number of replicas that accepted it.
    pub async fn store_record(self: &Arc<Self>, record: &DhtRecord) -> Result<usize, DhtError> {
        if !record.verify() {
            return Err(DhtError::InvalidSignature);
        }
        if record.is_expired(self.clock.now_ms()) {
            return Err(DhtError::Expired);
        }
        let targets = self.find_node(&record.key).await;
        let body = record.encode();
        let acks = join_all(targets.iter().map(|n| {
            let body = &body;
            async move {
                if n.peer_id == self.local.peer_id {
                    return self.handle_store(record.clone()).is_ok();
                }
                match self.request(n, msg::STORE, body).await {
                    Ok(f) => expect(f, msg::STORED).is_ok(),
                    Err(_) => false,
                }
            }
        }))
        .await;
        Ok(acks.into_iter().filter(|ok| *ok).count())
    }

    /// Every live record of `kind` under `key` seen on the lookup path,
    /// one per publisher (latest expiry wins).
    pub async fn find_value(self: &Arc<Self>, key: &Key, kind: RecordKind) -> Vec<DhtRecord> {
        let found: Mutex<Vec<DhtRecord>> = Mutex::new(self.local_records(key, kind));
        let lookup = self.start_lookup(key);
        let k = *key;
        let body = Encoder::new().raw(&k).u8(kind.to_u8()).finish();
        drive(lookup, |n| {
            let found = &found;
            let body = &body;
            async move {
                let reply = self.request(&n, msg::FIND_VALUE, body).await.ok()?;
                let payload = expect(reply, msg::VALUES).ok()?;
                let mut d = Decoder::new(&payload);
                let nodes = decode_nodes(&mut d).ok()?;
                let records = decode_records(&mut d).ok()?;
                found.lock().extend(records);
                Some(nodes)
            }
        })
        .await;
        let now = self.clock.now_ms();
        let mut best: BTreeMap<PeerId, DhtRecord> = BTreeMap::new();
        for r in found.into_inner() {
            if r.key != k || r.kind != kind || r.is_expired(now) || !r.verify() {
                continue;
            }
            match best.get(&r.publisher) {
                Some(old) if old.expires_at >= r.expires_at => {}
                _ => {
                    best.insert(r.publisher, r);
                }
            }
        }
        best.into_values().collect()
    }

    /// Joins via seed endpoints, then looks up our own id and refreshes the
    /// buckets between us and our nearest neighbour. Returns the routing
    /// table size.
    pub async fn bootstrap(self: &Arc<Self>, seeds: &[SocketAddr]) -> Result<usize, DhtError> {
        let pings = join_all(
            seeds
                .iter()
                .filter(|s| **s != self.local.endpoint)
                .map(|s| self.ping(*s)),
        )
        .await;
        let reached = pings
            .into_iter()
            .filter(|r| matches!(r, Ok(info) if info.peer_id != self.local.peer_id))
            .count();
        if reached == 0 {
            return Err(DhtError::SeedsUnreachable);
        }
        self.find_node(self.local.peer_id.as_bytes()).await;
        self.refresh().await;
        Ok(self.peer_count())
    }

    /// Looks up a random key in every bucket from the farthest occupied one
    /// down to the nearest.
    pub async fn refresh(self: &Arc<Self>) {
        let occupied = self.table.read().occupied_buckets();
        let (Some(&far), Some(&near)) = (occupied.first(), occupied.last()) else {
            return;
        };
        for i in (near..=far).rev() {
            let key = random_key_in_bucket(&self.local.peer_id, i);
            self.find_node(&key).await;
        }
    }

    /// Re-stores every live record held here.
    pub async fn republish(self: &Arc<Self>) -> usize {
        let live = self.records.lock().live(self.clock.now_ms());
        let mut n = 0;
        for r in live {
            if self.store_record(&r).await.unwrap_or(0) > 0 {
                n += 1;
            }
        }
        n
    }

    pub fn sweep(&self) -> usize {
        self.records.lock().sweep(self.clock.now_ms())
    }

    // Inbound side.

    pub fn handle_find_node(&self, target: &Key) -> Vec<NodeInfo> {
        self.table.read().closest(target, self.config.k)
    }

    pub fn handle_store(&self, record: DhtRecord) -> Result<bool, DhtError> {
        self.records.lock().put(record, self.clock.now_ms())
    }

    pub fn handle_find_value(&self, key: &Key, kind: RecordKind) -> (Vec<NodeInfo>, Vec<DhtRecord>) {
        (self.handle_find_node(key), self.local_records(key, kind))
    }

    /// Answers the DHT message types; `None` for anything else.
    pub fn dispatch(&self, kind: u8, body: &[u8]) -> Option<Result<Frame, DhtError>> {
        let r = match kind {
            msg::PING => Ok(Frame::new(msg::PONG, self.local.encode())),
            msg::FIND_NODE => (|| {
                let mut d = Decoder::new(body);
                let target: Key = d.array()?;
                d.finish()?;
                let nodes = self.handle_find_node(&target);
                Ok(Frame::new(msg::NODES, encode_nodes(Encoder::new(), &nodes).finish()))
            })(),
            msg::FIND_VALUE => (|| {
                let mut d = Decoder::new(body);
                let key: Key = d.array()?;
                let kind = RecordKind::from_u8(d.u8()?)?;
                d.finish()?;
                let (nodes, records) = self.handle_find_value(&key, kind);
                let e = encode_records(encode_nodes(Encoder::new(), &nodes), &records);
                Ok(Frame::new(msg::VALUES, e.finish()))
            })(),
            msg::STORE => DhtRecord::decode(body).and_then(|r| {
                let changed = self.handle_store(r)?;
                debug!(changed, "stored record");
                Ok(Frame::new(msg::STORED, vec![changed as u8]))
            }),
            _ => return None,
        };
        Some(r)
    }

    pub fn record_expiry(&self) -> u64 {
        self.clock.now_ms() + self.config.record_ttl_ms
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn identity(&self) -> &PeerIdentity {
        &self.identity
    }
}
