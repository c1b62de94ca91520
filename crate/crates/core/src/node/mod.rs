//! A full peer: DHT participant, pin holder, queue holder, governance
//! replica, and endpoint for direct channels, plus the message pipeline
//! that picks a delivery path.
//!
//! Sending tries a direct channel first. Any failure within the budget
//! falls back to the store-and-forward path: the envelope is sealed to the
//! recipient, chunked, pinned, and its manifest cid enqueued in the
//! recipient's queue. Receiving drains the queue, fetches and verifies every
//! block, opens the box, surfaces the message, acks the entry, and releases
//! the blocks. Message ids make delivery idempotent across both paths.

pub mod api;
pub mod config;
pub mod history;

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::{Arc, Weak};
use std::time::Duration;

use futures::future::join_all;
use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::broadcast;
use tokio_util::sync::CancellationToken;
use tokio_util::task::TaskTracker;
use tracing::{debug, info, warn};

use crate::channel::{ChannelError, ChannelEvent, ChannelManager};
use crate::clock::{system_now_ms, Clock, UnixMs};
use crate::consensus::{
    Ballot, Choice, ConsensusError, Event as GovEvent, Governance, MembershipState, Proposal, ProposalId, ProposalKind,
    ProposalStatus, DEFAULT_PROPOSAL_TTL_MS,
};
use crate::crypto::{
    open, random_bytes, random_nonce, seal, ContentId, CryptoError, PeerId, PeerIdentity, PublicKeys, SealedBox,
};
use crate::dht::{Dht, DhtConfig, DhtError, NodeInfo};
use crate::dmq::{Dmq, DmqError, DmqStore, QueueEntry, QueuedItem};
use crate::pin::{PinError, PinService};
use crate::rendezvous::{RendezvousClient, RendezvousError, HEARTBEAT_INTERVAL};
use crate::rpc::{error_frame, expect, msg, swarm_digest, RequestHeader, RpcClient};
use crate::store::{chunk_payload, reassemble, BlockStore, Chunk, Manifest, ManifestMeta, StoreError};
use crate::wire::{read_frame, write_frame, Decoder, Frame, WireError, MAX_FRAME_LEN};

pub use config::{ConfigError, NodeConfig};
pub use history::{Contact, Envelope, MsgId};
use history::{Contacts, History, HistoryRecord};

/// Largest message or file accepted for sending.
pub const MAX_PLAINTEXT: usize = 1024 * 1024;
/// Whole-attempt budget for the direct path before falling back.
pub const DIRECT_BUDGET: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("no known public keys for {0}; add the contact or connect a rendezvous")]
    UnknownRecipient(PeerId),
    #[error("message of {0} bytes exceeds the 1 MiB limit")]
    TooLarge(usize),
    #[error("no connectivity: {0}")]
    NoConnectivity(String),
    #[error("unknown message {0}")]
    UnknownMessage(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Dmq(#[from] DmqError),
    #[error(transparent)]
    Pin(#[from] PinError),
    #[error(transparent)]
    Dht(#[from] DhtError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Rendezvous(#[from] RendezvousError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OutboundState {
    Pending,
    SentDirect,
    Queued,
    Delivered,
    Failed,
}

impl OutboundState {
    pub fn as_str(self) -> &'static str {
        match self {
            OutboundState::Pending => "pending",
            OutboundState::SentDirect => "sent_direct",
            OutboundState::Queued => "queued",
            OutboundState::Delivered => "delivered",
            OutboundState::Failed => "failed",
        }
    }

    /// pending → (sent_direct | queued) → delivered, or → failed.
    pub fn can_become(self, next: OutboundState) -> bool {
        use OutboundState::*;
        matches!(
            (self, next),
            (Pending, SentDirect | Queued | Failed) | (SentDirect | Queued, Delivered) | (SentDirect | Queued, Failed)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryPath {
    Direct,
    Dmq,
}

impl DeliveryPath {
    pub fn as_str(self) -> &'static str {
        match self {
            DeliveryPath::Direct => "direct",
            DeliveryPath::Dmq => "dmq",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutboundMessage {
    pub msg_id: MsgId,
    pub to: PeerId,
    pub plaintext: Vec<u8>,
    pub filename: Option<String>,
    pub created_at: UnixMs,
    pub state: OutboundState,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InboundMessage {
    pub msg_id: MsgId,
    pub from: PeerId,
    pub plaintext: Vec<u8>,
    pub filename: Option<String>,
    /// Sender's clock at send time.
    pub created_at: UnixMs,
    pub received_at: UnixMs,
    /// Microsecond receive timestamp, for latency measurements.
    pub received_at_us: u64,
    pub path: DeliveryPath,
}

/// Pushed to local API subscribers.
#[derive(Clone, Debug)]
pub enum NodeEvent {
    Inbound(InboundMessage),
    Status {
        msg_id: MsgId,
        state: OutboundState,
        error: Option<String>,
    },
    Proposal(ProposalStatus),
    Membership {
        epoch: u64,
        members: usize,
    },
    Quarantined {
        msg_cid: ContentId,
        from: PeerId,
        reason: String,
    },
}

/// Why one queued entry could not be delivered this time.
enum ReceiveFailure {
    /// Blocks unavailable or failing verification; retried later.
    Retrieve(String),
    /// Authentication failed; never retried, never acked.
    Reject(String),
}

fn micros_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

pub struct Node {
    config: NodeConfig,
    identity: PeerIdentity,
    clock: Clock,
    endpoint: SocketAddr,
    dht: Arc<Dht>,
    blocks: Arc<BlockStore>,
    pins: Arc<PinService>,
    dmq: Arc<Dmq>,
    governance: Mutex<Governance>,
    channels: Arc<ChannelManager>,
    rendezvous: Option<Arc<RendezvousClient>>,
    contacts: Contacts,
    history: History,
    outbound: Mutex<HashMap<MsgId, OutboundMessage>>,
    outbound_order: Mutex<Vec<MsgId>>,
    inbox: Mutex<Vec<InboundMessage>>,
    seen: Mutex<HashSet<MsgId>>,
    quarantine: Mutex<HashSet<ContentId>>,
    events: broadcast::Sender<NodeEvent>,
    sync_lock: tokio::sync::Mutex<()>,
    last_entry_ts: Mutex<UnixMs>,
    api_addr: Mutex<Option<SocketAddr>>,
    cancel: CancellationToken,
    tasks: TaskTracker,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("peer_id", &self.identity.peer_id())
            .field("endpoint", &self.endpoint)
            .finish()
    }
}

impl Node {
    /// Binds the listener, opens state, joins the swarm and starts every
    /// background service.
    pub async fn start(config: NodeConfig) -> Result<Arc<Self>, NodeError> {
        let listener = TcpListener::bind(config.listen).await?;
        let endpoint = listener.local_addr()?;
        let identity = config.identity.clone();
        let clock = config.clock.clone();
        let digest = swarm_digest(config.swarm_key.as_deref());

        let (blocks, dmq_store, history, contacts, saved_log, records) = match &config.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let blocks = BlockStore::open(dir.join("blocks"), clock.clone())?;
                let dmq_store = DmqStore::open(dir.join("queues"), clock.clone())?;
                let (history, records) = History::open(dir.join("history.log"), identity.clone())?;
                let contacts = Contacts::open(dir.join("contacts.json"))?;
                let saved_log = std::fs::read(dir.join("membership.log")).ok();
                (blocks, dmq_store, history, contacts, saved_log, records)
            }
            None => (
                BlockStore::memory(clock.clone()),
                DmqStore::memory(clock.clone()),
                History::memory(identity.clone()),
                Contacts::memory(),
                None,
                Vec::new(),
            ),
        };

        let rpc = Arc::new(RpcClient::new(config.rpc_timeout));
        let dht = Arc::new(Dht::new(
            identity.clone(),
            endpoint,
            digest,
            rpc,
            clock.clone(),
            DhtConfig::default(),
        ));
        let blocks = Arc::new(blocks);
        let pins = Arc::new(PinService::new(
            identity.clone(),
            dht.clone(),
            blocks.clone(),
            config.replication,
        ));
        let dmq = Arc::new(Dmq::new(dht.clone(), Arc::new(dmq_store)));

        let genesis = config.genesis.unwrap_or_else(|| identity.public_keys());
        let mut governance = Governance::new(genesis);
        if let Some(bytes) = saved_log {
            if let Err(e) = governance.sync_from(&bytes) {
                warn!(error = %e, "ignoring unreadable membership log");
            }
        }

        let rendezvous_parts = config.rendezvous.map(|addr| {
            RendezvousClient::new(
                addr,
                identity.clone(),
                endpoint.to_string(),
                config.swarm_key.as_deref(),
                clock.clone(),
            )
        });
        let (rendezvous, relayed_rx) = match rendezvous_parts {
            Some((c, rx)) => (Some(c), Some(rx)),
            None => (None, None),
        };

        let (events, _) = broadcast::channel(8192);
        let private = config.swarm_key.is_some();
        let node = Arc::new_cyclic(|weak: &Weak<Node>| {
            let w = weak.clone();
            let handler = Arc::new(move |ev: ChannelEvent| {
                if let Some(n) = w.upgrade() {
                    n.on_channel_event(ev);
                }
            });
            let w = weak.clone();
            let authorize = Arc::new(move |peer: &PeerId| {
                !private || w.upgrade().is_some_and(|n| n.governance.lock().is_member(peer))
            });
            let channels = ChannelManager::new(
                identity.clone(),
                endpoint.to_string(),
                config.channel,
                handler,
                authorize,
            );
            if let Some(r) = &rendezvous {
                channels.set_rendezvous(r.clone());
            }
            Node {
                identity: identity.clone(),
                clock: clock.clone(),
                endpoint,
                dht,
                blocks,
                pins,
                dmq,
                governance: Mutex::new(governance),
                channels,
                rendezvous,
                contacts,
                history,
                outbound: Mutex::new(HashMap::new()),
                outbound_order: Mutex::new(Vec::new()),
                inbox: Mutex::new(Vec::new()),
                seen: Mutex::new(HashSet::new()),
                quarantine: Mutex::new(HashSet::new()),
                events,
                sync_lock: tokio::sync::Mutex::new(()),
                last_entry_ts: Mutex::new(0),
                api_addr: Mutex::new(None),
                cancel: CancellationToken::new(),
                tasks: TaskTracker::new(),
                config: config.clone(),
            }
        });
        node.restore_history(records);

        node.tasks.spawn(node.clone().accept_loop(listener));
        if let Some(mut rx) = relayed_rx {
            let n = node.clone();
            node.tasks.spawn(async move {
                loop {
                    tokio::select! {
                        _ = n.cancel.cancelled() => break,
                        r = rx.recv() => match r {
                            Some(r) => {
                                let n2 = n.clone();
                                tokio::spawn(async move { n2.channels.on_signal(r).await });
                            }
                            None => break,
                        }
                    }
                }
            });
        }

        if !config.bootstrap.is_empty() {
            match node.dht.bootstrap(&config.bootstrap).await {
                Ok(n) => info!(peers = n, "bootstrapped"),
                Err(e) => warn!(error = %e, "bootstrap failed; continuing alone"),
            }
            node.sync_governance().await;
        }
        if let Some(r) = &node.rendezvous {
            if private {
                r.set_membership_log(node.governance.lock().export_log());
            }
            if let Err(e) = r.register().await {
                warn!(error = %e, "rendezvous registration failed; will retry");
            }
            node.tasks
                .spawn(r.clone().heartbeat(HEARTBEAT_INTERVAL, node.cancel.child_token()));
        }
        node.tasks.spawn(node.clone().inbox_loop());
        node.tasks.spawn(node.clone().maintenance_loop());
        if let Some(port) = config.api_port {
            let addr = SocketAddr::from(([127, 0, 0, 1], port));
            let bound = api::serve(node.clone(), addr).await?;
            *node.api_addr.lock() = Some(bound);
        }
        info!(peer = %node.peer_id(), %endpoint, "node started");
        Ok(node)
    }

    fn restore_history(&self, records: Vec<HistoryRecord>) {
        for r in records {
            let (Ok(id), Ok(peer), Ok(body)) = (hex::decode(&r.msg_id), r.peer.parse::<PeerId>(), hex::decode(&r.body))
            else {
                continue;
            };
            let Ok(msg_id) = <MsgId>::try_from(id.as_slice()) else {
                continue;
            };
            if r.direction == "in" {
                self.seen.lock().insert(msg_id);
                self.inbox.lock().push(InboundMessage {
                    msg_id,
                    from: peer,
                    plaintext: body,
                    filename: r.filename,
                    created_at: r.at,
                    received_at: r.at,
                    received_at_us: r.at * 1000,
                    path: if r.detail == "direct" {
                        DeliveryPath::Direct
                    } else {
                        DeliveryPath::Dmq
                    },
                });
            } else {
                let state = match r.detail.as_str() {
                    "sent_direct" => OutboundState::SentDirect,
                    "queued" => OutboundState::Queued,
                    "delivered" => OutboundState::Delivered,
                    _ => OutboundState::Failed,
                };
                self.outbound_order.lock().push(msg_id);
                self.outbound.lock().insert(
                    msg_id,
                    OutboundMessage {
                        msg_id,
                        to: peer,
                        plaintext: body,
                        filename: r.filename,
                        created_at: r.at,
                        state,
                        error: None,
                    },
                );
            }
        }
    }

    pub fn peer_id(&self) -> PeerId {
        self.identity.peer_id()
    }

    pub fn identity(&self) -> &PeerIdentity {
        &self.identity
    }

    pub fn public_keys(&self) -> PublicKeys {
        self.identity.public_keys()
    }

    pub fn endpoint(&self) -> SocketAddr {
        self.endpoint
    }

    pub fn node_info(&self) -> NodeInfo {
        self.dht.local().clone()
    }

    pub fn api_addr(&self) -> Option<SocketAddr> {
        *self.api_addr.lock()
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn dht(&self) -> &Arc<Dht> {
        &self.dht
    }

    pub fn blocks(&self) -> &Arc<BlockStore> {
        &self.blocks
    }

    pub fn pins(&self) -> &Arc<PinService> {
        &self.pins
    }

    pub fn dmq(&self) -> &Arc<Dmq> {
        &self.dmq
    }

    pub fn channels(&self) -> &Arc<ChannelManager> {
        &self.channels
    }

    pub fn rendezvous(&self) -> Option<&Arc<RendezvousClient>> {
        self.rendezvous.as_ref()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<NodeEvent> {
        self.events.subscribe()
    }

    fn emit(&self, ev: NodeEvent) {
        let _ = self.events.send(ev);
    }

    pub fn inbox(&self) -> Vec<InboundMessage> {
        self.inbox.lock().clone()
    }

    pub fn outbox(&self) -> Vec<OutboundMessage> {
        let out = self.outbound.lock();
        self.outbound_order
            .lock()
            .iter()
            .filter_map(|id| out.get(id).cloned())
            .collect()
    }

    pub fn outbound(&self, msg_id: &MsgId) -> Option<OutboundMessage> {
        self.outbound.lock().get(msg_id).cloned()
    }

    pub fn quarantined(&self) -> Vec<ContentId> {
        let mut v: Vec<_> = self.quarantine.lock().iter().copied().collect();
        v.sort();
        v
    }

    // Contacts.

    pub fn add_contact(&self, peer: &PeerId, name: &str) -> Result<(), NodeError> {
        Ok(self.contacts.add(peer, name)?)
    }

    /// Records a peer's keys; they must hash to its id.
    pub fn learn_keys(&self, keys: &PublicKeys) -> Result<(), NodeError> {
        Ok(self.contacts.learn_keys(keys)?)
    }

    pub fn contacts(&self) -> Vec<(String, Contact)> {
        self.contacts.list()
    }

    /// Keys from contacts, the membership log, or the rendezvous directory.
    pub async fn resolve_keys(&self, peer: &PeerId) -> Result<PublicKeys, NodeError> {
        if let Some(k) = self.contacts.keys(peer) {
            return Ok(k);
        }
        if let Some(k) = self.governance.lock().state().members.get(peer) {
            return Ok(*k);
        }
        if let Some(r) = &self.rendezvous {
            if let Ok(Some(k)) = r.directory(peer).await {
                let _ = self.contacts.learn_keys(&k);
                return Ok(k);
            }
        }
        Err(NodeError::UnknownRecipient(*peer))
    }

    pub async fn presence(&self, peer: &PeerId) -> Result<Option<crate::rendezvous::Presence>, NodeError> {
        match &self.rendezvous {
            Some(r) => Ok(r.lookup(peer).await?),
            None => Ok(None),
        }
    }

    // Sending.

    fn set_state(&self, msg_id: &MsgId, state: OutboundState, error: Option<String>) {
        let updated = {
            let mut out = self.outbound.lock();
            match out.get_mut(msg_id) {
                Some(m) if m.state.can_become(state) => {
                    m.state = state;
                    m.error = error.clone();
                    Some(m.clone())
                }
                _ => None,
            }
        };
        if let Some(m) = updated {
            if state != OutboundState::Pending {
                let _ = self.history.append(&HistoryRecord {
                    direction: "out".into(),
                    msg_id: hex::encode(m.msg_id),
                    peer: m.to.to_hex(),
                    at: m.created_at,
                    detail: state.as_str().into(),
                    filename: m.filename.clone(),
                    body: hex::encode(&m.plaintext),
                });
            }
            self.emit(NodeEvent::Status {
                msg_id: *msg_id,
                state,
                error,
            });
        }
    }

    pub async fn send_message(&self, to: &PeerId, plaintext: &[u8]) -> Result<OutboundMessage, NodeError> {
        self.send(to, plaintext, None).await
    }

    pub async fn send_file(&self, to: &PeerId, filename: &str, data: &[u8]) -> Result<OutboundMessage, NodeError> {
        self.send(to, data, Some(filename.to_string())).await
    }

    /// Delivers through exactly one path. A `Failed` message is returned
    /// (not an error) when both paths fail; errors are for bad input.
    pub async fn send(
        &self,
        to: &PeerId,
        plaintext: &[u8],
        filename: Option<String>,
    ) -> Result<OutboundMessage, NodeError> {
        if plaintext.len() > MAX_PLAINTEXT {
            return Err(NodeError::TooLarge(plaintext.len()));
        }
        let keys = self.resolve_keys(to).await?;
        let env = Envelope {
            msg_id: random_bytes(),
            created_at: self.clock.now_ms(),
            filename: filename.clone(),
            body: plaintext.to_vec(),
        };
        let msg = OutboundMessage {
            msg_id: env.msg_id,
            to: *to,
            plaintext: plaintext.to_vec(),
            filename,
            created_at: env.created_at,
            state: OutboundState::Pending,
            error: None,
        };
        self.outbound.lock().insert(msg.msg_id, msg.clone());
        self.outbound_order.lock().push(msg.msg_id);

        let direct_err = match self.try_direct(to, &env).await {
            Ok(()) => {
                self.set_state(&msg.msg_id, OutboundState::SentDirect, None);
                return Ok(self.outbound(&msg.msg_id).unwrap());
            }
            Err(e) => e,
        };
        debug!(to = %to, error = %direct_err, "direct path unavailable; queueing");
        match self.send_via_queue(&keys, &env).await {
            Ok(()) => self.set_state(&msg.msg_id, OutboundState::Queued, None),
            Err(e) => {
                let reason = format!("direct: {direct_err}; store-and-forward: {e}");
                self.set_state(&msg.msg_id, OutboundState::Failed, Some(reason));
            }
        }
        Ok(self.outbound(&msg.msg_id).unwrap())
    }

    async fn try_direct(&self, to: &PeerId, env: &Envelope) -> Result<(), NodeError> {
        if !self.config.direct {
            return Err(NodeError::NoConnectivity("direct path disabled".into()));
        }
        if self.rendezvous.is_none() {
            return Err(NodeError::NoConnectivity("no rendezvous".into()));
        }
        let bytes = env.encode();
        let attempt = async {
            let ch = self.channels.dial(*to).await?;
            match ch.send_confirmed(&bytes).await {
                Ok(_) => Ok(()),
                Err(ChannelError::ChannelClosed) if !ch.is_open() => {
                    // the cached channel died under us; one fresh dial
                    let ch = self.channels.dial(*to).await?;
                    ch.send_confirmed(&bytes).await.map(|_| ())
                }
                Err(e) => Err(e),
            }
        };
        match tokio::time::timeout(DIRECT_BUDGET, attempt).await {
            Ok(r) => Ok(r?),
            Err(_) => Err(ChannelError::Timeout.into()),
        }
    }

    async fn send_via_queue(&self, keys: &PublicKeys, env: &Envelope) -> Result<(), NodeError> {
        if self.dht.peer_count() == 0 {
            return Err(NodeError::NoConnectivity("no swarm peers".into()));
        }
        let me = self.peer_id();
        let to = keys.peer_id();
        let nonce = random_nonce();
        let sealed = seal(&env.encode(), &self.identity, &keys.enc_public, nonce)?;
        let meta = ManifestMeta {
            sender_public: *self.identity.enc_public(),
            recipient: to,
            nonce,
        };
        let (manifest, mut blocks) = chunk_payload(&sealed.ciphertext, self.config.chunk_size, meta)?;
        blocks.push(manifest.to_block());
        let releasers = vec![me, to];
        for b in &blocks {
            self.blocks.put_block(b)?;
        }
        let pinned = join_all(blocks.iter().map(|b| self.pins.pin(&b.cid, releasers.clone()))).await;
        for (b, r) in blocks.iter().zip(pinned) {
            let record = r?;
            let remote = record.holders.iter().filter(|h| **h != me).count();
            if remote >= self.config.replication {
                // fully replicated elsewhere; our copy is not needed
                self.blocks.release(&b.cid)?;
            } else {
                self.pins.hold_locally(&b.cid, &releasers).await?;
            }
        }
        // strictly increasing per sender, so queue order is send order
        let ts = {
            let mut last = self.last_entry_ts.lock();
            *last = self.clock.now_ms().max(*last + 1);
            *last
        };
        let entry = QueueEntry::new_signed(&self.identity, to, manifest.message_cid(), ts);
        self.dmq
            .enqueue(QueuedItem {
                entry,
                sender_keys: self.identity.public_keys(),
            })
            .await?;
        Ok(())
    }

    // Receiving.

    fn deliver(&self, env: Envelope, from: PeerId, path: DeliveryPath) -> Option<InboundMessage> {
        if !self.seen.lock().insert(env.msg_id) {
            return None;
        }
        let m = InboundMessage {
            msg_id: env.msg_id,
            from,
            plaintext: env.body,
            filename: env.filename,
            created_at: env.created_at,
            received_at: system_now_ms(),
            received_at_us: micros_now(),
            path,
        };
        self.inbox.lock().push(m.clone());
        let _ = self.history.append(&HistoryRecord {
            direction: "in".into(),
            msg_id: hex::encode(m.msg_id),
            peer: from.to_hex(),
            at: m.received_at,
            detail: path.as_str().into(),
            filename: m.filename.clone(),
            body: hex::encode(&m.plaintext),
        });
        self.emit(NodeEvent::Inbound(m.clone()));
        Some(m)
    }

    fn on_channel_event(&self, ev: ChannelEvent) {
        match ev {
            ChannelEvent::Message { peer, body, .. } => match Envelope::decode(&body) {
                Ok(env) => {
                    self.deliver(env, peer, DeliveryPath::Direct);
                }
                Err(e) => warn!(%peer, error = %e, "undecodable direct message"),
            },
            ChannelEvent::Closed { peer, reason, .. } => {
                debug!(%peer, ?reason, "channel closed");
            }
        }
    }

    /// Drains the queue and surfaces every entry that verifies. Runs never
    /// overlap.
    pub async fn sync_inbox(&self) -> Result<Vec<InboundMessage>, NodeError> {
        let _guard = self.sync_lock.lock().await;
        if self.dht.peer_count() == 0 && self.dmq.store().get(&self.peer_id()).is_none() {
            return Ok(Vec::new());
        }
        let items = self.dmq.drain(&self.identity).await?;
        let mut delivered = Vec::new();
        let mut acks = Vec::new();
        let mut release = Vec::new();
        for item in items {
            let cid = item.entry.msg_cid;
            if self.quarantine.lock().contains(&cid) {
                continue;
            }
            match self.receive_item(&item).await {
                Ok((msg, cids)) => {
                    acks.push(cid);
                    release.extend(cids);
                    delivered.extend(msg);
                }
                Err(ReceiveFailure::Retrieve(reason)) => {
                    debug!(%cid, %reason, "entry left pending");
                }
                Err(ReceiveFailure::Reject(reason)) => {
                    warn!(%cid, %reason, "entry quarantined");
                    self.quarantine.lock().insert(cid);
                    self.emit(NodeEvent::Quarantined {
                        msg_cid: cid,
                        from: item.entry.sender,
                        reason,
                    });
                }
            }
        }
        if !acks.is_empty() {
            self.dmq.ack(&self.identity, acks).await?;
            join_all(release.iter().map(|c| self.pins.unpin(c))).await;
        }
        Ok(delivered)
    }

    async fn fetch_verified(&self, cid: &ContentId) -> Result<Chunk, ReceiveFailure> {
        self.pins
            .fetch(cid)
            .await
            .map_err(|e| ReceiveFailure::Retrieve(e.to_string()))
    }

    /// Returns the message (None for a duplicate) and every block to release.
    async fn receive_item(
        &self,
        item: &QueuedItem,
    ) -> Result<(Option<InboundMessage>, Vec<ContentId>), ReceiveFailure> {
        if !item.verify() || item.entry.recipient != self.peer_id() {
            return Err(ReceiveFailure::Reject("queue entry signature".into()));
        }
        let cid = item.entry.msg_cid;
        let manifest_block = self.fetch_verified(&cid).await?;
        let manifest = Manifest::decode(&manifest_block.data).map_err(|e| ReceiveFailure::Reject(e.to_string()))?;
        if manifest.recipient != self.peer_id() || manifest.sender_public != item.sender_keys.enc_public {
            return Err(ReceiveFailure::Reject("manifest does not match the entry".into()));
        }
        let chunks = join_all(manifest.chunk_cids.iter().map(|c| self.fetch_verified(c))).await;
        let chunks: Vec<Chunk> = chunks.into_iter().collect::<Result<_, _>>()?;
        let ciphertext = reassemble(&manifest, &chunks).map_err(|e| ReceiveFailure::Retrieve(e.to_string()))?;
        let sealed = SealedBox {
            nonce: manifest.nonce,
            ciphertext,
        };
        let plain = open(&sealed, &self.identity, &item.sender_keys.enc_public)
            .map_err(|e| ReceiveFailure::Reject(format!("open: {e}")))?;
        let env = Envelope::decode(&plain).map_err(|e| ReceiveFailure::Reject(format!("envelope: {e}")))?;
        let _ = self.contacts.learn_keys(&item.sender_keys);
        let msg = self.deliver(env, item.entry.sender, DeliveryPath::Dmq);
        let mut cids = manifest.chunk_cids.clone();
        cids.push(cid);
        Ok((msg, cids))
    }

    // Governance.

    pub fn membership(&self) -> MembershipState {
        self.governance.lock().state().clone()
    }

    pub fn proposals(&self) -> Vec<ProposalStatus> {
        self.governance.lock().proposals(self.clock.now_ms())
    }

    pub fn proposal_status(&self, pid: &ProposalId) -> Result<ProposalStatus, NodeError> {
        Ok(self.governance.lock().status(pid, self.clock.now_ms())?)
    }

    pub fn export_membership_log(&self) -> Vec<u8> {
        self.governance.lock().export_log()
    }

    pub async fn propose(&self, kind: ProposalKind) -> Result<Proposal, NodeError> {
        let p = self
            .governance
            .lock()
            .propose(&self.identity, kind, self.clock.now_ms(), DEFAULT_PROPOSAL_TTL_MS)?;
        self.announce_proposal(&p.id());
        self.gossip(msg::PROPOSE, p.encode()).await;
        Ok(p)
    }

    pub async fn vote(&self, pid: &ProposalId, choice: Choice) -> Result<ProposalStatus, NodeError> {
        let now = self.clock.now_ms();
        let (ballot, ev) = {
            let mut g = self.governance.lock();
            let status = g.status(pid, now)?;
            if now >= status.proposal.deadline && !status.applied {
                return Err(ConsensusError::Expired.into());
            }
            g.cast_vote(&self.identity, pid, choice, now)?
        };
        self.after_governance_event(pid, &ev).await;
        self.gossip(msg::BALLOT, ballot.encode()).await;
        self.proposal_status(pid)
    }

    fn announce_proposal(&self, pid: &ProposalId) {
        if let Ok(s) = self.proposal_status(pid) {
            self.emit(NodeEvent::Proposal(s));
        }
    }

    async fn after_governance_event(&self, pid: &ProposalId, ev: &GovEvent) {
        self.announce_proposal(pid);
        if let GovEvent::Applied { epoch } = ev {
            self.on_membership_changed(*epoch).await;
        }
    }

    async fn on_membership_changed(&self, epoch: u64) {
        let (log, members, removed): (Vec<u8>, usize, Vec<PeerId>) = {
            let g = self.governance.lock();
            let state = g.state();
            let removed = self
                .channels
                .open_channels()
                .iter()
                .map(|c| c.peer())
                .filter(|p| !state.is_member(p))
                .collect();
            (g.export_log(), state.members.len(), removed)
        };
        if let Some(dir) = &self.config.data_dir {
            if let Err(e) = std::fs::write(dir.join("membership.log"), &log) {
                warn!(error = %e, "could not persist membership log");
            }
        }
        if self.config.swarm_key.is_some() {
            for p in removed {
                if let Some(c) = self.channels.channel(&p) {
                    c.close().await;
                }
            }
            if let Some(r) = &self.rendezvous {
                if let Err(e) = r.publish_membership(log).await {
                    debug!(error = %e, "membership publish failed");
                }
            }
        }
        self.emit(NodeEvent::Membership { epoch, members });
    }

    async fn gossip(&self, kind: u8, body: Vec<u8>) {
        let peers = self.dht.known_peers();
        join_all(peers.iter().map(|p| {
            let body = &body;
            async move {
                if let Err(e) = self.dht.request(p, kind, body).await {
                    debug!(peer = %p.peer_id, error = %e, "gossip failed");
                }
            }
        }))
        .await;
    }

    /// Pulls the membership log from known peers and adopts any longer
    /// valid extension of ours.
    pub async fn sync_governance(&self) {
        let peers = self.dht.known_peers();
        for p in peers.iter().take(crate::dht::ALPHA) {
            let Ok(f) = self.dht.request(p, msg::STATE_REQ, &[]).await else {
                continue;
            };
            let Ok(bytes) = expect(f, msg::STATE_RESP) else {
                continue;
            };
            let changed = self.governance.lock().sync_from(&bytes);
            match changed {
                Ok(true) => {
                    let epoch = self.governance.lock().state().epoch;
                    self.on_membership_changed(epoch).await;
                }
                Ok(false) => {}
                Err(e) => debug!(peer = %p.peer_id, error = %e, "membership log rejected"),
            }
        }
    }

    async fn handle_governance(&self, kind: u8, body: &[u8]) -> Option<Result<Frame, NodeError>> {
        let now = self.clock.now_ms();
        let r = match kind {
            msg::PROPOSE => {
                (async {
                    let p = Proposal::decode(body)?;
                    let pid = p.id();
                    let ev = self.governance.lock().receive_proposal(p)?;
                    if ev == GovEvent::Recorded {
                        self.announce_proposal(&pid);
                    }
                    Ok(Frame::new(msg::GOSSIP_OK, vec![]))
                })
                .await
            }
            msg::BALLOT => {
                (async {
                    let b = Ballot::decode(body)?;
                    let pid = b.proposal_id;
                    let ev = self.governance.lock().receive_ballot(b, now)?;
                    if ev != GovEvent::Duplicate {
                        self.after_governance_event(&pid, &ev).await;
                    }
                    Ok(Frame::new(msg::GOSSIP_OK, vec![]))
                })
                .await
            }
            msg::STATE_REQ => Ok(Frame::new(msg::STATE_RESP, self.governance.lock().export_log())),
            _ => return None,
        };
        Some(r)
    }

    // RPC server.

    async fn accept_loop(self: Arc<Self>, listener: TcpListener) {
        loop {
            tokio::select! {
                _ = self.cancel.cancelled() => break,
                r = listener.accept() => match r {
                    Ok((stream, _)) => {
                        let _ = stream.set_nodelay(true);
                        let n = self.clone();
                        self.tasks.spawn(async move { n.serve_conn(stream).await });
                    }
                    Err(e) => {
                        warn!(error = %e, "accept failed");
                        tokio::time::sleep(Duration::from_millis(50)).await;
                    }
                }
            }
        }
    }

    async fn serve_conn(self: Arc<Self>, mut stream: TcpStream) {
        let first = tokio::select! {
            _ = self.cancel.cancelled() => return,
            f = read_frame(&mut stream, MAX_FRAME_LEN) => f,
        };
        let Ok(Some(mut frame)) = first else { return };
        if frame.kind == msg::CHANNEL_HELLO {
            if let Err(e) = self.channels.accept_hello(stream, frame).await {
                debug!(error = %e, "inbound channel handshake failed");
            }
            return;
        }
        loop {
            let reply = self.handle_rpc(frame).await;
            if write_frame(&mut stream, &reply).await.is_err() {
                return;
            }
            frame = tokio::select! {
                _ = self.cancel.cancelled() => return,
                f = read_frame(&mut stream, MAX_FRAME_LEN) => match f {
                    Ok(Some(f)) => f,
                    _ => return,
                },
            };
        }
    }

    async fn handle_rpc(&self, frame: Frame) -> Frame {
        let mut d = Decoder::new(&frame.payload);
        let header = match RequestHeader::decode(&mut d) {
            Ok(h) => h,
            Err(e) => return error_frame(e.to_string()),
        };
        if header.swarm_digest != *self.dht.swarm_digest() {
            return error_frame("wrong swarm");
        }
        if header.sender.peer_id != self.peer_id() {
            let mut seen = header.sender.clone();
            seen.last_seen = self.clock.now_ms();
            self.dht.observe(seen);
        }
        let body = d.rest();
        if let Some(r) = self.dht.dispatch(frame.kind, body) {
            return r.unwrap_or_else(|e| error_frame(e.to_string()));
        }
        if let Some(r) = self.dmq.store().dispatch(frame.kind, body) {
            return r.unwrap_or_else(|e| error_frame(e.to_string()));
        }
        if let Some(r) = self.pins.dispatch(frame.kind, body).await {
            return r.unwrap_or_else(|e| error_frame(e.to_string()));
        }
        if let Some(r) = self.handle_governance(frame.kind, body).await {
            return r.unwrap_or_else(|e| error_frame(e.to_string()));
        }
        error_frame(format!("unknown message type 0x{:02x}", frame.kind))
    }

    // Background work.

    async fn inbox_loop(self: Arc<Self>) {
        loop {
            if let Err(e) = self.sync_inbox().await {
                debug!(error = %e, "inbox sync failed");
            }
            tokio::select! {
                _ = self.cancel.cancelled() => break,
                _ = tokio::time::sleep(self.config.sync_interval) => {}
            }
        }
    }

    async fn maintenance_loop(self: Arc<Self>) {
        loop {
            tokio::select! {
                _ = self.cancel.cancelled() => break,
                _ = tokio::time::sleep(self.config.maintenance_interval) => {}
            }
            self.maintain().await;
        }
    }

    /// One maintenance cycle: routing refresh, record and queue republish,
    /// membership sync, then garbage collection.
    pub async fn maintain(&self) {
        self.dht.refresh().await;
        self.dht.republish().await;
        self.dmq.republish().await;
        self.sync_governance().await;
        self.gc();
    }

    /// Deletes released or expired blocks, expired records and old
    /// tombstones. Returns the number of blocks removed.
    pub fn gc(&self) -> usize {
        self.dht.sweep();
        self.dmq.store().sweep();
        self.blocks.gc(self.clock.now_ms())
    }

    /// Stops every service and closes every socket.
    pub async fn shutdown(&self) {
        self.cancel.cancel();
        self.channels.close_all().await;
        if let Some(r) = &self.rendezvous {
            r.disconnect().await;
        }
        self.dht.rpc().clear();
        self.tasks.close();
        let _ = tokio::time::timeout(Duration::from_secs(2), self.tasks.wait()).await;
        info!(peer = %self.peer_id(), "node stopped");
    }

    /// Summary used by the status command.
    pub fn status_json(&self) -> serde_json::Value {
        let m = self.membership();
        serde_json::json!({
            "peer_id": self.peer_id().to_hex(),
            "endpoint": self.endpoint.to_string(),
            "peers": self.dht.peer_count(),
            "records": self.dht.record_count(),
            "blocks": self.blocks.len(),
            "queued_for_others": self.dmq.store().pending(),
            "open_channels": self.channels.open_channels().len(),
            "inbox": self.inbox.lock().len(),
            "outbox": self.outbound.lock().len(),
            "epoch": m.epoch,
            "members": m.members.len(),
            "private": self.config.swarm_key.is_some(),
        })
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        self.cancel.cancel();
    }
}
