//! Signaling service: signed presence registration, lookup, a key
//! directory, and opaque relay of channel offers and answers.
//!
//! Clients hold one persistent connection. Requests are answered in order
//! on that connection; relayed payloads arrive on it as unsolicited
//! `RELAYED` frames. The server keeps everything in memory and never writes
//! to disk: restarting it loses presence only, which clients restore on
//! their next heartbeat.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

use crate::clock::{Clock, UnixMs};
use crate::consensus::{decode_log, replay, MembershipState};
use crate::crypto::{PeerId, PeerIdentity, PublicKeys, Signature};
use crate::rpc::swarm_digest;
use crate::wire::{read_frame, write_frame, Decoder, Encoder, Frame, WireError};

pub const PRESENCE_TTL_MS: u64 = 60_000;
pub const HEARTBEAT_INTERVAL: Duration = Duration::from_secs(20);
/// Offers and answers are small; anything bigger is refused.
pub const MAX_RELAY_PAYLOAD: usize = 64 * 1024;
const MAX_SIGNAL_FRAME: usize = 1024 * 1024;
const REGISTER_TAG: &[u8] = b"fybrr/rendezvous/register/v1";
const REQUEST_TIMEOUT: Duration = Duration::from_secs(5);

pub mod msg {
    pub const REGISTER: u8 = 0x60;
    pub const REGISTERED: u8 = 0x61;
    pub const LOOKUP: u8 = 0x62;
    pub const PRESENCE: u8 = 0x63;
    pub const RELAY: u8 = 0x64;
    pub const RELAY_RESULT: u8 = 0x65;
    pub const RELAYED: u8 = 0x66;
    pub const DIRECTORY: u8 = 0x67;
    pub const KEYS: u8 = 0x68;
    pub const MEMBERSHIP: u8 = 0x69;
    pub const MEMBERSHIP_OK: u8 = 0x6a;
    pub const ERROR: u8 = 0x7f;
}

#[derive(Debug, Error)]
pub enum RendezvousError {
    #[error("registration signature invalid")]
    BadSignature,
    #[error("registration timestamp outside the presence window")]
    StaleRegistration,
    #[error("wrong swarm key")]
    WrongSwarm,
    #[error("{0} is not a member of this swarm")]
    NotMember(PeerId),
    #[error("server returned keys that do not hash to {0}")]
    KeyMismatch(PeerId),
    #[error("register before relaying")]
    NotRegistered,
    #[error("relay payload of {0} bytes exceeds the limit")]
    PayloadTooLarge(usize),
    #[error("membership log rejected: {0}")]
    Membership(String),
    #[error("server error: {0}")]
    Server(String),
    #[error("connection to rendezvous closed")]
    Closed,
    #[error("rendezvous request timed out")]
    Timeout,
    #[error("unexpected response 0x{0:02x}")]
    Unexpected(u8),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A signed presence claim.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Registration {
    pub keys: PublicKeys,
    pub endpoint: String,
    pub timestamp: UnixMs,
    pub swarm_digest: [u8; 32],
    pub signature: Signature,
}

impl Registration {
    fn signing_bytes(keys: &PublicKeys, endpoint: &str, timestamp: UnixMs, digest: &[u8; 32]) -> Vec<u8> {
        Encoder::new()
            .raw(REGISTER_TAG)
            .raw(&keys.encode())
            .str(endpoint)
            .u64(timestamp)
            .raw(digest)
            .finish()
    }

    pub fn new_signed(id: &PeerIdentity, endpoint: String, timestamp: UnixMs, swarm_digest: [u8; 32]) -> Self {
        let keys = id.public_keys();
        let signature = id.sign(&Self::signing_bytes(&keys, &endpoint, timestamp, &swarm_digest));
        Self {
            keys,
            endpoint,
            timestamp,
            swarm_digest,
            signature,
        }
    }

    pub fn peer_id(&self) -> PeerId {
        self.keys.peer_id()
    }

    pub fn verify(&self) -> bool {
        self.keys.verify(
            &Self::signing_bytes(&self.keys, &self.endpoint, self.timestamp, &self.swarm_digest),
            &self.signature,
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        Encoder::new()
            .raw(&self.keys.encode())
            .str(&self.endpoint)
            .u64(self.timestamp)
            .raw(&self.swarm_digest)
            .raw(&self.signature)
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut d = Decoder::new(bytes);
        let keys = PublicKeys::decode(d.take(PublicKeys::ENCODED_LEN)?).map_err(|_| WireError::Invalid("keys"))?;
        let r = Self {
            keys,
            endpoint: d.string()?,
            timestamp: d.u64()?,
            swarm_digest: d.array()?,
            signature: d.array()?,
        };
        d.finish()?;
        Ok(r)
    }
}

/// A live presence entry as reported by lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Presence {
    pub peer_id: PeerId,
    pub endpoint: String,
    pub keys: PublicKeys,
    pub expires_at: UnixMs,
}

#[derive(Clone, Debug, Default)]
pub struct ServerConfig {
    /// Pre-shared swarm key; `None` runs a public swarm.
    pub swarm_key: Option<Vec<u8>>,
    /// Genesis member of the private swarm. When absent, the first valid
    /// membership log published by a swarm-key holder fixes it.
    pub genesis: Option<PublicKeys>,
}

struct Entry {
    endpoint: String,
    keys: PublicKeys,
    expires_at: UnixMs,
    conn: u64,
    tx: mpsc::UnboundedSender<Frame>,
}

struct Membership {
    genesis: PublicKeys,
    log_len: usize,
    state: MembershipState,
}

struct Shared {
    presence: Mutex<HashMap<PeerId, Entry>>,
    directory: Mutex<HashMap<PeerId, PublicKeys>>,
    membership: Mutex<Option<Membership>>,
    digest: [u8; 32],
    private: bool,
    clock: Clock,
    next_conn: AtomicU64,
}

/// Everything the server holds, for audits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServerSnapshot {
    pub presence: Vec<Presence>,
    pub directory: Vec<(PeerId, PublicKeys)>,
    pub membership_epoch: Option<u64>,
}

pub struct RendezvousServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    cancel: CancellationToken,
    task: Option<JoinHandle<()>>,
}

impl RendezvousServer {
    pub async fn bind(addr: SocketAddr, config: ServerConfig, clock: Clock) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let membership = config.genesis.map(|g| Membership {
            genesis: g,
            log_len: 0,
            state: MembershipState::genesis(g),
        });
        let shared = Arc::new(Shared {
            presence: Mutex::new(HashMap::new()),
            directory: Mutex::new(HashMap::new()),
            membership: Mutex::new(membership),
            digest: swarm_digest(config.swarm_key.as_deref()),
            private: config.swarm_key.is_some(),
            clock,
            next_conn: AtomicU64::new(1),
        });
        let cancel = CancellationToken::new();
        let task = tokio::spawn(accept_loop(listener, shared.clone(), cancel.clone()));
        info!(%addr, private = shared.private, "rendezvous listening");
        Ok(Self {
            addr,
            shared,
            cancel,
            task: Some(task),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn snapshot(&self) -> ServerSnapshot {
        let now = self.shared.clock.now_ms();
        let mut presence: Vec<Presence> = self
            .shared
            .presence
            .lock()
            .iter()
            .filter(|(_, e)| e.expires_at > now)
            .map(|(p, e)| Presence {
                peer_id: *p,
                endpoint: e.endpoint.clone(),
                keys: e.keys,
                expires_at: e.expires_at,
            })
            .collect();
        presence.sort_by_key(|p| p.peer_id);
        let mut directory: Vec<_> = self.shared.directory.lock().iter().map(|(p, k)| (*p, *k)).collect();
        directory.sort_by_key(|(p, _)| *p);
        ServerSnapshot {
            presence,
            directory,
            membership_epoch: self.shared.membership.lock().as_ref().map(|m| m.state.epoch),
        }
    }

    pub async fn shutdown(mut self) {
        self.cancel.cancel();
        if let Some(t) = self.task.take() {
            let _ = t.await;
        }
    }

    /// Waits until the server task ends (it runs until shut down).
    pub async fn run_until_cancelled(mut self, stop: CancellationToken) {
        stop.cancelled().await;
        self.cancel.cancel();
        if let Some(t) = self.task.take() {
            let _ = t.await;
        }
    }
}

impl Drop for RendezvousServer {
    fn drop(&mut self) {
        self.cancel.cancel();
    }
}

async fn accept_loop(listener: TcpListener, shared: Arc<Shared>, cancel: CancellationToken) {
    let conns = tokio_util::task::TaskTracker::new();
    loop {
        tokio::select! {
            _ = cancel.cancelled() => break,
            r = listener.accept() => match r {
                Ok((stream, peer)) => {
                    let _ = stream.set_nodelay(true);
                    let shared = shared.clone();
                    let cancel = cancel.clone();
                    conns.spawn(async move {
                        if let Err(e) = serve_conn(stream, shared, cancel).await {
                            debug!(%peer, error = %e, "rendezvous connection ended");
                        }
                    });
                }
                Err(e) => warn!(error = %e, "accept failed"),
            }
        }
    }
    conns.close();
    conns.wait().await;
}

async fn serve_conn(stream: TcpStream, shared: Arc<Shared>, cancel: CancellationToken) -> Result<(), RendezvousError> {
    let conn = shared.next_conn.fetch_add(1, Ordering::Relaxed);
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Frame>();
    let writer = tokio::spawn(async move {
        while let Some(f) = rx.recv().await {
            if write_frame(&mut wr, &f).await.is_err() {
                break;
            }
        }
    });
    let mut registered: Option<PeerId> = None;
    let result = loop {
        let frame = tokio::select! {
            _ = cancel.cancelled() => break Ok(()),
            f = read_frame(&mut rd, MAX_SIGNAL_FRAME) => f,
        };
        let frame = match frame {
            Ok(Some(f)) => f,
            Ok(None) => break Ok(()),
            Err(e) => break Err(e.into()),
        };
        let reply = handle(&shared, conn, &tx, &mut registered, frame)
            .unwrap_or_else(|e| Frame::new(msg::ERROR, e.to_string().into_bytes()));
        if tx.send(reply).is_err() {
            break Ok(());
        }
    };
    if let Some(p) = registered {
        let mut presence = shared.presence.lock();
        if presence.get(&p).is_some_and(|e| e.conn == conn) {
            presence.remove(&p);
        }
    }
    drop(tx);
    writer.abort();
    result
}

fn handle(
    shared: &Shared,
    conn: u64,
    tx: &mpsc::UnboundedSender<Frame>,
    registered: &mut Option<PeerId>,
    frame: Frame,
) -> Result<Frame, RendezvousError> {
    let now = shared.clock.now_ms();
    match frame.kind {
        msg::REGISTER => {
            let reg = Registration::decode(&frame.payload)?;
            if !reg.verify() {
                return Err(RendezvousError::BadSignature);
            }
            if now.abs_diff(reg.timestamp) > PRESENCE_TTL_MS {
                return Err(RendezvousError::StaleRegistration);
            }
            if reg.swarm_digest != shared.digest {
                return Err(RendezvousError::WrongSwarm);
            }
            let peer = reg.peer_id();
            if shared.private {
                let m = shared.membership.lock();
                if !m.as_ref().is_some_and(|m| m.state.is_member(&peer)) {
                    return Err(RendezvousError::NotMember(peer));
                }
            }
            let expires_at = now + PRESENCE_TTL_MS;
            shared.presence.lock().insert(
                peer,
                Entry {
                    endpoint: reg.endpoint,
                    keys: reg.keys,
                    expires_at,
                    conn,
                    tx: tx.clone(),
                },
            );
            shared.directory.lock().insert(peer, reg.keys);
            *registered = Some(peer);
            Ok(Frame::new(msg::REGISTERED, Encoder::new().u64(expires_at).finish()))
        }
        msg::LOOKUP => {
            let peer = PeerId::from_slice(&frame.payload).map_err(|_| WireError::Invalid("peer id"))?;
            let presence = shared.presence.lock();
            let e = match presence.get(&peer) {
                Some(e) if e.expires_at > now && !revoked(shared, &peer) => Encoder::new()
                    .bool(true)
                    .raw(&e.keys.encode())
                    .str(&e.endpoint)
                    .u64(e.expires_at),
                _ => Encoder::new().bool(false),
            };
            Ok(Frame::new(msg::PRESENCE, e.finish()))
        }
        msg::RELAY => {
            let from = registered.ok_or(RendezvousError::NotRegistered)?;
            let mut d = Decoder::new(&frame.payload);
            let to = PeerId(d.array()?);
            let payload = d.var()?;
            d.finish()?;
            if payload.len() > MAX_RELAY_PAYLOAD {
                return Err(RendezvousError::PayloadTooLarge(payload.len()));
            }
            let presence = shared.presence.lock();
            let delivered = match presence.get(&to) {
                Some(e) if e.expires_at > now && !revoked(shared, &to) => {
                    e.tx.send(Frame::new(
                        msg::RELAYED,
                        Encoder::new().raw(from.as_bytes()).var(payload).finish(),
                    ))
                    .is_ok()
                }
                _ => false,
            };
            Ok(Frame::new(msg::RELAY_RESULT, vec![delivered as u8]))
        }
        msg::DIRECTORY => {
            let peer = PeerId::from_slice(&frame.payload).map_err(|_| WireError::Invalid("peer id"))?;
            let e = match shared.directory.lock().get(&peer) {
                Some(k) => Encoder::new().bool(true).raw(&k.encode()),
                None => Encoder::new().bool(false),
            };
            Ok(Frame::new(msg::KEYS, e.finish()))
        }
        msg::MEMBERSHIP => {
            let mut d = Decoder::new(&frame.payload);
            let digest: [u8; 32] = d.array()?;
            let log_bytes = d.rest();
            if digest != shared.digest {
                return Err(RendezvousError::WrongSwarm);
            }
            let (genesis, log) = decode_log(log_bytes)?;
            let mut m = shared.membership.lock();
            if let Some(cur) = m.as_ref() {
                if cur.genesis != genesis {
                    return Err(RendezvousError::Membership("different genesis".into()));
                }
            }
            let state = replay(genesis, &log).map_err(|e| RendezvousError::Membership(e.to_string()))?;
            let newer = m.as_ref().is_none_or(|cur| log.len() > cur.log_len);
            if newer {
                *m = Some(Membership {
                    genesis,
                    log_len: log.len(),
                    state,
                });
            }
            let epoch = m.as_ref().map_or(0, |m| m.state.epoch);
            drop(m);
            if newer {
                // revoked members lose their presence immediately
                let m = shared.membership.lock();
                if let Some(m) = m.as_ref() {
                    shared.presence.lock().retain(|p, _| m.state.is_member(p));
                }
            }
            Ok(Frame::new(msg::MEMBERSHIP_OK, Encoder::new().u64(epoch).finish()))
        }
        k => Err(RendezvousError::Unexpected(k)),
    }
}

fn revoked(shared: &Shared, peer: &PeerId) -> bool {
    shared.private
        && !shared
            .membership
            .lock()
            .as_ref()
            .is_some_and(|m| m.state.is_member(peer))
}

/// A payload relayed to us by another peer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Relayed {
    pub from: PeerId,
    pub payload: Vec<u8>,
}

struct Conn {
    writer: tokio::sync::Mutex<Box<dyn AsyncWrite + Send + Unpin>>,
    pending: Arc<Mutex<VecDeque<oneshot::Sender<Frame>>>>,
    reader: JoinHandle<()>,
    closed: CancellationToken,
}

impl Drop for Conn {
    fn drop(&mut self) {
        self.reader.abort();
    }
}

/// Client side of the signaling connection. Reconnects and re-registers
/// lazily when the connection has dropped.
pub struct RendezvousClient {
    server: SocketAddr,
    identity: PeerIdentity,
    endpoint: String,
    digest: [u8; 32],
    clock: Clock,
    conn: tokio::sync::Mutex<Option<Arc<Conn>>>,
    relayed: mpsc::UnboundedSender<Relayed>,
    membership_log: Mutex<Option<Vec<u8>>>,
}

impl std::fmt::Debug for RendezvousClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RendezvousClient")
            .field("server", &self.server)
            .finish()
    }
}

impl RendezvousClient {
    /// Returns the client and the stream of payloads relayed to us.
    pub fn new(
        server: SocketAddr,
        identity: PeerIdentity,
        endpoint: String,
        swarm_key: Option<&[u8]>,
        clock: Clock,
    ) -> (Arc<Self>, mpsc::UnboundedReceiver<Relayed>) {
        let (tx, rx) = mpsc::unbounded_channel();
        (
            Arc::new(Self {
                server,
                identity,
                endpoint,
                digest: swarm_digest(swarm_key),
                clock,
                conn: tokio::sync::Mutex::new(None),
                relayed: tx,
                membership_log: Mutex::new(None),
            }),
            rx,
        )
    }

    pub fn server(&self) -> SocketAddr {
        self.server
    }

    /// Membership log sent ahead of every (re-)registration in private swarms.
    pub fn set_membership_log(&self, log: Vec<u8>) {
        *self.membership_log.lock() = Some(log);
    }

    async fn open(&self) -> Result<Arc<Conn>, RendezvousError> {
        let stream = tokio::time::timeout(REQUEST_TIMEOUT, TcpStream::connect(self.server))
            .await
            .map_err(|_| RendezvousError::Timeout)??;
        let _ = stream.set_nodelay(true);
        let (rd, wr) = stream.into_split();
        let pending: Arc<Mutex<VecDeque<oneshot::Sender<Frame>>>> = Default::default();
        let closed = CancellationToken::new();
        let reader = tokio::spawn(read_loop(rd, pending.clone(), self.relayed.clone(), closed.clone()));
        Ok(Arc::new(Conn {
            writer: tokio::sync::Mutex::new(Box::new(wr)),
            pending,
            reader,
            closed,
        }))
    }

    async fn request_on(conn: &Conn, frame: Frame) -> Result<Frame, RendezvousError> {
        let (tx, rx) = oneshot::channel();
        {
            let mut w = conn.writer.lock().await;
            conn.pending.lock().push_back(tx);
            if let Err(e) = write_frame(&mut *w, &frame).await {
                conn.closed.cancel();
                return Err(e.into());
            }
        }
        let reply = tokio::time::timeout(REQUEST_TIMEOUT, rx)
            .await
            .map_err(|_| RendezvousError::Timeout)?
            .map_err(|_| RendezvousError::Closed)?;
        if reply.kind == msg::ERROR {
            return Err(RendezvousError::Server(
                String::from_utf8_lossy(&reply.payload).into_owned(),
            ));
        }
        Ok(reply)
    }

    /// The live connection, opening and registering a new one if needed.
    async fn connection(&self) -> Result<Arc<Conn>, RendezvousError> {
        let mut slot = self.conn.lock().await;
        if let Some(c) = slot.as_ref() {
            if !c.closed.is_cancelled() {
                return Ok(c.clone());
            }
        }
        let c = self.open().await?;
        self.register_on(&c).await?;
        *slot = Some(c.clone());
        Ok(c)
    }

    async fn register_on(&self, conn: &Conn) -> Result<UnixMs, RendezvousError> {
        let log = self.membership_log.lock().clone();
        if let Some(log) = log {
            let body = Encoder::new().raw(&self.digest).raw(&log).finish();
            Self::request_on(conn, Frame::new(msg::MEMBERSHIP, body)).await?;
        }
        let reg = Registration::new_signed(&self.identity, self.endpoint.clone(), self.clock.now_ms(), self.digest);
        let reply = Self::request_on(conn, Frame::new(msg::REGISTER, reg.encode())).await?;
        if reply.kind != msg::REGISTERED {
            return Err(RendezvousError::Unexpected(reply.kind));
        }
        Ok(Decoder::new(&reply.payload).u64()?)
    }

    async fn request(&self, frame: Frame, expected: u8) -> Result<Vec<u8>, RendezvousError> {
        let conn = self.connection().await?;
        let reply = Self::request_on(&conn, frame).await?;
        if reply.kind != expected {
            return Err(RendezvousError::Unexpected(reply.kind));
        }
        Ok(reply.payload)
    }

    /// Registers (or renews) presence; returns its expiry.
    pub async fn register(&self) -> Result<UnixMs, RendezvousError> {
        let conn = self.connection().await?;
        self.register_on(&conn).await
    }

    pub async fn lookup(&self, peer: &PeerId) -> Result<Option<Presence>, RendezvousError> {
        let body = self
            .request(Frame::new(msg::LOOKUP, peer.as_bytes().to_vec()), msg::PRESENCE)
            .await?;
        let mut d = Decoder::new(&body);
        if !d.bool()? {
            return Ok(None);
        }
        let keys = PublicKeys::decode(d.take(PublicKeys::ENCODED_LEN)?).map_err(|_| WireError::Invalid("keys"))?;
        if keys.peer_id() != *peer {
            return Err(RendezvousError::KeyMismatch(*peer));
        }
        Ok(Some(Presence {
            peer_id: *peer,
            keys,
            endpoint: d.string()?,
            expires_at: d.u64()?,
        }))
    }

    /// Forwards an opaque payload; false when the target is offline.
    pub async fn relay(&self, to: &PeerId, payload: &[u8]) -> Result<bool, RendezvousError> {
        let body = Encoder::new().raw(to.as_bytes()).var(payload).finish();
        let reply = self.request(Frame::new(msg::RELAY, body), msg::RELAY_RESULT).await?;
        Ok(reply.first() == Some(&1))
    }

    /// Looks up a peer's public keys, rejecting any that do not hash to its id.
    pub async fn directory(&self, peer: &PeerId) -> Result<Option<PublicKeys>, RendezvousError> {
        let body = self
            .request(Frame::new(msg::DIRECTORY, peer.as_bytes().to_vec()), msg::KEYS)
            .await?;
        let mut d = Decoder::new(&body);
        if !d.bool()? {
            return Ok(None);
        }
        let keys = PublicKeys::decode(d.take(PublicKeys::ENCODED_LEN)?).map_err(|_| WireError::Invalid("keys"))?;
        keys.verify_binding(peer)
            .map_err(|_| RendezvousError::KeyMismatch(*peer))?;
        Ok(Some(keys))
    }

    /// Publishes a membership log to the server; returns its resulting epoch.
    pub async fn publish_membership(&self, log: Vec<u8>) -> Result<u64, RendezvousError> {
        self.set_membership_log(log.clone());
        let body = Encoder::new().raw(&self.digest).raw(&log).finish();
        let reply = self
            .request(Frame::new(msg::MEMBERSHIP, body), msg::MEMBERSHIP_OK)
            .await?;
        Ok(Decoder::new(&reply).u64()?)
    }

    /// Renews presence every `interval` until cancelled, reconnecting as
    /// needed.
    pub async fn heartbeat(self: Arc<Self>, interval: Duration, stop: CancellationToken) {
        loop {
            tokio::select! {
                _ = stop.cancelled() => break,
                _ = tokio::time::sleep(interval) => {
                    if let Err(e) = self.register().await {
                        debug!(error = %e, "rendezvous heartbeat failed");
                    }
                }
            }
        }
    }

    /// Drops the connection; the server forgets our presence.
    pub async fn disconnect(&self) {
        if let Some(c) = self.conn.lock().await.take() {
            {
                let mut w = c.writer.lock().await;
                let _ = tokio::io::AsyncWriteExt::shutdown(&mut *w).await;
            }
            // the server closes its side only after dropping our presence,
            // so once the reader sees EOF no one can be routed to us
            let _ = tokio::time::timeout(Duration::from_secs(1), c.closed.cancelled()).await;
            c.closed.cancel();
            c.reader.abort();
        }
    }
}

async fn read_loop(
    mut rd: impl AsyncRead + Unpin,
    pending: Arc<Mutex<VecDeque<oneshot::Sender<Frame>>>>,
    relayed: mpsc::UnboundedSender<Relayed>,
    closed: CancellationToken,
) {
    loop {
        match read_frame(&mut rd, MAX_SIGNAL_FRAME).await {
            Ok(Some(f)) if f.kind == msg::RELAYED => {
                let mut d = Decoder::new(&f.payload);
                let parsed = (|| -> Result<Relayed, WireError> {
                    let from = PeerId(d.array()?);
                    let payload = d.var()?.to_vec();
                    Ok(Relayed { from, payload })
                })();
                if let Ok(r) = parsed {
                    let _ = relayed.send(r);
                }
            }
            Ok(Some(f)) => {
                if let Some(tx) = pending.lock().pop_front() {
                    let _ = tx.send(f);
                }
            }
            _ => break,
        }
    }
    closed.cancel();
    pending.lock().clear();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::{Choice, Governance, ProposalKind};

    async fn server(config: ServerConfig, clock: Clock) -> RendezvousServer {
        RendezvousServer::bind("127.0.0.1:0".parse().unwrap(), config, clock)
            .await
            .unwrap()
    }

    fn client(
        s: &RendezvousServer,
        id: &PeerIdentity,
        key: Option<&[u8]>,
        clock: &Clock,
    ) -> (Arc<RendezvousClient>, mpsc::UnboundedReceiver<Relayed>) {
        RendezvousClient::new(s.local_addr(), id.clone(), "127.0.0.1:9".into(), key, clock.clone())
    }

    #[tokio::test]
    async fn register_lookup_ttl_and_last_writer() {
        let clock = Clock::manual(1_000_000);
        let s = server(ServerConfig::default(), clock.clone()).await;
        let a = PeerIdentity::generate();
        let b = PeerIdentity::generate();
        let (ca, _) = client(&s, &a, None, &clock);
        let (cb, _) = client(&s, &b, None, &clock);
        cb.register().await.unwrap();
        assert!(cb.lookup(&PeerIdentity::generate().peer_id()).await.unwrap().is_none());

        ca.register().await.unwrap();
        let p = cb.lookup(&a.peer_id()).await.unwrap().unwrap();
        assert_eq!(p.endpoint, "127.0.0.1:9");
        assert_eq!(p.keys, a.public_keys());

        // a second registration from elsewhere wins
        let (ca2, _) = RendezvousClient::new(s.local_addr(), a.clone(), "127.0.0.1:10".into(), None, clock.clone());
        ca2.register().await.unwrap();
        assert_eq!(cb.lookup(&a.peer_id()).await.unwrap().unwrap().endpoint, "127.0.0.1:10");

        clock.advance(61_000);
        assert!(cb.lookup(&a.peer_id()).await.unwrap().is_none());
        s.shutdown().await;
    }

    #[tokio::test]
    async fn relay_is_bit_identical_and_reports_offline() {
        let clock = Clock::system();
        let s = server(ServerConfig::default(), clock.clone()).await;
        let a = PeerIdentity::generate();
        let b = PeerIdentity::generate();
        let (ca, _) = client(&s, &a, None, &clock);
        let (cb, mut rb) = client(&s, &b, None, &clock);
        ca.register().await.unwrap();
        cb.register().await.unwrap();
        let payload: Vec<u8> = (0..=255u8).cycle().take(3000).collect();
        assert!(ca.relay(&b.peer_id(), &payload).await.unwrap());
        let got = rb.recv().await.unwrap();
        assert_eq!(
            got,
            Relayed {
                from: a.peer_id(),
                payload: payload.clone()
            }
        );

        // nothing of the payload is retained
        let snap = s.snapshot();
        assert!(!format!("{snap:?}").contains(&hex::encode(&payload[..32])));

        cb.disconnect().await;
        tokio::time::sleep(Duration::from_millis(50)).await;
        assert!(!ca.relay(&b.peer_id(), b"x").await.unwrap());
        assert!(ca.lookup(&b.peer_id()).await.unwrap().is_none());
        s.shutdown().await;
    }

    #[tokio::test]
    async fn directory_is_self_certifying() {
        let clock = Clock::system();
        let s = server(ServerConfig::default(), clock.clone()).await;
        let a = PeerIdentity::generate();
        let (ca, _) = client(&s, &a, None, &clock);
        ca.register().await.unwrap();
        let keys = ca.directory(&a.peer_id()).await.unwrap().unwrap();
        assert_eq!(keys.peer_id(), a.peer_id());
        assert!(ca.directory(&PeerId([5; 32])).await.unwrap().is_none());
        // a tampered binding is caught client-side
        let other = PeerIdentity::generate();
        assert!(other.public_keys().verify_binding(&a.peer_id()).is_err());
        s.shutdown().await;
    }

    #[tokio::test]
    async fn bad_signature_is_refused() {
        let clock = Clock::system();
        let s = server(ServerConfig::default(), clock.clone()).await;
        let a = PeerIdentity::generate();
        let mut reg = Registration::new_signed(&a, "x".into(), clock.now_ms(), [0; 32]);
        reg.endpoint = "y".into();
        let mut stream = TcpStream::connect(s.local_addr()).await.unwrap();
        write_frame(&mut stream, &Frame::new(msg::REGISTER, reg.encode()))
            .await
            .unwrap();
        let f = read_frame(&mut stream, MAX_SIGNAL_FRAME).await.unwrap().unwrap();
        assert_eq!(f.kind, msg::ERROR);
        s.shutdown().await;
    }

    #[tokio::test]
    async fn private_swarm_admits_members_only() {
        let clock = Clock::system();
        let key = b"swarm secret".to_vec();
        let founder = PeerIdentity::generate();
        let joiner = PeerIdentity::generate();
        let s = server(
            ServerConfig {
                swarm_key: Some(key.clone()),
                genesis: Some(founder.public_keys()),
            },
            clock.clone(),
        )
        .await;

        let (cj, _) = client(&s, &joiner, Some(&key), &clock);
        assert!(matches!(cj.register().await, Err(RendezvousError::Server(_))));
        let (wrong, _) = client(&s, &founder, Some(b"other"), &clock);
        assert!(matches!(wrong.register().await, Err(RendezvousError::Server(_))));

        let (cf, _) = client(&s, &founder, Some(&key), &clock);
        cf.register().await.unwrap();

        let mut gov = Governance::new(founder.public_keys());
        let p = gov
            .propose(
                &founder,
                ProposalKind::AddMember {
                    keys: joiner.public_keys(),
                },
                clock.now_ms(),
                60_000,
            )
            .unwrap();
        gov.cast_vote(&founder, &p.id(), Choice::Yes, clock.now_ms()).unwrap();
        assert_eq!(cf.publish_membership(gov.export_log()).await.unwrap(), 1);
        cj.register().await.unwrap();
        assert!(cf.lookup(&joiner.peer_id()).await.unwrap().is_some());
        s.shutdown().await;
    }
}
