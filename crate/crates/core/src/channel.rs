//! Direct encrypted channels between two online peers.
//!
//! The caller relays a signed offer carrying a fresh X25519 key through the
//! rendezvous; the callee relays back a signed answer with its own fresh key
//! and its listen endpoint. Both sides derive the session key from the two
//! ephemeral keys, then the caller connects and proves possession of the key
//! with a `CHANNEL_HELLO` exchange. From then on the stream carries
//! sealed frames:
//!
//! `u32 length || u8 type || u64 seq || nonce[24] || secretbox(dir || type || seq || body)`
//!
//! Sequence numbers count every frame in one direction and must arrive
//! strictly consecutively; anything else closes the channel. Data frames
//! are acknowledged once the receiving application callback has returned,
//! which is what lets the sender decide whether a message still needs the
//! store-and-forward path.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tokio::time::Instant;

use crypto_secretbox::aead::{Aead, KeyInit};
use crypto_secretbox::XSalsa20Poly1305;
use parking_lot::Mutex;
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncWrite, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::oneshot;
use tokio_util::sync::CancellationToken;
use tracing::debug;
use x25519_dalek::{PublicKey as XPublic, StaticSecret};

use crate::crypto::{random_bytes, random_nonce, sha256, PeerId, PeerIdentity, PublicKeys, Signature, NONCE_LEN};
use crate::rendezvous::{Relayed, RendezvousClient, RendezvousError};
use crate::rpc::msg::CHANNEL_HELLO;
use crate::wire::{read_frame, write_frame, Decoder, Encoder, Frame, WireError};

pub const MAX_MESSAGE: usize = 1024 * 1024;
const MAX_CHANNEL_FRAME: usize = MAX_MESSAGE + 1024;
const OFFER_TAG: &[u8] = b"fybrr/channel/offer/v1";
const KEY_TAG: &[u8] = b"fybrr/channel/v1";
const HELLO_DIALER: &[u8] = b"fybrr/channel/hello/dialer";
const HELLO_ACCEPTOR: &[u8] = b"fybrr/channel/hello/acceptor";

pub mod frame {
    pub const DATA: u8 = 0x01;
    pub const PING: u8 = 0x02;
    pub const PONG: u8 = 0x03;
    pub const CLOSE: u8 = 0x04;
    pub const ACK: u8 = 0x05;
}

const SIGNAL_OFFER: u8 = 1;
const SIGNAL_ANSWER: u8 = 2;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("peer {0} is not online")]
    PeerOffline(PeerId),
    #[error("handshake timed out")]
    Timeout,
    #[error("channel closed")]
    ChannelClosed,
    #[error("message of {0} bytes exceeds the 1 MiB limit")]
    TooLarge(usize),
    #[error("no rendezvous configured")]
    NoRendezvous,
    #[error("handshake failed: {0}")]
    Handshake(&'static str),
    #[error(transparent)]
    Rendezvous(#[from] RendezvousError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SessionId(pub [u8; 16]);

impl std::fmt::Display for SessionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Signed offer or answer. Both directions use the same shape; the signal
/// kind is covered by the signature so one cannot be replayed as the other.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelOffer {
    pub from: PeerId,
    pub to: PeerId,
    pub session_id: SessionId,
    pub listen_endpoint: String,
    pub ephemeral_public: [u8; 32],
    pub signature: Signature,
}

impl ChannelOffer {
    fn signing_bytes(&self, kind: u8) -> Vec<u8> {
        Encoder::new()
            .raw(OFFER_TAG)
            .u8(kind)
            .raw(self.from.as_bytes())
            .raw(self.to.as_bytes())
            .raw(&self.session_id.0)
            .str(&self.listen_endpoint)
            .raw(&self.ephemeral_public)
            .finish()
    }

    fn new_signed(
        id: &PeerIdentity,
        kind: u8,
        to: PeerId,
        session_id: SessionId,
        listen_endpoint: String,
        ephemeral_public: [u8; 32],
    ) -> Self {
        let mut o = Self {
            from: id.peer_id(),
            to,
            session_id,
            listen_endpoint,
            ephemeral_public,
            signature: [0; 64],
        };
        o.signature = id.sign(&o.signing_bytes(kind));
        o
    }

    pub fn verify(&self, kind: u8, keys: &PublicKeys) -> bool {
        keys.peer_id() == self.from && keys.verify(&self.signing_bytes(kind), &self.signature)
    }

    fn encode_into(&self, e: Encoder) -> Encoder {
        e.raw(self.from.as_bytes())
            .raw(self.to.as_bytes())
            .raw(&self.session_id.0)
            .str(&self.listen_endpoint)
            .raw(&self.ephemeral_public)
            .raw(&self.signature)
    }

    fn decode_from(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Self {
            from: PeerId(d.array()?),
            to: PeerId(d.array()?),
            session_id: SessionId(d.array()?),
            listen_endpoint: d.string()?,
            ephemeral_public: d.array()?,
            signature: d.array()?,
        })
    }
}

/// Relay payload: `kind || sender public keys || offer`.
fn encode_signal(kind: u8, keys: &PublicKeys, offer: &ChannelOffer) -> Vec<u8> {
    offer.encode_into(Encoder::new().u8(kind).raw(&keys.encode())).finish()
}

fn decode_signal(bytes: &[u8]) -> Result<(u8, PublicKeys, ChannelOffer), WireError> {
    let mut d = Decoder::new(bytes);
    let kind = d.u8()?;
    let keys = PublicKeys::decode(d.take(PublicKeys::ENCODED_LEN)?).map_err(|_| WireError::Invalid("keys"))?;
    let offer = ChannelOffer::decode_from(&mut d)?;
    d.finish()?;
    Ok((kind, keys, offer))
}

/// `SHA-256(tag || DH || session_id || offer_ephemeral || answer_ephemeral)`.
pub fn derive_session_key(
    secret: &StaticSecret,
    their_public: &[u8; 32],
    session_id: &SessionId,
    offer_public: &[u8; 32],
    answer_public: &[u8; 32],
) -> [u8; 32] {
    let dh = secret.diffie_hellman(&XPublic::from(*their_public));
    sha256(&[KEY_TAG, dh.as_bytes(), &session_id.0, offer_public, answer_public])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Dialer,
    Acceptor,
}

impl Role {
    fn byte(self) -> u8 {
        match self {
            Role::Dialer => 0,
            Role::Acceptor => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloseReason {
    Local,
    Remote,
    HeartbeatLost,
    Io,
    Protocol,
}

/// Delivered to the application, serially per channel.
#[derive(Clone, Debug)]
pub enum ChannelEvent {
    Message {
        peer: PeerId,
        session: SessionId,
        seq: u64,
        body: Vec<u8>,
    },
    Closed {
        peer: PeerId,
        session: SessionId,
        reason: CloseReason,
    },
}

pub type EventHandler = Arc<dyn Fn(ChannelEvent) + Send + Sync>;
pub type Authorizer = Arc<dyn Fn(&PeerId) -> bool + Send + Sync>;

#[derive(Clone, Copy, Debug)]
pub struct ChannelConfig {
    pub heartbeat_interval: Duration,
    pub missed_heartbeats: u32,
    pub dial_timeout: Duration,
    pub ack_timeout: Duration,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            heartbeat_interval: Duration::from_secs(3),
            missed_heartbeats: 3,
            dial_timeout: Duration::from_secs(5),
            ack_timeout: Duration::from_secs(5),
        }
    }
}

struct Sealer {
    cipher: XSalsa20Poly1305,
}

impl Sealer {
    fn new(key: &[u8; 32]) -> Self {
        Self {
            cipher: XSalsa20Poly1305::new(key.into()),
        }
    }

    fn seal(&self, plaintext: &[u8]) -> ([u8; NONCE_LEN], Vec<u8>) {
        let nonce = random_nonce();
        let ct = self
            .cipher
            .encrypt((&nonce).into(), plaintext)
            .expect("secretbox encryption is infallible for in-memory buffers");
        (nonce, ct)
    }

    fn open(&self, nonce: &[u8; NONCE_LEN], ct: &[u8]) -> Option<Vec<u8>> {
        self.cipher.decrypt(nonce.into(), ct).ok()
    }
}

struct Writer {
    sink: Box<dyn AsyncWrite + Send + Unpin>,
    next_seq: u64,
}

/// One established direct channel.
pub struct Channel {
    session_id: SessionId,
    peer: PeerId,
    role: Role,
    sealer: Sealer,
    writer: tokio::sync::Mutex<Writer>,
    acks: Mutex<HashMap<u64, oneshot::Sender<()>>>,
    closed: CancellationToken,
    open: AtomicBool,
    close_reason: Mutex<Option<CloseReason>>,
    rx_since_tick: AtomicBool,
    partitioned: AtomicBool,
    recv_seq: AtomicU64,
    config: ChannelConfig,
    handler: EventHandler,
}

impl std::fmt::Debug for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Channel")
            .field("session_id", &self.session_id)
            .field("peer", &self.peer)
            .field("role", &self.role)
            .field("open", &self.is_open())
            .finish()
    }
}

impl Channel {
    /// Starts the reader and heartbeat tasks over an already authenticated
    /// stream.
    pub fn start<S>(
        stream: S,
        role: Role,
        peer: PeerId,
        session_id: SessionId,
        key: [u8; 32],
        config: ChannelConfig,
        handler: EventHandler,
    ) -> Arc<Self>
    where
        S: AsyncRead + AsyncWrite + Send + 'static,
    {
        let (rd, wr) = tokio::io::split(stream);
        let ch = Arc::new(Self {
            session_id,
            peer,
            role,
            sealer: Sealer::new(&key),
            writer: tokio::sync::Mutex::new(Writer {
                sink: Box::new(wr),
                next_seq: 1,
            }),
            acks: Mutex::new(HashMap::new()),
            closed: CancellationToken::new(),
            open: AtomicBool::new(true),
            close_reason: Mutex::new(None),
            rx_since_tick: AtomicBool::new(true),
            partitioned: AtomicBool::new(false),
            recv_seq: AtomicU64::new(0),
            config,
            handler,
        });
        tokio::spawn(ch.clone().read_loop(rd));
        tokio::spawn(ch.clone().heartbeat_loop());
        ch
    }

    pub fn peer(&self) -> PeerId {
        self.peer
    }

    pub fn session_id(&self) -> SessionId {
        self.session_id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_open(&self) -> bool {
        self.open.load(Ordering::Acquire)
    }

    pub fn close_reason(&self) -> Option<CloseReason> {
        *self.close_reason.lock()
    }

    /// Highest sequence number received so far.
    pub fn recv_seq(&self) -> u64 {
        self.recv_seq.load(Ordering::Acquire)
    }

    /// Resolves once the channel has closed.
    pub async fn closed(&self) {
        self.closed.cancelled().await
    }

    /// Stops all traffic in both directions without closing the socket, as
    /// a network cut would. For fault-injection tests.
    pub fn simulate_partition(&self) {
        self.partitioned.store(true, Ordering::Release);
    }

    async fn write(&self, kind: u8, body: &[u8]) -> Result<u64, ChannelError> {
        if !self.is_open() {
            return Err(ChannelError::ChannelClosed);
        }
        let mut w = self.writer.lock().await;
        let seq = w.next_seq;
        w.next_seq += 1;
        if self.partitioned.load(Ordering::Acquire) {
            return Ok(seq);
        }
        let plain = Encoder::new().u8(self.role.byte()).u8(kind).u64(seq).raw(body).finish();
        let (nonce, ct) = self.sealer.seal(&plain);
        let payload = Encoder::new().u64(seq).raw(&nonce).raw(&ct).finish();
        if let Err(e) = write_frame(&mut w.sink, &Frame::new(kind, payload)).await {
            drop(w);
            self.shut(CloseReason::Io);
            return Err(e.into());
        }
        Ok(seq)
    }

    /// Sends one message; returns its sequence number once written.
    pub async fn send(&self, plaintext: &[u8]) -> Result<u64, ChannelError> {
        if plaintext.len() > MAX_MESSAGE {
            return Err(ChannelError::TooLarge(plaintext.len()));
        }
        self.write(frame::DATA, plaintext)
            .await
            .map_err(|_| ChannelError::ChannelClosed)
    }

    /// Sends one message and waits until the receiving application has
    /// taken it. An ack timeout closes the channel: delivery is then unknown
    /// and the caller falls back, relying on message-id deduplication.
    pub async fn send_confirmed(&self, plaintext: &[u8]) -> Result<u64, ChannelError> {
        if plaintext.len() > MAX_MESSAGE {
            return Err(ChannelError::TooLarge(plaintext.len()));
        }
        let (tx, rx) = oneshot::channel();
        let seq = {
            // hold the ack slot before the frame can possibly be answered
            let w = self.writer.lock().await;
            if !self.is_open() {
                return Err(ChannelError::ChannelClosed);
            }
            let seq = w.next_seq;
            self.acks.lock().insert(seq, tx);
            drop(w);
            let got = self.write(frame::DATA, plaintext).await;
            match got {
                Ok(s) if s == seq => s,
                Ok(_) => unreachable!("sequence reserved under the writer lock"),
                Err(_) => {
                    self.acks.lock().remove(&seq);
                    return Err(ChannelError::ChannelClosed);
                }
            }
        };
        tokio::select! {
            r = rx => r.map(|_| seq).map_err(|_| ChannelError::ChannelClosed),
            _ = tokio::time::sleep(self.config.ack_timeout) => {
                self.acks.lock().remove(&seq);
                self.shut(CloseReason::HeartbeatLost);
                Err(ChannelError::ChannelClosed)
            }
        }
    }

    pub async fn close(&self) {
        if self.is_open() {
            let _ = self.write(frame::CLOSE, &[]).await;
            self.shut(CloseReason::Local);
            let mut w = self.writer.lock().await;
            let _ = w.sink.shutdown().await;
        }
    }

    fn shut(&self, reason: CloseReason) {
        if self.open.swap(false, Ordering::AcqRel) {
            *self.close_reason.lock() = Some(reason);
            self.closed.cancel();
            self.acks.lock().clear();
            debug!(peer = %self.peer, session = %self.session_id, ?reason, "channel closed");
            (self.handler)(ChannelEvent::Closed {
                peer: self.peer,
                session: self.session_id,
                reason,
            });
        }
    }

    fn unseal(&self, f: &Frame) -> Option<(u64, Vec<u8>)> {
        let mut d = Decoder::new(&f.payload);
        let seq = d.u64().ok()?;
        let nonce: [u8; NONCE_LEN] = d.array().ok()?;
        let plain = self.sealer.open(&nonce, d.rest())?;
        let mut p = Decoder::new(&plain);
        let expected_dir = match self.role {
            Role::Dialer => Role::Acceptor,
            Role::Acceptor => Role::Dialer,
        };
        if p.u8().ok()? != expected_dir.byte() || p.u8().ok()? != f.kind || p.u64().ok()? != seq {
            return None;
        }
        Some((seq, p.rest().to_vec()))
    }

    async fn read_loop(self: Arc<Self>, mut rd: impl AsyncRead + Unpin) {
        let reason = loop {
            let f = tokio::select! {
                _ = self.closed.cancelled() => return,
                f = read_frame(&mut rd, MAX_CHANNEL_FRAME) => f,
            };
            let f = match f {
                Ok(Some(f)) => f,
                Ok(None) => break CloseReason::Remote,
                Err(_) => break CloseReason::Io,
            };
            if self.partitioned.load(Ordering::Acquire) {
                continue;
            }
            let Some((seq, body)) = self.unseal(&f) else {
                break CloseReason::Protocol;
            };
            if seq != self.recv_seq.load(Ordering::Acquire) + 1 {
                break CloseReason::Protocol;
            }
            self.recv_seq.store(seq, Ordering::Release);
            self.rx_since_tick.store(true, Ordering::Release);
            match f.kind {
                frame::DATA => {
                    (self.handler)(ChannelEvent::Message {
                        peer: self.peer,
                        session: self.session_id,
                        seq,
                        body,
                    });
                    let ack = seq.to_be_bytes();
                    if self.write(frame::ACK, &ack).await.is_err() {
                        break CloseReason::Io;
                    }
                }
                frame::PING => {
                    if self.write(frame::PONG, &[]).await.is_err() {
                        break CloseReason::Io;
                    }
                }
                frame::PONG => {}
                frame::ACK => {
                    let Ok(acked) = Decoder::new(&body).u64() else {
                        break CloseReason::Protocol;
                    };
                    if let Some(tx) = self.acks.lock().remove(&acked) {
                        let _ = tx.send(());
                    }
                }
                frame::CLOSE => break CloseReason::Remote,
                _ => break CloseReason::Protocol,
            }
        };
        self.shut(reason);
    }

    async fn heartbeat_loop(self: Arc<Self>) {
        let interval = self.config.heartbeat_interval;
        let mut missed = 0;
        loop {
            tokio::select! {
                _ = self.closed.cancelled() => return,
                _ = tokio::time::sleep(interval) => {}
            }
            if self.rx_since_tick.swap(false, Ordering::AcqRel) {
                missed = 0;
            } else {
                missed += 1;
                if missed >= self.config.missed_heartbeats {
                    self.shut(CloseReason::HeartbeatLost);
                    return;
                }
            }
            if self.write(frame::PING, &[]).await.is_err() {
                return;
            }
        }
    }
}

impl Drop for Channel {
    fn drop(&mut self) {
        self.closed.cancel();
    }
}

struct PendingAccept {
    peer: PeerId,
    key: [u8; 32],
    deadline: Instant,
}

/// Owns the local side of all direct channels: dials, answers offers,
/// completes inbound handshakes, and keeps the latest open channel per peer.
pub struct ChannelManager {
    identity: PeerIdentity,
    listen_endpoint: String,
    config: ChannelConfig,
    handler: EventHandler,
    authorize: Authorizer,
    rendezvous: Mutex<Option<Arc<RendezvousClient>>>,
    dials: Mutex<HashMap<SessionId, oneshot::Sender<(PublicKeys, ChannelOffer)>>>,
    accepts: Mutex<HashMap<SessionId, PendingAccept>>,
    channels: Mutex<HashMap<PeerId, Arc<Channel>>>,
    /// Channels replaced in `channels` by a concurrent handshake; they stay
    /// usable by whoever holds them and are closed with the rest.
    displaced: Mutex<Vec<Arc<Channel>>>,
    dropped_offers: AtomicU64,
    /// Set by `close_all`; no channel is installed afterwards.
    closed: AtomicBool,
}

impl ChannelManager {
    pub fn new(
        identity: PeerIdentity,
        listen_endpoint: String,
        config: ChannelConfig,
        handler: EventHandler,
        authorize: Authorizer,
    ) -> Arc<Self> {
        Arc::new(Self {
            identity,
            listen_endpoint,
            config,
            handler,
            authorize,
            rendezvous: Mutex::new(None),
            dials: Mutex::new(HashMap::new()),
            accepts: Mutex::new(HashMap::new()),
            channels: Mutex::new(HashMap::new()),
            displaced: Mutex::new(Vec::new()),
            dropped_offers: AtomicU64::new(0),
            closed: AtomicBool::new(false),
        })
    }

    pub fn set_rendezvous(&self, client: Arc<RendezvousClient>) {
        *self.rendezvous.lock() = Some(client);
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    /// Offers dropped because of a bad signature or an unauthorized sender.
    pub fn dropped_offers(&self) -> u64 {
        self.dropped_offers.load(Ordering::Relaxed)
    }

    pub fn channel(&self, peer: &PeerId) -> Option<Arc<Channel>> {
        let mut map = self.channels.lock();
        match map.get(peer) {
            Some(c) if c.is_open() => Some(c.clone()),
            Some(_) => {
                map.remove(peer);
                None
            }
            None => None,
        }
    }

    pub fn open_channels(&self) -> Vec<Arc<Channel>> {
        self.channels.lock().values().filter(|c| c.is_open()).cloned().collect()
    }

    fn rdv(&self) -> Result<Arc<RendezvousClient>, ChannelError> {
        self.rendezvous.lock().clone().ok_or(ChannelError::NoRendezvous)
    }

    fn install(self: &Arc<Self>, ch: Arc<Channel>) -> Result<Arc<Channel>, ChannelError> {
        let mut map = self.channels.lock();
        if self.closed.load(Ordering::Acquire) {
            drop(map);
            ch.shut(CloseReason::Local);
            return Err(ChannelError::ChannelClosed);
        }
        if let Some(old) = map.insert(ch.peer(), ch.clone()) {
            let mut displaced = self.displaced.lock();
            displaced.retain(|c| c.is_open());
            displaced.push(old);
        }
        Ok(ch)
    }

    fn channel_handler(self: &Arc<Self>) -> EventHandler {
        let inner = self.handler.clone();
        let me = Arc::downgrade(self);
        Arc::new(move |ev: ChannelEvent| {
            if let ChannelEvent::Closed { peer, session, .. } = &ev {
                if let Some(me) = me.upgrade() {
                    let mut map = me.channels.lock();
                    if map.get(peer).is_some_and(|c| c.session_id() == *session) {
                        map.remove(peer);
                    }
                }
            }
            inner(ev)
        })
    }

    /// Returns the open channel to `peer`, establishing one if needed.
    pub async fn dial(self: &Arc<Self>, peer: PeerId) -> Result<Arc<Channel>, ChannelError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(ChannelError::ChannelClosed);
        }
        if let Some(c) = self.channel(&peer) {
            return Ok(c);
        }
        let rdv = self.rdv()?;
        let secret = StaticSecret::from(random_bytes::<32>());
        let my_public = XPublic::from(&secret).to_bytes();
        let session_id = SessionId(random_bytes());
        let offer = ChannelOffer::new_signed(
            &self.identity,
            SIGNAL_OFFER,
            peer,
            session_id,
            self.listen_endpoint.clone(),
            my_public,
        );
        let (tx, rx) = oneshot::channel();
        self.dials.lock().insert(session_id, tx);
        let deadline = tokio::time::Instant::now() + self.config.dial_timeout;

        let result = async {
            let signal = encode_signal(SIGNAL_OFFER, &self.identity.public_keys(), &offer);
            if !rdv.relay(&peer, &signal).await? {
                return Err(ChannelError::PeerOffline(peer));
            }
            let (_, answer) = tokio::time::timeout_at(deadline, rx)
                .await
                .map_err(|_| ChannelError::Timeout)?
                .map_err(|_| ChannelError::Timeout)?;
            let key = derive_session_key(
                &secret,
                &answer.ephemeral_public,
                &session_id,
                &my_public,
                &answer.ephemeral_public,
            );
            let endpoint = answer.listen_endpoint.clone();
            let stream = tokio::time::timeout_at(deadline, TcpStream::connect(endpoint.as_str()))
                .await
                .map_err(|_| ChannelError::Timeout)??;
            let _ = stream.set_nodelay(true);
            tokio::time::timeout_at(deadline, self.hello_dialer(stream, peer, session_id, key))
                .await
                .map_err(|_| ChannelError::Timeout)?
        }
        .await;
        self.dials.lock().remove(&session_id);
        result
    }

    async fn hello_dialer(
        self: &Arc<Self>,
        mut stream: TcpStream,
        peer: PeerId,
        session_id: SessionId,
        key: [u8; 32],
    ) -> Result<Arc<Channel>, ChannelError> {
        let sealer = Sealer::new(&key);
        let (nonce, proof) = sealer.seal(&[HELLO_DIALER, &session_id.0].concat());
        let hello = Encoder::new().raw(&session_id.0).raw(&nonce).raw(&proof).finish();
        write_frame(&mut stream, &Frame::new(CHANNEL_HELLO, hello)).await?;
        let reply = read_frame(&mut stream, 1024)
            .await?
            .ok_or(ChannelError::Handshake("acceptor hung up"))?;
        let mut d = Decoder::new(&reply.payload);
        let nonce: [u8; NONCE_LEN] = d.array()?;
        let ok = reply.kind == CHANNEL_HELLO
            && sealer.open(&nonce, d.rest()).as_deref() == Some(&[HELLO_ACCEPTOR, &session_id.0].concat()[..]);
        if !ok {
            return Err(ChannelError::Handshake("acceptor proof invalid"));
        }
        let ch = Channel::start(
            stream,
            Role::Dialer,
            peer,
            session_id,
            key,
            self.config,
            self.channel_handler(),
        );
        self.install(ch)
    }

    /// Handles an offer or answer relayed by the rendezvous. Invalid or
    /// unauthorized offers are dropped without a reply.
    pub async fn on_signal(self: &Arc<Self>, relayed: Relayed) {
        let Ok((kind, keys, offer)) = decode_signal(&relayed.payload) else {
            self.dropped_offers.fetch_add(1, Ordering::Relaxed);
            return;
        };
        let genuine = offer.from == relayed.from && offer.to == self.identity.peer_id() && offer.verify(kind, &keys);
        if !genuine {
            self.dropped_offers.fetch_add(1, Ordering::Relaxed);
            return;
        }
        match kind {
            SIGNAL_ANSWER => {
                if let Some(tx) = self.dials.lock().remove(&offer.session_id) {
                    let _ = tx.send((keys, offer));
                }
            }
            SIGNAL_OFFER => {
                if self.closed.load(Ordering::Acquire) {
                    return;
                }
                if !(self.authorize)(&offer.from) {
                    self.dropped_offers.fetch_add(1, Ordering::Relaxed);
                    return;
                }
                let Ok(rdv) = self.rdv() else { return };
                let secret = StaticSecret::from(random_bytes::<32>());
                let my_public = XPublic::from(&secret).to_bytes();
                let key = derive_session_key(
                    &secret,
                    &offer.ephemeral_public,
                    &offer.session_id,
                    &offer.ephemeral_public,
                    &my_public,
                );
                let now = Instant::now();
                {
                    let mut accepts = self.accepts.lock();
                    accepts.retain(|_, p| p.deadline > now);
                    accepts.insert(
                        offer.session_id,
                        PendingAccept {
                            peer: offer.from,
                            key,
                            deadline: now + self.config.dial_timeout * 2,
                        },
                    );
                }
                let answer = ChannelOffer::new_signed(
                    &self.identity,
                    SIGNAL_ANSWER,
                    offer.from,
                    offer.session_id,
                    self.listen_endpoint.clone(),
                    my_public,
                );
                let signal = encode_signal(SIGNAL_ANSWER, &self.identity.public_keys(), &answer);
                if let Err(e) = rdv.relay(&offer.from, &signal).await {
                    debug!(error = %e, "answer relay failed");
                }
            }
            _ => {
                self.dropped_offers.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    /// Completes an inbound handshake whose first frame was `CHANNEL_HELLO`.
    pub async fn accept_hello<S>(self: &Arc<Self>, mut stream: S, hello: Frame) -> Result<Arc<Channel>, ChannelError>
    where
        S: AsyncRead + AsyncWrite + Send + Unpin + 'static,
    {
        if self.closed.load(Ordering::Acquire) {
            return Err(ChannelError::ChannelClosed);
        }
        let mut d = Decoder::new(&hello.payload);
        let session_id = SessionId(d.array()?);
        let nonce: [u8; NONCE_LEN] = d.array()?;
        let pending = {
            let mut accepts = self.accepts.lock();
            match accepts.remove(&session_id) {
                Some(p) if p.deadline > Instant::now() => p,
                _ => return Err(ChannelError::Handshake("unknown session")),
            }
        };
        let sealer = Sealer::new(&pending.key);
        if sealer.open(&nonce, d.rest()).as_deref() != Some(&[HELLO_DIALER, &session_id.0].concat()[..]) {
            return Err(ChannelError::Handshake("dialer proof invalid"));
        }
        let (nonce, proof) = sealer.seal(&[HELLO_ACCEPTOR, &session_id.0].concat());
        let reply = Encoder::new().raw(&nonce).raw(&proof).finish();
        write_frame(&mut stream, &Frame::new(CHANNEL_HELLO, reply)).await?;
        let ch = Channel::start(
            stream,
            Role::Acceptor,
            pending.peer,
            session_id,
            pending.key,
            self.config,
            self.channel_handler(),
        );
        self.install(ch)
    }

    pub async fn close_all(&self) {
        let all: Vec<_> = {
            let mut map = self.channels.lock();
            self.closed.store(true, Ordering::Release);
            let mut all: Vec<_> = map.drain().map(|(_, c)| c).collect();
            all.append(&mut self.displaced.lock());
            all
        };
        for c in all {
            c.close().await;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokio::io::{duplex, AsyncReadExt};

    fn collector() -> (EventHandler, Arc<Mutex<Vec<ChannelEvent>>>) {
        let log: Arc<Mutex<Vec<ChannelEvent>>> = Default::default();
        let l = log.clone();
        (Arc::new(move |e| l.lock().push(e)), log)
    }

    fn messages(log: &Mutex<Vec<ChannelEvent>>) -> Vec<Vec<u8>> {
        log.lock()
            .iter()
            .filter_map(|e| match e {
                ChannelEvent::Message { body, .. } => Some(body.clone()),
                _ => None,
            })
            .collect()
    }

    type Events = Arc<Mutex<Vec<ChannelEvent>>>;

    fn pair(config: ChannelConfig) -> (Arc<Channel>, Arc<Channel>, Events, Events) {
        let (a, b) = duplex(1 << 20);
        let key = [7u8; 32];
        let sid = SessionId([1; 16]);
        let (ha, la) = collector();
        let (hb, lb) = collector();
        let ca = Channel::start(a, Role::Dialer, PeerId([2; 32]), sid, key, config, ha);
        let cb = Channel::start(b, Role::Acceptor, PeerId([1; 32]), sid, key, config, hb);
        (ca, cb, la, lb)
    }

    #[test]
    fn both_sides_derive_the_same_key() {
        let a = StaticSecret::from([1u8; 32]);
        let b = StaticSecret::from([2u8; 32]);
        let (pa, pb) = (XPublic::from(&a).to_bytes(), XPublic::from(&b).to_bytes());
        let sid = SessionId([9; 16]);
        let ka = derive_session_key(&a, &pb, &sid, &pa, &pb);
        let kb = derive_session_key(&b, &pa, &sid, &pa, &pb);
        assert_eq!(ka, kb);
        assert_ne!(ka, derive_session_key(&a, &pb, &SessionId([8; 16]), &pa, &pb));
    }

    #[test]
    fn offer_signature_binds_kind_and_fields() {
        let id = PeerIdentity::generate();
        let o = ChannelOffer::new_signed(
            &id,
            SIGNAL_OFFER,
            PeerId([3; 32]),
            SessionId([4; 16]),
            "h:1".into(),
            [5; 32],
        );
        let keys = id.public_keys();
        assert!(o.verify(SIGNAL_OFFER, &keys));
        assert!(!o.verify(SIGNAL_ANSWER, &keys));
        let mut t = o.clone();
        t.listen_endpoint = "h:2".into();
        assert!(!t.verify(SIGNAL_OFFER, &keys));
        let (k, kk, back) = decode_signal(&encode_signal(SIGNAL_OFFER, &keys, &o)).unwrap();
        assert_eq!((k, kk, back), (SIGNAL_OFFER, keys, o));
    }

    #[tokio::test]
    async fn ordered_delivery_and_acks() {
        let (ca, cb, _la, lb) = pair(ChannelConfig::default());
        for i in 0..3u8 {
            ca.send_confirmed(&[b'm', i]).await.unwrap();
        }
        assert_eq!(
            messages(&lb),
            vec![b"m\0".to_vec(), b"m\x01".to_vec(), b"m\x02".to_vec()]
        );
        assert!(ca.is_open() && cb.is_open());
    }

    #[tokio::test]
    async fn close_is_seen_by_the_peer_and_blocks_sends() {
        let (ca, cb, _la, lb) = pair(ChannelConfig::default());
        ca.close().await;
        cb.closed().await;
        assert_eq!(cb.close_reason(), Some(CloseReason::Remote));
        assert!(matches!(ca.send(b"x").await, Err(ChannelError::ChannelClosed)));
        assert!(matches!(
            lb.lock().last(),
            Some(ChannelEvent::Closed {
                reason: CloseReason::Remote,
                ..
            })
        ));
        // closing twice is a no-op
        ca.close().await;
    }

    #[tokio::test(start_paused = true)]
    async fn heartbeat_detects_a_silent_peer() {
        let cfg = ChannelConfig::default();
        let (ca, cb, _la, _lb) = pair(cfg);
        tokio::time::sleep(Duration::from_millis(60_500)).await;
        assert!(ca.is_open() && cb.is_open(), "idle healthy channel stays open");
        cb.simulate_partition();
        let start = tokio::time::Instant::now();
        ca.closed().await;
        let took = start.elapsed();
        assert!(
            took >= Duration::from_secs(9) && took <= Duration::from_secs(12),
            "{took:?}"
        );
        assert_eq!(ca.close_reason(), Some(CloseReason::HeartbeatLost));
    }

    #[tokio::test]
    async fn wrong_key_is_a_protocol_error() {
        let (a, b) = duplex(1 << 16);
        let sid = SessionId([1; 16]);
        let (h, _) = collector();
        let ca = Channel::start(
            a,
            Role::Dialer,
            PeerId([2; 32]),
            sid,
            [1; 32],
            ChannelConfig::default(),
            h.clone(),
        );
        let cb = Channel::start(
            b,
            Role::Acceptor,
            PeerId([1; 32]),
            sid,
            [2; 32],
            ChannelConfig::default(),
            h,
        );
        ca.send(b"hello there").await.unwrap();
        cb.closed().await;
        assert_eq!(cb.close_reason(), Some(CloseReason::Protocol));
    }

    #[tokio::test]
    async fn no_plaintext_on_the_wire() {
        // tap the dialer's outbound bytes through a second duplex
        let (a, tap_in) = duplex(1 << 20);
        let (tap_out, b) = duplex(1 << 20);
        let captured: Arc<Mutex<Vec<u8>>> = Default::default();
        let cap = captured.clone();
        let (mut tin_r, mut tin_w) = tokio::io::split(tap_in);
        let (mut tout_r, mut tout_w) = tokio::io::split(tap_out);
        tokio::spawn(async move {
            let mut buf = [0u8; 4096];
            while let Ok(n) = tin_r.read(&mut buf).await {
                if n == 0 {
                    break;
                }
                cap.lock().extend_from_slice(&buf[..n]);
                if tout_w.write_all(&buf[..n]).await.is_err() {
                    break;
                }
            }
        });
        tokio::spawn(async move { tokio::io::copy(&mut tout_r, &mut tin_w).await });
        let sid = SessionId([1; 16]);
        let (h, _) = collector();
        let (hb, lb) = collector();
        let ca = Channel::start(
            a,
            Role::Dialer,
            PeerId([2; 32]),
            sid,
            [3; 32],
            ChannelConfig::default(),
            h,
        );
        let _cb = Channel::start(
            b,
            Role::Acceptor,
            PeerId([1; 32]),
            sid,
            [3; 32],
            ChannelConfig::default(),
            hb,
        );
        let msg = b"the quick brown fox jumps over the lazy dog, repeatedly and verbosely".to_vec();
        ca.send_confirmed(&msg).await.unwrap();
        assert_eq!(messages(&lb), vec![msg.clone()]);
        let wire = captured.lock().clone();
        for w in msg.windows(8) {
            assert!(!wire.windows(8).any(|x| x == w), "plaintext leaked");
        }
    }
}
