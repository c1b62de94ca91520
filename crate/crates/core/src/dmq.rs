//! Distributed message queue: per-recipient sets of signed entries naming
//! the content id of an undelivered message.
//!
//! A recipient's queue lives on the DHT nodes closest to
//! [`queue_key`]. Each holder keeps a versioned [`QueueState`] (pending
//! entries plus tombstones for acknowledged ones); enqueue and ack fan out to
//! every holder, and holders periodically push their state to one another
//! with a union merge, so no single holder is authoritative. Reading is
//! two-phase: [`Dmq::drain`] returns entries without removing them and
//! [`Dmq::ack`] removes them once the message has been processed.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::future::join_all;
use parking_lot::Mutex;
use thiserror::Error;
use tracing::{debug, warn};

use crate::clock::{Clock, UnixMs};
use crate::crypto::{sha256, ContentId, PeerId, PeerIdentity, PublicKeys, Signature};
use crate::dht::{Dht, NodeInfo, MAX_RECORD_VALUE};
use crate::rpc::{expect, msg, RpcError};
use crate::store::DEFAULT_PIN_TTL_MS;
use crate::wire::{Decoder, Encoder, Frame, WireError};

const QUEUE_TAG: &[u8] = b"fybrr/dmq/v1";
const DRAIN_TAG: &[u8] = b"fybrr/dmq/drain/v1";
const ACK_TAG: &[u8] = b"fybrr/dmq/ack/v1";
const PAGE_MAGIC: &[u8; 4] = b"QHv1";

/// How far a signed drain/ack timestamp may be from the holder's clock.
pub const REQUEST_FRESHNESS_MS: u64 = 10 * 60 * 1000;
/// How long an acknowledgement is remembered, preventing resurrection by a
/// holder that missed it.
pub const TOMBSTONE_TTL_MS: u64 = DEFAULT_PIN_TTL_MS;

#[derive(Debug, Error)]
pub enum DmqError {
    #[error("queue entry signature invalid")]
    InvalidSignature,
    #[error("entry is addressed to a different queue")]
    WrongRecipient,
    #[error("request is not signed by the queue owner")]
    Unauthorized,
    #[error("request timestamp outside the freshness window")]
    Stale,
    #[error("queue head version {offered} not newer than held {held}")]
    StaleVersion { offered: u64, held: u64 },
    #[error("queue head chain is broken")]
    BrokenChain,
    #[error("no queue holder accepted the request")]
    NoHolders,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// SHA-256 over the tag and the recipient id.
pub fn queue_key(recipient: &PeerId) -> [u8; 32] {
    sha256(&[QUEUE_TAG, recipient.as_bytes()])
}

/// A signed pointer to an undelivered message.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct QueueEntry {
    pub recipient: PeerId,
    pub msg_cid: ContentId,
    pub sender: PeerId,
    pub timestamp: UnixMs,
    pub signature: Signature,
}

impl QueueEntry {
    pub const ENCODED_LEN: usize = 32 + 32 + 32 + 8 + 64;
    const SIGNED_LEN: usize = Self::ENCODED_LEN - 64;

    pub fn new_signed(sender: &PeerIdentity, recipient: PeerId, msg_cid: ContentId, timestamp: UnixMs) -> Self {
        let mut e = Self {
            recipient,
            msg_cid,
            sender: sender.peer_id(),
            timestamp,
            signature: [0; 64],
        };
        e.signature = sender.sign(&e.signing_bytes());
        e
    }

    pub fn signing_bytes(&self) -> [u8; Self::SIGNED_LEN] {
        let mut out = [0u8; Self::SIGNED_LEN];
        out[..32].copy_from_slice(self.recipient.as_bytes());
        out[32..64].copy_from_slice(self.msg_cid.as_bytes());
        out[64..96].copy_from_slice(self.sender.as_bytes());
        out[96..].copy_from_slice(&self.timestamp.to_be_bytes());
        out
    }

    pub fn encode(&self) -> [u8; Self::ENCODED_LEN] {
        let mut out = [0u8; Self::ENCODED_LEN];
        out[..Self::SIGNED_LEN].copy_from_slice(&self.signing_bytes());
        out[Self::SIGNED_LEN..].copy_from_slice(&self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut d = Decoder::new(bytes);
        let e = Self::decode_from(&mut d)?;
        d.finish()?;
        Ok(e)
    }

    fn decode_from(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Self {
            recipient: PeerId(d.array()?),
            msg_cid: ContentId(d.array()?),
            sender: PeerId(d.array()?),
            timestamp: d.u64()?,
            signature: d.array()?,
        })
    }

    /// Checks the signature against the sender's keys, which must hash to
    /// the sender id.
    pub fn verify(&self, sender_keys: &PublicKeys) -> bool {
        sender_keys.verify_binding(&self.sender).is_ok() && sender_keys.verify(&self.signing_bytes(), &self.signature)
    }

    /// Queue order: timestamp, then content id.
    pub fn order_key(&self) -> (UnixMs, ContentId, PeerId) {
        (self.timestamp, self.msg_cid, self.sender)
    }
}

/// An entry as held in the queue, with the sender keys needed to check it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct QueuedItem {
    pub entry: QueueEntry,
    pub sender_keys: PublicKeys,
}

impl QueuedItem {
    pub const ENCODED_LEN: usize = QueueEntry::ENCODED_LEN + PublicKeys::ENCODED_LEN;

    pub fn verify(&self) -> bool {
        self.entry.verify(&self.sender_keys)
    }

    fn encode_into(&self, e: Encoder) -> Encoder {
        e.raw(&self.entry.encode()).raw(&self.sender_keys.encode())
    }

    pub fn encode(&self) -> Vec<u8> {
        self.encode_into(Encoder::new()).finish()
    }

    fn decode_from(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        let entry = QueueEntry::decode_from(d)?;
        let sender_keys =
            PublicKeys::decode(d.take(PublicKeys::ENCODED_LEN)?).map_err(|_| WireError::Invalid("sender keys"))?;
        Ok(Self { entry, sender_keys })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut d = Decoder::new(bytes);
        let i = Self::decode_from(&mut d)?;
        d.finish()?;
        Ok(i)
    }
}

type EntryId = (PeerId, ContentId);

/// One replica's view of a recipient's queue.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueueState {
    pub recipient: PeerId,
    pub version: u64,
    items: BTreeMap<(UnixMs, ContentId, PeerId), QueuedItem>,
    /// Acknowledged (sender, cid) pairs and when they were acknowledged.
    tombstones: BTreeMap<EntryId, UnixMs>,
}

impl QueueState {
    pub fn new(recipient: PeerId) -> Self {
        Self {
            recipient,
            version: 0,
            items: BTreeMap::new(),
            tombstones: BTreeMap::new(),
        }
    }

    /// Pending entries in queue order.
    pub fn items(&self) -> Vec<QueuedItem> {
        self.items.values().copied().collect()
    }

    pub fn entries(&self) -> Vec<QueueEntry> {
        self.items.values().map(|i| i.entry).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn tombstone_count(&self) -> usize {
        self.tombstones.len()
    }

    fn contains(&self, id: &EntryId) -> bool {
        self.items.values().any(|i| (i.entry.sender, i.entry.msg_cid) == *id)
    }

    /// Adds a verified item; returns whether the state changed.
    pub fn insert(&mut self, item: QueuedItem) -> Result<bool, DmqError> {
        if item.entry.recipient != self.recipient {
            return Err(DmqError::WrongRecipient);
        }
        if !item.verify() {
            return Err(DmqError::InvalidSignature);
        }
        let id = (item.entry.sender, item.entry.msg_cid);
        if self.tombstones.contains_key(&id) || self.contains(&id) {
            return Ok(false);
        }
        self.items.insert(item.entry.order_key(), item);
        self.version += 1;
        Ok(true)
    }

    /// Removes every pending entry whose cid is listed; unknown cids are
    /// ignored. Returns the number removed.
    pub fn ack(&mut self, cids: &[ContentId], now: UnixMs) -> usize {
        let before = self.items.len();
        let mut acked = Vec::new();
        self.items.retain(|_, i| {
            let hit = cids.contains(&i.entry.msg_cid);
            if hit {
                acked.push((i.entry.sender, i.entry.msg_cid));
            }
            !hit
        });
        for id in acked {
            self.tombstones.insert(id, now);
        }
        let removed = before - self.items.len();
        if removed > 0 {
            self.version += 1;
        }
        removed
    }

    /// Union merge with another replica. Offers whose version is not newer
    /// than ours are refused so an old snapshot can never roll back an ack.
    pub fn merge(&mut self, other: QueueState) -> Result<bool, DmqError> {
        if other.recipient != self.recipient {
            return Err(DmqError::WrongRecipient);
        }
        if other.version <= self.version {
            return Err(DmqError::StaleVersion {
                offered: other.version,
                held: self.version,
            });
        }
        for (id, at) in &other.tombstones {
            let e = self.tombstones.entry(*id).or_insert(*at);
            *e = (*e).max(*at);
        }
        for (k, item) in &other.items {
            if item.entry.recipient == self.recipient && item.verify() {
                self.items.entry(*k).or_insert(*item);
            }
        }
        let tombs = &self.tombstones;
        self.items
            .retain(|_, i| !tombs.contains_key(&(i.entry.sender, i.entry.msg_cid)));
        // if we knew something the offer did not, the merged state is newer
        // than both
        let same = self.items.keys().eq(other.items.keys()) && self.tombstones.keys().eq(other.tombstones.keys());
        self.version = other.version + (!same) as u64;
        Ok(true)
    }

    /// Forgets tombstones older than `ttl`.
    pub fn sweep(&mut self, now: UnixMs, ttl: u64) -> usize {
        let before = self.tombstones.len();
        self.tombstones.retain(|_, at| now.saturating_sub(*at) <= ttl);
        before - self.tombstones.len()
    }

    /// Serialises into hash-linked pages, each within the DHT record bound.
    /// Page 0 is the head; each page carries the SHA-256 of the next one.
    pub fn to_pages(&self) -> Vec<QueueHead> {
        let mut pages: Vec<QueueHead> = vec![QueueHead::empty(self.recipient, self.version, 0)];
        for item in self.items.values() {
            if pages.last().unwrap().encoded_len() + QueuedItem::ENCODED_LEN > MAX_RECORD_VALUE {
                let n = pages.len() as u32;
                pages.push(QueueHead::empty(self.recipient, self.version, n));
            }
            pages.last_mut().unwrap().items.push(*item);
        }
        for (id, at) in self.tombstones.iter() {
            if pages.last().unwrap().encoded_len() + QueueHead::TOMBSTONE_LEN > MAX_RECORD_VALUE {
                let n = pages.len() as u32;
                pages.push(QueueHead::empty(self.recipient, self.version, n));
            }
            pages.last_mut().unwrap().tombstones.push((id.0, id.1, *at));
        }
        for i in (0..pages.len().saturating_sub(1)).rev() {
            pages[i].next = sha256(&[&pages[i + 1].encode()]);
        }
        pages
    }

    /// Rebuilds a state from a page chain, checking links and signatures.
    pub fn from_pages(pages: &[QueueHead]) -> Result<Self, DmqError> {
        let head = pages.first().ok_or(DmqError::BrokenChain)?;
        let mut state = QueueState::new(head.recipient);
        state.version = head.version;
        for (i, page) in pages.iter().enumerate() {
            if page.recipient != head.recipient || page.version != head.version || page.index as usize != i {
                return Err(DmqError::BrokenChain);
            }
            let expected_next = match pages.get(i + 1) {
                Some(p) => sha256(&[&p.encode()]),
                None => [0; 32],
            };
            if page.next != expected_next {
                return Err(DmqError::BrokenChain);
            }
            for item in &page.items {
                if item.entry.recipient != state.recipient {
                    return Err(DmqError::WrongRecipient);
                }
                if !item.verify() {
                    return Err(DmqError::InvalidSignature);
                }
                state.items.insert(item.entry.order_key(), *item);
            }
            for (s, c, at) in &page.tombstones {
                state.tombstones.insert((*s, *c), *at);
            }
        }
        Ok(state)
    }

    pub fn encode(&self) -> Vec<u8> {
        let pages = self.to_pages();
        pages
            .iter()
            .fold(Encoder::new().u32(pages.len() as u32), |e, p| e.var(&p.encode()))
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DmqError> {
        let mut d = Decoder::new(bytes);
        let n = d.u32()? as usize;
        if n == 0 || n > 1 << 16 {
            return Err(DmqError::BrokenChain);
        }
        let pages = (0..n)
            .map(|_| QueueHead::decode(d.var()?))
            .collect::<Result<Vec<_>, _>>()?;
        d.finish()?;
        Self::from_pages(&pages)
    }
}

/// One page of a recipient's queue as it travels between holders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueueHead {
    pub recipient: PeerId,
    pub version: u64,
    pub index: u32,
    pub items: Vec<QueuedItem>,
    pub tombstones: Vec<(PeerId, ContentId, UnixMs)>,
    /// SHA-256 of the next page's encoding, zero on the last page.
    pub next: [u8; 32],
}

impl QueueHead {
    const HEADER_LEN: usize = 4 + 32 + 8 + 4 + 4 + 4 + 32;
    const TOMBSTONE_LEN: usize = 32 + 32 + 8;

    fn empty(recipient: PeerId, version: u64, index: u32) -> Self {
        Self {
            recipient,
            version,
            index,
            items: Vec::new(),
            tombstones: Vec::new(),
            next: [0; 32],
        }
    }

    /// Entries that fit in one page alongside its header.
    pub const fn capacity() -> usize {
        (MAX_RECORD_VALUE - Self::HEADER_LEN) / QueuedItem::ENCODED_LEN
    }

    pub fn encoded_len(&self) -> usize {
        Self::HEADER_LEN + self.items.len() * QueuedItem::ENCODED_LEN + self.tombstones.len() * Self::TOMBSTONE_LEN
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new()
            .raw(PAGE_MAGIC)
            .raw(self.recipient.as_bytes())
            .u64(self.version)
            .u32(self.index)
            .u32(self.items.len() as u32);
        for i in &self.items {
            e = i.encode_into(e);
        }
        e = e.u32(self.tombstones.len() as u32);
        for (s, c, at) in &self.tombstones {
            e = e.raw(s.as_bytes()).raw(c.as_bytes()).u64(*at);
        }
        e.raw(&self.next).finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() > MAX_RECORD_VALUE {
            return Err(WireError::TooLarge(bytes.len()));
        }
        let mut d = Decoder::new(bytes);
        if d.take(4)? != PAGE_MAGIC {
            return Err(WireError::Invalid("queue head magic"));
        }
        let recipient = PeerId(d.array()?);
        let version = d.u64()?;
        let index = d.u32()?;
        let n = d.u32()? as usize;
        if n > Self::capacity() {
            return Err(WireError::Invalid("queue head entry count"));
        }
        let items = (0..n)
            .map(|_| QueuedItem::decode_from(&mut d))
            .collect::<Result<_, _>>()?;
        let t = d.u32()? as usize;
        if t * Self::TOMBSTONE_LEN > MAX_RECORD_VALUE {
            return Err(WireError::Invalid("queue head tombstone count"));
        }
        let tombstones = (0..t)
            .map(|_| Ok((PeerId(d.array()?), ContentId(d.array()?), d.u64()?)))
            .collect::<Result<_, WireError>>()?;
        let next = d.array()?;
        d.finish()?;
        Ok(Self {
            recipient,
            version,
            index,
            items,
            tombstones,
            next,
        })
    }
}

/// Proof that the queue owner asked for a drain or an ack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OwnerRequest {
    pub owner_keys: PublicKeys,
    pub timestamp: UnixMs,
    pub cids: Vec<ContentId>,
    pub signature: Signature,
}

impl OwnerRequest {
    fn signing_bytes(tag: &[u8], owner: &PeerId, timestamp: UnixMs, cids: &[ContentId]) -> Vec<u8> {
        cids.iter()
            .fold(
                Encoder::new()
                    .raw(tag)
                    .raw(owner.as_bytes())
                    .u64(timestamp)
                    .u32(cids.len() as u32),
                |e, c| e.raw(c.as_bytes()),
            )
            .finish()
    }

    pub fn drain(owner: &PeerIdentity, timestamp: UnixMs) -> Self {
        Self::signed(owner, DRAIN_TAG, timestamp, Vec::new())
    }

    pub fn ack(owner: &PeerIdentity, timestamp: UnixMs, cids: Vec<ContentId>) -> Self {
        Self::signed(owner, ACK_TAG, timestamp, cids)
    }

    fn signed(owner: &PeerIdentity, tag: &[u8], timestamp: UnixMs, cids: Vec<ContentId>) -> Self {
        let signature = owner.sign(&Self::signing_bytes(tag, &owner.peer_id(), timestamp, &cids));
        Self {
            owner_keys: owner.public_keys(),
            timestamp,
            cids,
            signature,
        }
    }

    pub fn owner(&self) -> PeerId {
        self.owner_keys.peer_id()
    }

    fn check(&self, tag: &[u8], now: UnixMs) -> Result<PeerId, DmqError> {
        let owner = self.owner();
        if !self.owner_keys.verify(
            &Self::signing_bytes(tag, &owner, self.timestamp, &self.cids),
            &self.signature,
        ) {
            return Err(DmqError::Unauthorized);
        }
        if now.abs_diff(self.timestamp) > REQUEST_FRESHNESS_MS {
            return Err(DmqError::Stale);
        }
        Ok(owner)
    }

    pub fn encode(&self) -> Vec<u8> {
        self.cids
            .iter()
            .fold(
                Encoder::new()
                    .raw(&self.owner_keys.encode())
                    .u64(self.timestamp)
                    .u32(self.cids.len() as u32),
                |e, c| e.raw(c.as_bytes()),
            )
            .raw(&self.signature)
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut d = Decoder::new(bytes);
        let owner_keys =
            PublicKeys::decode(d.take(PublicKeys::ENCODED_LEN)?).map_err(|_| WireError::Invalid("owner keys"))?;
        let timestamp = d.u64()?;
        let n = d.u32()? as usize;
        if n.saturating_mul(32) > d.remaining() {
            return Err(WireError::Truncated);
        }
        let cids = (0..n)
            .map(|_| Ok(ContentId(d.array()?)))
            .collect::<Result<_, WireError>>()?;
        let signature = d.array()?;
        d.finish()?;
        Ok(Self {
            owner_keys,
            timestamp,
            cids,
            signature,
        })
    }
}

/// Holder-side storage of queue replicas, optionally persisted one file per
/// recipient.
#[derive(Debug)]
pub struct DmqStore {
    queues: Mutex<HashMap<PeerId, QueueState>>,
    dir: Option<PathBuf>,
    clock: Clock,
}

impl DmqStore {
    pub fn memory(clock: Clock) -> Self {
        Self {
            queues: Mutex::new(HashMap::new()),
            dir: None,
            clock,
        }
    }

    pub fn open(dir: impl AsRef<Path>, clock: Clock) -> Result<Self, DmqError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let mut queues = HashMap::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            match std::fs::read(&path)
                .map_err(DmqError::from)
                .and_then(|b| QueueState::decode(&b))
            {
                Ok(q) => {
                    queues.insert(q.recipient, q);
                }
                Err(e) => warn!(path = %path.display(), error = %e, "skipping unreadable queue file"),
            }
        }
        Ok(Self {
            queues: Mutex::new(queues),
            dir: Some(dir),
            clock,
        })
    }

    fn persist(&self, q: &QueueState) {
        if let Some(dir) = &self.dir {
            let path = dir.join(q.recipient.to_hex());
            let tmp = path.with_extension("tmp");
            let r = std::fs::write(&tmp, q.encode()).and_then(|_| std::fs::rename(&tmp, &path));
            if let Err(e) = r {
                warn!(error = %e, "failed to persist queue");
            }
        }
    }

    pub fn get(&self, recipient: &PeerId) -> Option<QueueState> {
        self.queues.lock().get(recipient).cloned()
    }

    pub fn recipients(&self) -> Vec<PeerId> {
        self.queues.lock().keys().copied().collect()
    }

    /// Total pending entries across all replicas held here.
    pub fn pending(&self) -> usize {
        self.queues.lock().values().map(QueueState::len).sum()
    }

    fn mutate<R>(&self, recipient: PeerId, f: impl FnOnce(&mut QueueState) -> R) -> R {
        let mut queues = self.queues.lock();
        let q = queues.entry(recipient).or_insert_with(|| QueueState::new(recipient));
        let before = q.version;
        let r = f(q);
        if q.version != before {
            self.persist(q);
        }
        r
    }

    pub fn enqueue(&self, item: QueuedItem) -> Result<bool, DmqError> {
        self.mutate(item.entry.recipient, |q| q.insert(item))
    }

    pub fn drain(&self, req: &OwnerRequest) -> Result<QueueState, DmqError> {
        let owner = req.check(DRAIN_TAG, self.clock.now_ms())?;
        Ok(self.get(&owner).unwrap_or_else(|| QueueState::new(owner)))
    }

    pub fn ack(&self, req: &OwnerRequest) -> Result<usize, DmqError> {
        let now = self.clock.now_ms();
        let owner = req.check(ACK_TAG, now)?;
        Ok(self.mutate(owner, |q| q.ack(&req.cids, now)))
    }

    pub fn sync(&self, offered: QueueState) -> Result<bool, DmqError> {
        self.mutate(offered.recipient, |q| q.merge(offered))
    }

    pub fn sweep(&self) -> usize {
        let now = self.clock.now_ms();
        let mut queues = self.queues.lock();
        let mut n = 0;
        for q in queues.values_mut() {
            n += q.sweep(now, TOMBSTONE_TTL_MS);
        }
        queues.retain(|_, q| !q.is_empty() || q.tombstone_count() > 0);
        n
    }

    /// Answers the queue message types; `None` for anything else.
    pub fn dispatch(&self, kind: u8, body: &[u8]) -> Option<Result<Frame, DmqError>> {
        let r = match kind {
            msg::DMQ_ENQUEUE => QueuedItem::decode(body)
                .map_err(DmqError::from)
                .and_then(|i| self.enqueue(i))
                .map(|changed| Frame::new(msg::DMQ_OK, vec![changed as u8])),
            msg::DMQ_DRAIN => OwnerRequest::decode(body)
                .map_err(DmqError::from)
                .and_then(|r| self.drain(&r))
                .map(|q| Frame::new(msg::DMQ_ENTRIES, q.encode())),
            msg::DMQ_ACK => OwnerRequest::decode(body)
                .map_err(DmqError::from)
                .and_then(|r| self.ack(&r))
                .map(|n| Frame::new(msg::DMQ_OK, Encoder::new().u32(n as u32).finish())),
            msg::DMQ_SYNC => QueueState::decode(body).and_then(|q| self.sync(q)).map_or_else(
                |e| match e {
                    // not an error for the sender: we already have newer state
                    DmqError::StaleVersion { .. } => Ok(Frame::new(msg::DMQ_OK, vec![0])),
                    e => Err(e),
                },
                |changed| Ok(Frame::new(msg::DMQ_OK, vec![changed as u8])),
            ),
            msg::DMQ_STATUS => (|| {
                let mut d = Decoder::new(body);
                let recipient = PeerId(d.array()?);
                d.finish()?;
                let (version, len) = self.get(&recipient).map_or((0, 0), |q| (q.version, q.len()));
                Ok(Frame::new(
                    msg::DMQ_STATUS_RESP,
                    Encoder::new().u64(version).u32(len as u32).finish(),
                ))
            })(),
            _ => return None,
        };
        Some(r)
    }
}

/// Outcome of an enqueue across the holder set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnqueueReport {
    pub holders: Vec<PeerId>,
    pub acknowledged: usize,
}

/// Client side of the queue for one node.
#[derive(Debug)]
pub struct Dmq {
    dht: Arc<Dht>,
    store: Arc<DmqStore>,
}

impl Dmq {
    pub fn new(dht: Arc<Dht>, store: Arc<DmqStore>) -> Self {
        Self { dht, store }
    }

    pub fn store(&self) -> &Arc<DmqStore> {
        &self.store
    }

    /// The current holder set for a recipient's queue.
    pub async fn holders(&self, recipient: &PeerId) -> Vec<NodeInfo> {
        self.dht.find_node(&queue_key(recipient)).await
    }

    async fn call(&self, holder: &NodeInfo, kind: u8, body: &[u8], reply: u8) -> Result<Vec<u8>, DmqError> {
        let frame = self.dht.request(holder, kind, body).await?;
        Ok(expect(frame, reply)?)
    }

    fn is_local(&self, n: &NodeInfo) -> bool {
        n.peer_id == self.dht.peer_id()
    }

    pub async fn enqueue(&self, item: QueuedItem) -> Result<EnqueueReport, DmqError> {
        if !item.verify() {
            return Err(DmqError::InvalidSignature);
        }
        let holders = self.holders(&item.entry.recipient).await;
        let body = item.encode();
        let acks = join_all(holders.iter().map(|h| {
            let body = &body;
            async move {
                if self.is_local(h) {
                    self.store.enqueue(item).is_ok()
                } else {
                    self.call(h, msg::DMQ_ENQUEUE, body, msg::DMQ_OK).await.is_ok()
                }
            }
        }))
        .await;
        let acknowledged = acks.iter().filter(|a| **a).count();
        if acknowledged == 0 {
            return Err(DmqError::NoHolders);
        }
        Ok(EnqueueReport {
            holders: holders.iter().map(|h| h.peer_id).collect(),
            acknowledged,
        })
    }

    /// Reads every replica and returns the merged pending entries in queue
    /// order, without removing anything.
    pub async fn drain(&self, owner: &PeerIdentity) -> Result<Vec<QueuedItem>, DmqError> {
        let me = owner.peer_id();
        let req = OwnerRequest::drain(owner, self.dht_now());
        let body = req.encode();
        let holders = self.holders(&me).await;
        let replies = join_all(holders.iter().map(|h| {
            let body = &body;
            let req = &req;
            async move {
                if self.is_local(h) {
                    self.store.drain(req)
                } else {
                    let bytes = self.call(h, msg::DMQ_DRAIN, body, msg::DMQ_ENTRIES).await?;
                    QueueState::decode(&bytes)
                }
            }
        }))
        .await;
        let mut answered = 0;
        let mut items: BTreeMap<(UnixMs, ContentId, PeerId), QueuedItem> = BTreeMap::new();
        let mut tombs: std::collections::HashSet<EntryId> = Default::default();
        for r in replies {
            match r {
                Ok(q) if q.recipient == me => {
                    answered += 1;
                    tombs.extend(q.tombstones.keys().copied());
                    for (k, i) in q.items {
                        items.entry(k).or_insert(i);
                    }
                }
                Ok(_) => warn!("holder answered with another queue"),
                Err(e) => debug!(error = %e, "drain from holder failed"),
            }
        }
        if answered == 0 && !holders.is_empty() {
            return Err(DmqError::NoHolders);
        }
        Ok(items
            .into_values()
            .filter(|i| !tombs.contains(&(i.entry.sender, i.entry.msg_cid)))
            .collect())
    }

    /// Removes entries from every replica. Unknown cids are ignored.
    pub async fn ack(&self, owner: &PeerIdentity, cids: Vec<ContentId>) -> Result<usize, DmqError> {
        if cids.is_empty() {
            return Ok(0);
        }
        let req = OwnerRequest::ack(owner, self.dht_now(), cids);
        let body = req.encode();
        let holders = self.holders(&owner.peer_id()).await;
        let results = join_all(holders.iter().map(|h| {
            let body = &body;
            let req = &req;
            async move {
                if self.is_local(h) {
                    self.store.ack(req)
                } else {
                    let bytes = self.call(h, msg::DMQ_ACK, body, msg::DMQ_OK).await?;
                    Ok(Decoder::new(&bytes).u32()? as usize)
                }
            }
        }))
        .await;
        let ok = results.iter().filter(|r| r.is_ok()).count();
        if ok == 0 {
            return Err(DmqError::NoHolders);
        }
        Ok(results.into_iter().filter_map(Result::ok).max().unwrap_or(0))
    }

    /// Pushes every held replica to the recipient's current holder set.
    /// Returns the number of pushes that changed a remote replica.
    pub async fn republish(&self) -> usize {
        let mut changed = 0;
        for recipient in self.store.recipients() {
            let Some(state) = self.store.get(&recipient) else {
                continue;
            };
            let body = state.encode();
            let holders = self.holders(&recipient).await;
            for h in holders.iter().filter(|h| !self.is_local(h)) {
                if let Ok(b) = self.call(h, msg::DMQ_SYNC, &body, msg::DMQ_OK).await {
                    changed += (b.first() == Some(&1)) as usize;
                }
            }
        }
        changed
    }

    /// Pending entry count on each holder: (holder, version, pending).
    pub async fn status(&self, recipient: &PeerId) -> Vec<(PeerId, u64, usize)> {
        let holders = self.holders(recipient).await;
        let mut out = Vec::new();
        for h in holders {
            if self.is_local(&h) {
                let (v, n) = self.store.get(recipient).map_or((0, 0), |q| (q.version, q.len()));
                out.push((h.peer_id, v, n));
            } else if let Ok(b) = self
                .call(&h, msg::DMQ_STATUS, recipient.as_bytes(), msg::DMQ_STATUS_RESP)
                .await
            {
                let mut d = Decoder::new(&b);
                if let (Ok(v), Ok(n)) = (d.u64(), d.u32()) {
                    out.push((h.peer_id, v, n as usize));
                }
            }
        }
        out
    }

    fn dht_now(&self) -> UnixMs {
        self.store.clock.now_ms()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(sender: &PeerIdentity, recipient: PeerId, cid: u8, ts: UnixMs) -> QueuedItem {
        QueuedItem {
            entry: QueueEntry::new_signed(sender, recipient, ContentId([cid; 32]), ts),
            sender_keys: sender.public_keys(),
        }
    }

    #[test]
    fn queue_key_vector() {
        // independent oracle: SHA-256 of the 12-byte tag followed by 32 zero bytes
        assert_eq!(
            hex::encode(queue_key(&PeerId([0; 32]))),
            "52e2561113eaaffac057e03f4f02c3543d4f161ff04c665080bd17adc40798d2"
        );
        assert_eq!(queue_key(&PeerId([1; 32])), queue_key(&PeerId([1; 32])));
        assert_ne!(queue_key(&PeerId([1; 32])), queue_key(&PeerId([2; 32])));
    }

    #[test]
    fn entry_is_168_bytes_and_verifies() {
        let s = PeerIdentity::generate();
        let i = item(&s, PeerId([9; 32]), 4, 77);
        let bytes = i.entry.encode();
        assert_eq!(bytes.len(), 168);
        assert_eq!(&bytes[..32], &[9; 32]);
        assert_eq!(&bytes[32..64], &[4; 32]);
        assert_eq!(&bytes[64..96], s.peer_id().as_bytes());
        assert_eq!(&bytes[96..104], &77u64.to_be_bytes());
        assert_eq!(QueueEntry::decode(&bytes).unwrap(), i.entry);
        assert!(i.verify());

        let mut bad = i;
        bad.entry.timestamp += 1;
        assert!(!bad.verify());
        let other = PeerIdentity::generate();
        let mut bad = i;
        bad.sender_keys = other.public_keys();
        assert!(!bad.verify());
    }

    #[test]
    fn enqueue_drain_ack_contract() {
        let clock = Clock::manual(1_000_000);
        let store = DmqStore::memory(clock.clone());
        let r = PeerIdentity::generate();
        let a = PeerIdentity::generate();
        let b = PeerIdentity::generate();

        assert!(store
            .drain(&OwnerRequest::drain(&r, clock.now_ms()))
            .unwrap()
            .is_empty());

        let e1 = item(&a, r.peer_id(), 1, 300);
        let e2 = item(&b, r.peer_id(), 2, 100);
        let e3 = item(&a, r.peer_id(), 3, 200);
        assert!(store.enqueue(e1).unwrap());
        assert!(!store.enqueue(e1).unwrap());
        store.enqueue(e2).unwrap();
        store.enqueue(e3).unwrap();

        // sort oracle
        let mut expected = vec![e1.entry, e2.entry, e3.entry];
        expected.sort_by_key(|e| (e.timestamp, e.msg_cid));
        let q = store.drain(&OwnerRequest::drain(&r, clock.now_ms())).unwrap();
        assert_eq!(q.entries(), expected);
        // drain does not remove
        assert_eq!(store.drain(&OwnerRequest::drain(&r, clock.now_ms())).unwrap().len(), 3);

        let v = store.get(&r.peer_id()).unwrap().version;
        assert_eq!(
            store
                .ack(&OwnerRequest::ack(&r, clock.now_ms(), vec![ContentId([8; 32])]))
                .unwrap(),
            0
        );
        assert_eq!(store.get(&r.peer_id()).unwrap().version, v);

        assert_eq!(
            store
                .ack(&OwnerRequest::ack(&r, clock.now_ms(), vec![ContentId([1; 32])]))
                .unwrap(),
            1
        );
        assert!(store.get(&r.peer_id()).unwrap().version > v);
        // an acked entry cannot come back
        assert!(!store.enqueue(e1).unwrap());
        assert_eq!(store.drain(&OwnerRequest::drain(&r, clock.now_ms())).unwrap().len(), 2);
    }

    #[test]
    fn owner_requests_are_authorised() {
        let clock = Clock::manual(1_000_000);
        let store = DmqStore::memory(clock.clone());
        let r = PeerIdentity::generate();
        let mallory = PeerIdentity::generate();
        store.enqueue(item(&mallory, r.peer_id(), 1, 5)).unwrap();

        // signed by someone else: they only ever see their own queue
        let q = store.drain(&OwnerRequest::drain(&mallory, clock.now_ms())).unwrap();
        assert!(q.is_empty());

        // forged: claims r's keys with mallory's signature
        let mut forged = OwnerRequest::drain(&mallory, clock.now_ms());
        forged.owner_keys = r.public_keys();
        assert!(matches!(store.drain(&forged), Err(DmqError::Unauthorized)));
        let mut forged = OwnerRequest::ack(&mallory, clock.now_ms(), vec![ContentId([1; 32])]);
        forged.owner_keys = r.public_keys();
        assert!(matches!(store.ack(&forged), Err(DmqError::Unauthorized)));

        let old = OwnerRequest::drain(&r, clock.now_ms() - REQUEST_FRESHNESS_MS - 1);
        assert!(matches!(store.drain(&old), Err(DmqError::Stale)));

        let req = OwnerRequest::ack(&r, 42, vec![ContentId([1; 32]), ContentId([2; 32])]);
        assert_eq!(OwnerRequest::decode(&req.encode()).unwrap(), req);
    }

    #[test]
    fn enqueue_rejects_bad_entries() {
        let store = DmqStore::memory(Clock::manual(0));
        let s = PeerIdentity::generate();
        let mut bad = item(&s, PeerId([1; 32]), 1, 1);
        bad.entry.signature[3] ^= 1;
        assert!(matches!(store.enqueue(bad), Err(DmqError::InvalidSignature)));
    }

    #[test]
    fn merge_is_monotone_and_keeps_acks() {
        let r = PeerIdentity::generate();
        let s = PeerIdentity::generate();
        let mut a = QueueState::new(r.peer_id());
        let mut b = QueueState::new(r.peer_id());
        a.insert(item(&s, r.peer_id(), 1, 1)).unwrap();
        a.insert(item(&s, r.peer_id(), 2, 2)).unwrap();
        b.merge(a.clone()).unwrap();
        assert_eq!(b.entries(), a.entries());
        assert_eq!(b.version, a.version);

        // b acks 1; a stale copy of a must not resurrect it
        b.ack(&[ContentId([1; 32])], 10);
        assert!(matches!(b.merge(a.clone()), Err(DmqError::StaleVersion { .. })));
        // a newer a (it got another entry) merges but keeps b's tombstone
        a.insert(item(&s, r.peer_id(), 3, 3)).unwrap();
        a.insert(item(&s, r.peer_id(), 4, 4)).unwrap();
        b.merge(a.clone()).unwrap();
        let cids: Vec<u8> = b.entries().iter().map(|e| e.msg_cid.0[0]).collect();
        assert_eq!(cids, vec![2, 3, 4]);
        assert!(b.version > a.version);
        // and a adopts it back
        a.merge(b.clone()).unwrap();
        assert_eq!(a.entries(), b.entries());
    }

    #[test]
    fn pages_respect_record_bound_and_chain() {
        let r = PeerIdentity::generate();
        let s = PeerIdentity::generate();
        let mut q = QueueState::new(r.peer_id());
        for i in 0..100u64 {
            q.insert(QueuedItem {
                entry: QueueEntry::new_signed(&s, r.peer_id(), ContentId(sha256(&[&i.to_be_bytes()])), i),
                sender_keys: s.public_keys(),
            })
            .unwrap();
        }
        let cids: Vec<ContentId> = q.entries().iter().take(30).map(|e| e.msg_cid).collect();
        q.ack(&cids, 5);
        let pages = q.to_pages();
        assert!(pages.len() > 1);
        assert!(QueueHead::capacity() >= 16);
        for p in &pages {
            assert!(p.encode().len() <= MAX_RECORD_VALUE);
            assert_eq!(QueueHead::decode(&p.encode()).unwrap(), *p);
        }
        assert_eq!(QueueState::decode(&q.encode()).unwrap(), q);

        // a swapped or altered page breaks the chain
        let mut broken = pages.clone();
        broken[1].items.pop();
        assert!(matches!(QueueState::from_pages(&broken), Err(DmqError::BrokenChain)));
        let mut broken = pages;
        broken.swap(1, 2);
        assert!(QueueState::from_pages(&broken).is_err());
    }

    #[test]
    fn store_persists_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let r = PeerIdentity::generate();
        let s = PeerIdentity::generate();
        {
            let store = DmqStore::open(dir.path(), Clock::manual(0)).unwrap();
            store.enqueue(item(&s, r.peer_id(), 7, 1)).unwrap();
        }
        let store = DmqStore::open(dir.path(), Clock::manual(0)).unwrap();
        assert_eq!(store.get(&r.peer_id()).unwrap().len(), 1);
    }
}
