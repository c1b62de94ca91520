//! Replicated pinning over the swarm.
//!
//! The origin pushes a block to the `replication` peers XOR-closest to its
//! cid. A holder checks the push signature, stores the block (which verifies
//! its hash), publishes a signed provider record and only then acknowledges.
//! Release notices must be signed by one of the peers the origin named as
//! releasers (itself and the message recipient); unreachable holders drop
//! the block when its pin TTL runs out.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use futures::future::join_all;
use parking_lot::Mutex;
use thiserror::Error;
use tracing::{debug, warn};

use crate::clock::UnixMs;
use crate::crypto::{content_id, ContentId, PeerId, PeerIdentity, PublicKeys, Signature};
use crate::dht::{Dht, DhtError, DhtRecord, NodeInfo, RecordKind};
use crate::rpc::{expect, msg, RpcError};
use crate::store::{BlockStore, Chunk, PinRecord, PinState, StoreError};
use crate::wire::{Decoder, Encoder, Frame, WireError};

const PUSH_TAG: &[u8] = b"fybrr/pin/push/v1";
const RELEASE_TAG: &[u8] = b"fybrr/pin/release/v1";
const MAX_RELEASERS: usize = 8;

#[derive(Debug, Error)]
pub enum PinError {
    #[error("pin request signature invalid")]
    InvalidSignature,
    #[error("{0} may not release this block")]
    NotAuthorized(PeerId),
    #[error("block {0} not retrievable from any holder")]
    Unavailable(ContentId),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error(transparent)]
    Dht(#[from] DhtError),
}

/// Request to hold a block, signed by the pinning peer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PinPush {
    pub pinner_keys: PublicKeys,
    pub releasers: Vec<PeerId>,
    pub data: Vec<u8>,
    pub signature: Signature,
}

impl PinPush {
    fn signing_bytes(cid: &ContentId, releasers: &[PeerId]) -> Vec<u8> {
        releasers
            .iter()
            .fold(
                Encoder::new()
                    .raw(PUSH_TAG)
                    .raw(cid.as_bytes())
                    .u8(releasers.len() as u8),
                |e, r| e.raw(r.as_bytes()),
            )
            .finish()
    }

    pub fn new(pinner: &PeerIdentity, data: Vec<u8>, mut releasers: Vec<PeerId>) -> Self {
        if !releasers.contains(&pinner.peer_id()) {
            releasers.insert(0, pinner.peer_id());
        }
        releasers.truncate(MAX_RELEASERS);
        let cid = content_id(&data);
        Self {
            pinner_keys: pinner.public_keys(),
            signature: pinner.sign(&Self::signing_bytes(&cid, &releasers)),
            releasers,
            data,
        }
    }

    pub fn cid(&self) -> ContentId {
        content_id(&self.data)
    }

    pub fn verify(&self) -> bool {
        self.pinner_keys
            .verify(&Self::signing_bytes(&self.cid(), &self.releasers), &self.signature)
    }

    pub fn encode(&self) -> Vec<u8> {
        self.releasers
            .iter()
            .fold(
                Encoder::new()
                    .raw(&self.pinner_keys.encode())
                    .u8(self.releasers.len() as u8),
                |e, r| e.raw(r.as_bytes()),
            )
            .var(&self.data)
            .raw(&self.signature)
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut d = Decoder::new(bytes);
        let pinner_keys =
            PublicKeys::decode(d.take(PublicKeys::ENCODED_LEN)?).map_err(|_| WireError::Invalid("pinner keys"))?;
        let n = d.u8()? as usize;
        if n > MAX_RELEASERS {
            return Err(WireError::Invalid("too many releasers"));
        }
        let releasers = (0..n)
            .map(|_| Ok(PeerId(d.array()?)))
            .collect::<Result<_, WireError>>()?;
        let data = d.var()?.to_vec();
        let signature = d.array()?;
        d.finish()?;
        Ok(Self {
            pinner_keys,
            releasers,
            data,
            signature,
        })
    }
}

/// Signed instruction to stop holding a block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReleaseNotice {
    pub cid: ContentId,
    pub releaser_keys: PublicKeys,
    pub timestamp: UnixMs,
    pub signature: Signature,
}

impl ReleaseNotice {
    fn signing_bytes(cid: &ContentId, timestamp: UnixMs) -> Vec<u8> {
        Encoder::new()
            .raw(RELEASE_TAG)
            .raw(cid.as_bytes())
            .u64(timestamp)
            .finish()
    }

    pub fn new(releaser: &PeerIdentity, cid: ContentId, timestamp: UnixMs) -> Self {
        Self {
            cid,
            releaser_keys: releaser.public_keys(),
            timestamp,
            signature: releaser.sign(&Self::signing_bytes(&cid, timestamp)),
        }
    }

    pub fn verify(&self) -> bool {
        self.releaser_keys
            .verify(&Self::signing_bytes(&self.cid, self.timestamp), &self.signature)
    }

    pub fn encode(&self) -> Vec<u8> {
        Encoder::new()
            .raw(self.cid.as_bytes())
            .raw(&self.releaser_keys.encode())
            .u64(self.timestamp)
            .raw(&self.signature)
            .finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut d = Decoder::new(bytes);
        let cid = ContentId(d.array()?);
        let releaser_keys =
            PublicKeys::decode(d.take(PublicKeys::ENCODED_LEN)?).map_err(|_| WireError::Invalid("releaser keys"))?;
        let r = Self {
            cid,
            releaser_keys,
            timestamp: d.u64()?,
            signature: d.array()?,
        };
        d.finish()?;
        Ok(r)
    }
}

/// Counters for integrity checks on fetched blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FetchStats {
    pub fetched: u64,
    pub corrupt_detected: u64,
}

#[derive(Debug)]
pub struct PinService {
    identity: PeerIdentity,
    dht: Arc<Dht>,
    store: Arc<BlockStore>,
    replication: usize,
    /// Pins this node originated.
    records: Mutex<HashMap<ContentId, PinRecord>>,
    /// Who may release each block this node holds for others.
    releasers: Mutex<HashMap<ContentId, HashSet<PeerId>>>,
    fetched: AtomicU64,
    corrupt_detected: AtomicU64,
    /// Fault injection: answer block requests without checking the bytes.
    serve_unverified: AtomicBool,
}

impl PinService {
    pub fn new(identity: PeerIdentity, dht: Arc<Dht>, store: Arc<BlockStore>, replication: usize) -> Self {
        Self {
            identity,
            dht,
            store,
            replication: replication.max(1),
            records: Mutex::new(HashMap::new()),
            releasers: Mutex::new(HashMap::new()),
            fetched: AtomicU64::new(0),
            corrupt_detected: AtomicU64::new(0),
            serve_unverified: AtomicBool::new(false),
        }
    }

    pub fn store(&self) -> &Arc<BlockStore> {
        &self.store
    }

    pub fn replication(&self) -> usize {
        self.replication
    }

    pub fn record(&self, cid: &ContentId) -> Option<PinRecord> {
        self.records.lock().get(cid).cloned()
    }

    pub fn stats(&self) -> FetchStats {
        FetchStats {
            fetched: self.fetched.load(Ordering::Relaxed),
            corrupt_detected: self.corrupt_detected.load(Ordering::Relaxed),
        }
    }

    #[doc(hidden)]
    pub fn set_serve_unverified(&self, on: bool) {
        self.serve_unverified.store(on, Ordering::Relaxed);
    }

    /// Replicates a locally stored block to the peers closest to its cid.
    /// Candidates are tried in distance order until `replication` have
    /// acknowledged; with no reachable peer the record holds only this node
    /// and is flagged degraded.
    pub async fn pin(&self, cid: &ContentId, releasers: Vec<PeerId>) -> Result<PinRecord, PinError> {
        let chunk = self.store.get_block(cid)?;
        let me = self.identity.peer_id();
        let candidates: Vec<NodeInfo> = self
            .dht
            .find_node(cid.as_bytes())
            .await
            .into_iter()
            .filter(|n| n.peer_id != me)
            .collect();
        let body = PinPush::new(&self.identity, chunk.data, releasers).encode();
        let mut holders = BTreeSet::new();
        let mut next = 0;
        while holders.len() < self.replication && next < candidates.len() {
            let want = self.replication - holders.len();
            let batch = &candidates[next..(next + want).min(candidates.len())];
            next += batch.len();
            let acks = join_all(batch.iter().map(|n| {
                let body = &body;
                async move {
                    let ok = match self.dht.request(n, msg::PIN_PUSH, body).await {
                        Ok(f) => expect(f, msg::PIN_ACK).is_ok(),
                        Err(e) => {
                            debug!(peer = %n.peer_id, error = %e, "pin push failed");
                            false
                        }
                    };
                    (n.peer_id, ok)
                }
            }))
            .await;
            holders.extend(acks.into_iter().filter(|(_, ok)| *ok).map(|(p, _)| p));
        }
        let wanted = self.replication.min(candidates.len());
        let degraded = holders.is_empty() || holders.len() < wanted;
        if holders.is_empty() {
            holders.insert(me);
        }
        let record = PinRecord {
            cid: *cid,
            holders,
            created_at: self.dht_now(),
            state: PinState::Pinned,
            degraded,
        };
        self.records.lock().insert(*cid, record.clone());
        Ok(record)
    }

    /// Keeps serving a block from this node: records who may release it and
    /// announces this node as a provider. Used by a sender whose pin did not
    /// reach full replication.
    pub async fn hold_locally(&self, cid: &ContentId, releasers: &[PeerId]) -> Result<(), PinError> {
        if !self.store.contains(cid) {
            return Err(PinError::Unavailable(*cid));
        }
        self.releasers
            .lock()
            .entry(*cid)
            .or_default()
            .extend(releasers.iter().copied());
        let record = DhtRecord::provider(
            &self.identity,
            *cid.as_bytes(),
            self.dht.local(),
            self.dht.record_expiry(),
        )?;
        self.dht.store_record(&record).await?;
        Ok(())
    }

    /// Sends release notices to every known holder and provider, and
    /// releases the local copy. Unknown cids are a no-op.
    pub async fn unpin(&self, cid: &ContentId) -> usize {
        let mut targets: HashMap<PeerId, Option<NodeInfo>> = HashMap::new();
        if let Some(r) = self.records.lock().get_mut(cid) {
            r.state = PinState::Released;
            for h in &r.holders {
                targets.insert(*h, None);
            }
        }
        for rec in self.dht.find_value(cid.as_bytes(), RecordKind::Provider).await {
            if let Some(info) = rec.provider_info() {
                targets.insert(info.peer_id, Some(info));
            }
        }
        let me = self.identity.peer_id();
        targets.remove(&me);
        let notice = ReleaseNotice::new(&self.identity, *cid, self.dht_now()).encode();
        let sent = join_all(targets.into_iter().map(|(peer, info)| {
            let notice = &notice;
            async move {
                let info = info.or_else(|| self.dht.lookup_peer(&peer))?;
                let f = self.dht.request(&info, msg::RELEASE, notice).await.ok()?;
                expect(f, msg::RELEASED).ok()
            }
        }))
        .await;
        let _ = self.store.release(cid);
        self.releasers.lock().remove(cid);
        sent.iter().filter(|s| s.is_some()).count()
    }

    /// Returns a verified block, from the local store or from a provider.
    /// Providers whose bytes do not match the cid are skipped and counted.
    pub async fn fetch(&self, cid: &ContentId) -> Result<Chunk, PinError> {
        if let Ok(c) = self.store.get_block(cid) {
            return Ok(c);
        }
        let me = self.identity.peer_id();
        let mut tried = HashSet::new();
        let providers: Vec<NodeInfo> = self
            .dht
            .find_value(cid.as_bytes(), RecordKind::Provider)
            .await
            .iter()
            .filter_map(DhtRecord::provider_info)
            .collect();
        for n in providers {
            if n.peer_id == me || !tried.insert(n.peer_id) {
                continue;
            }
            if let Some(c) = self.fetch_from(&n, cid).await {
                return Ok(c);
            }
        }
        // providers may have expired; holders are the closest nodes anyway
        for n in self.dht.find_node(cid.as_bytes()).await {
            if n.peer_id == me || !tried.insert(n.peer_id) {
                continue;
            }
            if let Some(c) = self.fetch_from(&n, cid).await {
                return Ok(c);
            }
        }
        Err(PinError::Unavailable(*cid))
    }

    async fn fetch_from(&self, n: &NodeInfo, cid: &ContentId) -> Option<Chunk> {
        let f = self.dht.request(n, msg::GET_BLOCK, cid.as_bytes()).await.ok()?;
        let data = expect(f, msg::BLOCK).ok()?;
        let chunk = Chunk { cid: *cid, data };
        if chunk.verify() {
            self.fetched.fetch_add(1, Ordering::Relaxed);
            Some(chunk)
        } else {
            self.corrupt_detected.fetch_add(1, Ordering::Relaxed);
            warn!(peer = %n.peer_id, %cid, "provider served corrupt block");
            None
        }
    }

    // Holder side.

    pub async fn handle_push(&self, push: PinPush) -> Result<ContentId, PinError> {
        if !push.releasers.contains(&push.pinner_keys.peer_id()) || !push.verify() {
            return Err(PinError::InvalidSignature);
        }
        let cid = self.store.put_block(&Chunk::new(push.data))?;
        self.releasers
            .lock()
            .entry(cid)
            .or_default()
            .extend(push.releasers.iter().copied());
        let record = DhtRecord::provider(
            &self.identity,
            *cid.as_bytes(),
            self.dht.local(),
            self.dht.record_expiry(),
        )?;
        self.dht.store_record(&record).await?;
        Ok(cid)
    }

    pub fn handle_release(&self, notice: &ReleaseNotice) -> Result<bool, PinError> {
        if !notice.verify() {
            return Err(PinError::InvalidSignature);
        }
        let who = notice.releaser_keys.peer_id();
        let allowed = self.releasers.lock().get(&notice.cid).is_some_and(|s| s.contains(&who));
        if !allowed {
            // unknown blocks are a no-op; known ones need authority
            if self.store.contains(&notice.cid) {
                return Err(PinError::NotAuthorized(who));
            }
            return Ok(false);
        }
        self.releasers.lock().remove(&notice.cid);
        Ok(self.store.release(&notice.cid)?)
    }

    pub fn handle_get(&self, cid: &ContentId) -> Result<Vec<u8>, PinError> {
        if self.serve_unverified.load(Ordering::Relaxed) && self.store.contains(cid) {
            return self.store.get_raw(cid).ok_or(PinError::Unavailable(*cid));
        }
        Ok(self.store.get_block(cid)?.data)
    }

    /// Answers the pinning message types; `None` for anything else.
    pub async fn dispatch(&self, kind: u8, body: &[u8]) -> Option<Result<Frame, PinError>> {
        let r = match kind {
            msg::PIN_PUSH => match PinPush::decode(body) {
                Ok(p) => self
                    .handle_push(p)
                    .await
                    .map(|cid| Frame::new(msg::PIN_ACK, cid.as_bytes().to_vec())),
                Err(e) => Err(e.into()),
            },
            msg::GET_BLOCK => ContentId::from_slice(body)
                .map_err(|_| PinError::Wire(WireError::Invalid("cid")))
                .and_then(|cid| self.handle_get(&cid))
                .map(|d| Frame::new(msg::BLOCK, d)),
            msg::RELEASE => ReleaseNotice::decode(body)
                .map_err(PinError::from)
                .and_then(|n| self.handle_release(&n))
                .map(|changed| Frame::new(msg::RELEASED, vec![changed as u8])),
            _ => return None,
        };
        Some(r)
    }

    fn dht_now(&self) -> UnixMs {
        self.dht.clock().now_ms()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::Clock;
    use crate::dht::DhtConfig;
    use crate::rpc::RpcClient;
    use std::time::Duration;

    fn service(identity: &PeerIdentity) -> PinService {
        let clock = Clock::manual(1_000);
        let dht = Arc::new(Dht::new(
            identity.clone(),
            "127.0.0.1:9".parse().unwrap(),
            [0; 32],
            Arc::new(RpcClient::new(Duration::from_millis(100))),
            clock.clone(),
            DhtConfig::default(),
        ));
        PinService::new(identity.clone(), dht, Arc::new(BlockStore::memory(clock)), 3)
    }

    #[test]
    fn push_roundtrip_and_tamper() {
        let pinner = PeerIdentity::generate();
        let recipient = PeerIdentity::generate().peer_id();
        let push = PinPush::new(&pinner, b"block".to_vec(), vec![recipient]);
        assert_eq!(push.releasers, vec![pinner.peer_id(), recipient]);
        assert!(push.verify());
        let back = PinPush::decode(&push.encode()).unwrap();
        assert_eq!(back, push);

        let mut forged = push.clone();
        forged.releasers.push(PeerIdentity::generate().peer_id());
        assert!(!forged.verify());
        let mut swapped = push;
        swapped.data = b"other".to_vec();
        assert!(!swapped.verify());
    }

    #[test]
    fn release_notice_roundtrip_and_tamper() {
        let r = PeerIdentity::generate();
        let n = ReleaseNotice::new(&r, content_id(b"x"), 42);
        assert!(n.verify());
        assert_eq!(ReleaseNotice::decode(&n.encode()).unwrap(), n);
        let mut late = n.clone();
        late.timestamp += 1;
        assert!(!late.verify());
        assert!(ReleaseNotice::decode(&n.encode()[1..]).is_err());
    }

    #[tokio::test]
    async fn only_named_releasers_may_release() {
        let holder = PeerIdentity::generate();
        let pinner = PeerIdentity::generate();
        let recipient = PeerIdentity::generate();
        let svc = service(&holder);
        let push = PinPush::new(&pinner, b"held".to_vec(), vec![recipient.peer_id()]);
        let cid = svc.handle_push(push).await.unwrap();
        assert!(svc.store().contains(&cid));

        let stranger = PeerIdentity::generate();
        assert!(matches!(
            svc.handle_release(&ReleaseNotice::new(&stranger, cid, 1)),
            Err(PinError::NotAuthorized(_))
        ));
        assert!(svc.handle_release(&ReleaseNotice::new(&recipient, cid, 1)).unwrap());
        svc.store().gc(1_000);
        assert!(!svc.store().contains(&cid));
        // releasing an unknown block is a harmless no-op
        assert!(!svc.handle_release(&ReleaseNotice::new(&stranger, cid, 2)).unwrap());
    }

    #[tokio::test]
    async fn unsigned_push_is_refused_and_stores_nothing() {
        let holder = PeerIdentity::generate();
        let svc = service(&holder);
        let mut push = PinPush::new(&PeerIdentity::generate(), b"data".to_vec(), vec![]);
        push.signature[0] ^= 1;
        assert!(matches!(svc.handle_push(push).await, Err(PinError::InvalidSignature)));
        assert!(svc.store().is_empty());
    }

    #[tokio::test]
    async fn serve_unverified_exposes_raw_bytes() {
        let holder = PeerIdentity::generate();
        let svc = service(&holder);
        let cid = svc
            .handle_push(PinPush::new(&PeerIdentity::generate(), vec![1, 2, 3], vec![]))
            .await
            .unwrap();
        svc.store().corrupt_byte(&cid, 0, 0xff);
        assert!(svc.handle_get(&cid).is_err());
        svc.set_serve_unverified(true);
        assert_eq!(svc.handle_get(&cid).unwrap()[0], 1 ^ 0xff);
    }
}
