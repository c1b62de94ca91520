//! Chunking, manifests, and the local content-addressed block store.
//!
//! Blocks are keyed by the SHA-256 of their bytes and checked on the way in
//! and on the way out. Each block carries a retention entry (`pinned` or
//! `released`, plus the time it was pinned); [`BlockStore::gc`] drops released
//! blocks and blocks whose pin outlived the TTL. On disk every block is one
//! file under `blocks/<hex cid>` and retention changes are appended to
//! `pins.log` as `<hex cid> <pinned|released> <unix-ms>` lines.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::clock::{Clock, UnixMs};
use crate::crypto::{content_id, ContentId, Nonce, PeerId, KEY_LEN, NONCE_LEN};
use crate::par::{self, Strategy};
use crate::wire::{Decoder, Encoder, WireError};

pub const DEFAULT_CHUNK_SIZE: usize = 64 * 1024;
pub const MIN_CHUNK_SIZE: usize = 1024;
pub const DEFAULT_REPLICATION: usize = 3;
pub const DEFAULT_PIN_TTL_MS: u64 = 30 * 24 * 60 * 60 * 1000;

const MANIFEST_MAGIC: &[u8; 4] = b"FMv1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("block hash mismatch: claimed {claimed}, actual {actual}")]
    HashMismatch { claimed: ContentId, actual: ContentId },
    #[error("block {0} not found")]
    NotFound(ContentId),
    #[error("stored block {0} failed verification")]
    Corrupt(ContentId),
    #[error("payload is empty")]
    EmptyPayload,
    #[error("chunk size {0} below the {MIN_CHUNK_SIZE}-byte minimum")]
    ChunkSizeTooSmall(usize),
    #[error("manifest mismatch: {0}")]
    Manifest(&'static str),
    #[error("pin journal: {0}")]
    Journal(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Chunk {
    pub cid: ContentId,
    pub data: Vec<u8>,
}

impl Chunk {
    pub fn new(data: Vec<u8>) -> Self {
        Self {
            cid: content_id(&data),
            data,
        }
    }

    pub fn verify(&self) -> bool {
        content_id(&self.data) == self.cid
    }
}

/// What the fallback path knows about a sealed payload before chunking.
#[derive(Clone, Copy, Debug)]
pub struct ManifestMeta {
    pub sender_public: [u8; KEY_LEN],
    pub recipient: PeerId,
    pub nonce: Nonce,
}

/// Index of the chunks composing one sealed message. Its address (the
/// message cid) is the hash of its canonical encoding.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Manifest {
    pub sender_public: [u8; KEY_LEN],
    pub recipient: PeerId,
    pub nonce: Nonce,
    pub total_len: u64,
    pub chunk_cids: Vec<ContentId>,
}

impl Manifest {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new()
            .raw(MANIFEST_MAGIC)
            .raw(&self.sender_public)
            .raw(self.recipient.as_bytes())
            .raw(&self.nonce)
            .u64(self.total_len)
            .u32(self.chunk_cids.len() as u32);
        for cid in &self.chunk_cids {
            e = e.raw(cid.as_bytes());
        }
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut d = Decoder::new(bytes);
        if d.take(4)? != MANIFEST_MAGIC {
            return Err(StoreError::Manifest("not a manifest block"));
        }
        let sender_public = d.array::<KEY_LEN>()?;
        let recipient = PeerId(d.array()?);
        let nonce = d.array::<NONCE_LEN>()?;
        let total_len = d.u64()?;
        let n = d.u32()? as usize;
        if d.remaining() != n * 32 {
            return Err(StoreError::Manifest("chunk list length"));
        }
        let chunk_cids = (0..n)
            .map(|_| d.array().map(ContentId))
            .collect::<Result<Vec<_>, _>>()?;
        d.finish()?;
        Ok(Self {
            sender_public,
            recipient,
            nonce,
            total_len,
            chunk_cids,
        })
    }

    pub fn message_cid(&self) -> ContentId {
        content_id(&self.encode())
    }

    pub fn to_block(&self) -> Chunk {
        Chunk::new(self.encode())
    }
}

/// Splits a sealed payload into content-addressed chunks.
pub fn chunk_payload(
    payload: &[u8],
    chunk_size: usize,
    meta: ManifestMeta,
) -> Result<(Manifest, Vec<Chunk>), StoreError> {
    if payload.is_empty() {
        return Err(StoreError::EmptyPayload);
    }
    if chunk_size < MIN_CHUNK_SIZE {
        return Err(StoreError::ChunkSizeTooSmall(chunk_size));
    }
    let pieces: Vec<&[u8]> = payload.chunks(chunk_size).collect();
    let chunks = par::map(Strategy::Auto, &pieces, |p| Chunk::new(p.to_vec()));
    let manifest = Manifest {
        sender_public: meta.sender_public,
        recipient: meta.recipient,
        nonce: meta.nonce,
        total_len: payload.len() as u64,
        chunk_cids: chunks.iter().map(|c| c.cid).collect(),
    };
    Ok((manifest, chunks))
}

/// Inverse of [`chunk_payload`]; every chunk is re-hashed against the manifest.
pub fn reassemble(manifest: &Manifest, chunks: &[Chunk]) -> Result<Vec<u8>, StoreError> {
    if chunks.len() != manifest.chunk_cids.len() {
        return Err(StoreError::Manifest("chunk count"));
    }
    let verified = par::map(Strategy::Auto, chunks, |c| content_id(&c.data));
    for ((actual, chunk), expected) in verified.iter().zip(chunks).zip(&manifest.chunk_cids) {
        if actual != expected {
            return Err(StoreError::HashMismatch {
                claimed: *expected,
                actual: *actual,
            });
        }
        debug_assert_eq!(chunk.cid, *expected);
    }
    let total: usize = chunks.iter().map(|c| c.data.len()).sum();
    if total as u64 != manifest.total_len {
        return Err(StoreError::Manifest("total length"));
    }
    let mut out = Vec::with_capacity(total);
    for c in chunks {
        out.extend_from_slice(&c.data);
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PinState {
    Pinned,
    Released,
}

impl PinState {
    fn as_str(self) -> &'static str {
        match self {
            PinState::Pinned => "pinned",
            PinState::Released => "released",
        }
    }
}

/// Origin-side record of where a block was replicated.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PinRecord {
    pub cid: ContentId,
    pub holders: BTreeSet<PeerId>,
    pub created_at: UnixMs,
    pub state: PinState,
    /// Fewer holders acknowledged than requested.
    pub degraded: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Retention {
    pub state: PinState,
    pub since: UnixMs,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub scanned: usize,
    pub corrupt: Vec<ContentId>,
}

enum Backend {
    Memory(RwLock<HashMap<ContentId, Vec<u8>>>),
    Disk { blocks: PathBuf },
}

pub struct BlockStore {
    backend: Backend,
    retention: RwLock<HashMap<ContentId, Retention>>,
    journal: Option<Mutex<File>>,
    pin_ttl: u64,
    clock: Clock,
}

impl std::fmt::Debug for BlockStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockStore")
            .field("blocks", &self.len())
            .field("pin_ttl", &self.pin_ttl)
            .finish()
    }
}

impl BlockStore {
    pub fn memory(clock: Clock) -> Self {
        Self {
            backend: Backend::Memory(RwLock::new(HashMap::new())),
            retention: RwLock::new(HashMap::new()),
            journal: None,
            pin_ttl: DEFAULT_PIN_TTL_MS,
            clock,
        }
    }

    /// Opens (or creates) an on-disk store rooted at `dir`, replaying `pins.log`.
    pub fn open(dir: impl AsRef<Path>, clock: Clock) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        let blocks = dir.join("blocks");
        fs::create_dir_all(&blocks)?;
        let journal_path = dir.join("pins.log");
        let mut retention = HashMap::new();
        if journal_path.exists() {
            for (n, line) in fs::read_to_string(&journal_path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let (cid, r) =
                    parse_journal_line(line).ok_or_else(|| StoreError::Journal(format!("line {}: {line:?}", n + 1)))?;
                match r.state {
                    // a re-pin after release restarts the TTL
                    PinState::Pinned => {
                        retention.insert(cid, r);
                    }
                    PinState::Released => {
                        if let Some(e) = retention.get_mut(&cid) {
                            e.state = PinState::Released;
                        }
                    }
                }
            }
        }
        retention.retain(|cid: &ContentId, _| blocks.join(cid.to_hex()).exists());
        let journal = OpenOptions::new().create(true).append(true).open(&journal_path)?;
        Ok(Self {
            backend: Backend::Disk { blocks },
            retention: RwLock::new(retention),
            journal: Some(Mutex::new(journal)),
            pin_ttl: DEFAULT_PIN_TTL_MS,
            clock,
        })
    }

    pub fn with_pin_ttl(mut self, ttl_ms: u64) -> Self {
        self.pin_ttl = ttl_ms;
        self
    }

    pub fn pin_ttl(&self) -> u64 {
        self.pin_ttl
    }

    fn log(&self, cid: &ContentId, state: PinState, at: UnixMs) -> Result<(), StoreError> {
        if let Some(j) = &self.journal {
            let mut f = j.lock();
            writeln!(f, "{} {} {}", cid.to_hex(), state.as_str(), at)?;
        }
        Ok(())
    }

    fn write_data(&self, cid: &ContentId, data: &[u8]) -> Result<(), StoreError> {
        match &self.backend {
            Backend::Memory(m) => {
                m.write().insert(*cid, data.to_vec());
            }
            Backend::Disk { blocks } => {
                let path = blocks.join(cid.to_hex());
                let tmp = blocks.join(format!(".{}.tmp", cid.to_hex()));
                fs::write(&tmp, data)?;
                fs::rename(tmp, path)?;
            }
        }
        Ok(())
    }

    /// Unverified read of whatever bytes are stored under `cid`.
    pub fn get_raw(&self, cid: &ContentId) -> Option<Vec<u8>> {
        match &self.backend {
            Backend::Memory(m) => m.read().get(cid).cloned(),
            Backend::Disk { blocks } => fs::read(blocks.join(cid.to_hex())).ok(),
        }
    }

    fn remove_data(&self, cid: &ContentId) {
        match &self.backend {
            Backend::Memory(m) => {
                m.write().remove(cid);
            }
            Backend::Disk { blocks } => {
                let _ = fs::remove_file(blocks.join(cid.to_hex()));
            }
        }
    }

    /// Stores a block after checking it hashes to its cid. Storing marks the
    /// block pinned; a block already pinned keeps its original pin time.
    pub fn put_block(&self, chunk: &Chunk) -> Result<ContentId, StoreError> {
        let actual = content_id(&chunk.data);
        if actual != chunk.cid {
            return Err(StoreError::HashMismatch {
                claimed: chunk.cid,
                actual,
            });
        }
        let now = self.clock.now_ms();
        let mut ret = self.retention.write();
        let fresh = !matches!(ret.get(&chunk.cid), Some(r) if r.state == PinState::Pinned);
        if fresh || self.get_raw(&chunk.cid).as_deref() != Some(&chunk.data[..]) {
            self.write_data(&chunk.cid, &chunk.data)?;
        }
        if fresh {
            ret.insert(
                chunk.cid,
                Retention {
                    state: PinState::Pinned,
                    since: now,
                },
            );
            self.log(&chunk.cid, PinState::Pinned, now)?;
        }
        Ok(chunk.cid)
    }

    pub fn put_data(&self, data: Vec<u8>) -> Result<ContentId, StoreError> {
        self.put_block(&Chunk::new(data))
    }

    /// Returns the block only if its bytes still hash to `cid`.
    pub fn get_block(&self, cid: &ContentId) -> Result<Chunk, StoreError> {
        if !self.retention.read().contains_key(cid) {
            return Err(StoreError::NotFound(*cid));
        }
        let data = self.get_raw(cid).ok_or(StoreError::NotFound(*cid))?;
        if content_id(&data) != *cid {
            return Err(StoreError::Corrupt(*cid));
        }
        Ok(Chunk { cid: *cid, data })
    }

    pub fn contains(&self, cid: &ContentId) -> bool {
        self.retention.read().contains_key(cid)
    }

    pub fn retention(&self, cid: &ContentId) -> Option<Retention> {
        self.retention.read().get(cid).copied()
    }

    /// Marks a block released; returns false if the block is unknown or
    /// already released.
    pub fn release(&self, cid: &ContentId) -> Result<bool, StoreError> {
        let mut ret = self.retention.write();
        match ret.get_mut(cid) {
            Some(r) if r.state == PinState::Pinned => {
                r.state = PinState::Released;
                let now = self.clock.now_ms();
                drop(ret);
                self.log(cid, PinState::Released, now)?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    /// Removes released blocks and blocks pinned longer than the TTL.
    pub fn gc(&self, now: UnixMs) -> usize {
        let mut ret = self.retention.write();
        let doomed: Vec<ContentId> = ret
            .iter()
            .filter(|(_, r)| r.state == PinState::Released || now.saturating_sub(r.since) > self.pin_ttl)
            .map(|(cid, _)| *cid)
            .collect();
        for cid in &doomed {
            ret.remove(cid);
            self.remove_data(cid);
        }
        doomed.len()
    }

    pub fn cids(&self) -> Vec<ContentId> {
        let mut v: Vec<_> = self.retention.read().keys().copied().collect();
        v.sort();
        v
    }

    pub fn len(&self) -> usize {
        self.retention.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every stored block with its raw bytes, sorted by cid.
    pub fn raw_blocks(&self) -> Vec<(ContentId, Vec<u8>)> {
        self.cids()
            .into_iter()
            .filter_map(|cid| self.get_raw(&cid).map(|d| (cid, d)))
            .collect()
    }

    /// Full scan: re-hashes every block and lists the ones that no longer
    /// match their key.
    pub fn audit(&self, strategy: Strategy) -> AuditReport {
        let cids = self.cids();
        let bad = par::map(strategy, &cids, |cid| match self.get_raw(cid) {
            Some(d) => content_id(&d) != *cid,
            None => true,
        });
        AuditReport {
            scanned: cids.len(),
            corrupt: cids.into_iter().zip(bad).filter_map(|(c, b)| b.then_some(c)).collect(),
        }
    }

    /// Fault injection: flips one byte of a stored block in place, bypassing
    /// verification. Returns false when the block is absent or empty.
    #[doc(hidden)]
    pub fn corrupt_byte(&self, cid: &ContentId, offset: usize, mask: u8) -> bool {
        let Some(mut data) = self.get_raw(cid) else {
            return false;
        };
        if data.is_empty() {
            return false;
        }
        let i = offset % data.len();
        data[i] ^= mask.max(1);
        self.write_data(cid, &data).is_ok()
    }

    /// Fault injection: puts back the original bytes of a block.
    #[doc(hidden)]
    pub fn restore_raw(&self, cid: &ContentId, data: &[u8]) -> bool {
        self.contains(cid) && self.write_data(cid, data).is_ok()
    }
}

fn parse_journal_line(line: &str) -> Option<(ContentId, Retention)> {
    let mut parts = line.split_whitespace();
    let cid: ContentId = parts.next()?.parse().ok()?;
    let state = match parts.next()? {
        "pinned" => PinState::Pinned,
        "released" => PinState::Released,
        _ => return None,
    };
    let since = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((cid, Retention { state, since }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> ManifestMeta {
        ManifestMeta {
            sender_public: [1; 32],
            recipient: PeerId([2; 32]),
            nonce: [3; 24],
        }
    }

    #[test]
    fn small_payload_is_one_chunk() {
        let (m, chunks) = chunk_payload(&[7u8; 100], DEFAULT_CHUNK_SIZE, meta()).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].data.len(), 100);
        assert_eq!(m.total_len, 100);
    }

    #[test]
    fn chunk_sizes_follow_ceiling_division() {
        // ceil(153600 / 65536) = 3; remainder 153600 - 2*65536 = 22528
        let payload = vec![9u8; 153_600];
        let (m, chunks) = chunk_payload(&payload, 65_536, meta()).unwrap();
        let sizes: Vec<_> = chunks.iter().map(|c| c.data.len()).collect();
        assert_eq!(sizes, vec![65_536, 65_536, 22_528]);
        assert_eq!(m.chunk_cids.len(), 3);
        assert_eq!(reassemble(&m, &chunks).unwrap(), payload);
    }

    #[test]
    fn chunking_preconditions() {
        assert!(matches!(
            chunk_payload(&[], DEFAULT_CHUNK_SIZE, meta()),
            Err(StoreError::EmptyPayload)
        ));
        assert!(matches!(
            chunk_payload(&[1], 1023, meta()),
            Err(StoreError::ChunkSizeTooSmall(1023))
        ));
    }

    #[test]
    fn manifest_round_trip_and_address() {
        let (m, _) = chunk_payload(&[5u8; 5000], 1024, meta()).unwrap();
        let enc = m.encode();
        assert_eq!(Manifest::decode(&enc).unwrap(), m);
        assert_eq!(m.message_cid(), content_id(&enc));
        assert_eq!(m.to_block().cid, m.message_cid());
        assert!(Manifest::decode(&enc[..enc.len() - 1]).is_err());
        assert!(Manifest::decode(b"not a manifest at all").is_err());
    }

    #[test]
    fn reassemble_rejects_swapped_or_tampered_chunks() {
        let payload: Vec<u8> = (0..4096u32).map(|i| (i % 251) as u8).collect();
        let (m, mut chunks) = chunk_payload(&payload, 1024, meta()).unwrap();
        chunks.swap(0, 1);
        assert!(reassemble(&m, &chunks).is_err());
        chunks.swap(0, 1);
        chunks[2].data[5] ^= 1;
        assert!(matches!(reassemble(&m, &chunks), Err(StoreError::HashMismatch { .. })));
    }

    #[test]
    fn put_get_and_self_validation() {
        let store = BlockStore::memory(Clock::manual(0));
        let c = Chunk::new(b"hello block".to_vec());
        assert_eq!(store.put_block(&c).unwrap(), c.cid);
        assert_eq!(store.get_block(&c.cid).unwrap(), c);

        let forged = Chunk {
            cid: content_id(b"other"),
            data: b"hello block".to_vec(),
        };
        assert!(matches!(store.put_block(&forged), Err(StoreError::HashMismatch { .. })));
        assert!(matches!(
            store.get_block(&content_id(b"missing")),
            Err(StoreError::NotFound(_))
        ));

        assert!(store.corrupt_byte(&c.cid, 3, 0x40));
        assert!(matches!(store.get_block(&c.cid), Err(StoreError::Corrupt(_))));
        assert_eq!(store.audit(crate::par::Strategy::Auto).corrupt, vec![c.cid]);
        assert!(store.restore_raw(&c.cid, &c.data));
        assert!(store.audit(crate::par::Strategy::Sequential).corrupt.is_empty());
    }

    #[test]
    fn gc_rules() {
        let clock = Clock::manual(1_000);
        let store = BlockStore::memory(clock.clone());
        let a = store.put_data(b"a".to_vec()).unwrap();
        let b = store.put_data(b"b".to_vec()).unwrap();
        assert_eq!(store.gc(clock.now_ms()), 0);

        assert!(store.release(&a).unwrap());
        assert!(!store.release(&a).unwrap());
        assert_eq!(store.gc(clock.now_ms()), 1);
        assert!(!store.contains(&a));

        // TTL boundary: exactly ttl old is kept, ttl + 1 ms is removed
        let ttl = store.pin_ttl();
        assert_eq!(store.gc(1_000 + ttl), 0);
        assert_eq!(store.gc(1_000 + ttl + 1), 1);
        assert!(!store.contains(&b));
    }

    #[test]
    fn disk_layout_and_journal_replay() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Clock::manual(5_000);
        let (a, b);
        {
            let store = BlockStore::open(dir.path(), clock.clone()).unwrap();
            a = store.put_data(b"first block".to_vec()).unwrap();
            b = store.put_data(b"second block".to_vec()).unwrap();
            store.release(&b).unwrap();
            assert!(dir.path().join("blocks").join(a.to_hex()).exists());
        }
        let journal = fs::read_to_string(dir.path().join("pins.log")).unwrap();
        let lines: Vec<_> = journal.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], format!("{} pinned 5000", a.to_hex()));
        assert_eq!(lines[2], format!("{} released 5000", b.to_hex()));

        let store = BlockStore::open(dir.path(), clock.clone()).unwrap();
        assert_eq!(store.get_block(&a).unwrap().data, b"first block");
        assert_eq!(store.retention(&b).unwrap().state, PinState::Released);
        assert_eq!(store.gc(clock.now_ms()), 1);
        assert!(!dir.path().join("blocks").join(b.to_hex()).exists());
    }

    #[test]
    fn corrupt_journal_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("pins.log"), "zz pinned 1\n").unwrap();
        assert!(matches!(
            BlockStore::open(dir.path(), Clock::manual(0)),
            Err(StoreError::Journal(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn reassemble_inverts_chunking(len in 1usize..(1 << 20), chunk in 1024usize..200_000, seed in any::<u8>()) {
            let payload: Vec<u8> = (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let (m, chunks) = chunk_payload(&payload, chunk, meta()).unwrap();
            prop_assert_eq!(chunks.len(), len.div_ceil(chunk));
            prop_assert!(chunks.iter().all(|c| c.data.len() <= chunk));
            prop_assert_eq!(reassemble(&m, &chunks).unwrap(), payload);
        }
    }
}
