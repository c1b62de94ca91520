use std::collections::{BTreeMap, HashMap};

use super::{DhtError, Key, NodeInfo, MAX_RECORD_VALUE};
use crate::clock::UnixMs;
use crate::crypto::{PeerId, PeerIdentity, PublicKeys, Signature};
use crate::wire::{Decoder, Encoder, WireError};

const RECORD_TAG: &[u8] = b"fybrr/dht/record/v1";

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub enum RecordKind {
    /// "I hold this block"; value is the holder's [`NodeInfo`].
    Provider,
    /// A page of a recipient's message queue.
    QueueHead,
}

impl RecordKind {
    pub fn to_u8(self) -> u8 {
        match self {
            RecordKind::Provider => 1,
            RecordKind::QueueHead => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self, WireError> {
        match v {
            1 => Ok(RecordKind::Provider),
            2 => Ok(RecordKind::QueueHead),
            _ => Err(WireError::Invalid("record kind")),
        }
    }
}

/// A small signed value stored at the nodes closest to `key`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DhtRecord {
    pub key: Key,
    pub kind: RecordKind,
    pub value: Vec<u8>,
    pub publisher: PeerId,
    pub publisher_keys: PublicKeys,
    pub expires_at: UnixMs,
    pub signature: Signature,
}

impl DhtRecord {
    pub fn new_signed(
        identity: &PeerIdentity,
        key: Key,
        kind: RecordKind,
        value: Vec<u8>,
        expires_at: UnixMs,
    ) -> Result<Self, DhtError> {
        if value.len() > MAX_RECORD_VALUE {
            return Err(DhtError::ValueTooLarge(value.len()));
        }
        let mut r = Self {
            key,
            kind,
            value,
            publisher: identity.peer_id(),
            publisher_keys: identity.public_keys(),
            expires_at,
            signature: [0; 64],
        };
        r.signature = identity.sign(&r.signing_bytes());
        Ok(r)
    }

    /// Provider record announcing that `holder` stores the block `cid`.
    pub fn provider(
        identity: &PeerIdentity,
        cid: Key,
        holder: &NodeInfo,
        expires_at: UnixMs,
    ) -> Result<Self, DhtError> {
        let mut info = holder.clone();
        info.last_seen = 0;
        Self::new_signed(identity, cid, RecordKind::Provider, info.encode(), expires_at)
    }

    pub fn provider_info(&self) -> Option<NodeInfo> {
        if self.kind != RecordKind::Provider {
            return None;
        }
        NodeInfo::decode(&self.value)
            .ok()
            .filter(|n| n.peer_id == self.publisher)
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        Encoder::new()
            .raw(RECORD_TAG)
            .raw(&self.key)
            .u8(self.kind.to_u8())
            .var(&self.value)
            .raw(self.publisher.as_bytes())
            .raw(&self.publisher_keys.encode())
            .u64(self.expires_at)
            .finish()
    }

    pub fn verify(&self) -> bool {
        self.value.len() <= MAX_RECORD_VALUE
            && self.publisher_keys.verify_binding(&self.publisher).is_ok()
            && self.publisher_keys.verify(&self.signing_bytes(), &self.signature)
    }

    pub fn is_expired(&self, now: UnixMs) -> bool {
        now >= self.expires_at
    }

    pub fn encode_into(&self, e: Encoder) -> Encoder {
        e.raw(&self.key)
            .u8(self.kind.to_u8())
            .var(&self.value)
            .raw(self.publisher.as_bytes())
            .raw(&self.publisher_keys.encode())
            .u64(self.expires_at)
            .raw(&self.signature)
    }

    pub fn encode(&self) -> Vec<u8> {
        self.encode_into(Encoder::new()).finish()
    }

    pub fn decode_from(d: &mut Decoder<'_>) -> Result<Self, DhtError> {
        let key = d.array()?;
        let kind = RecordKind::from_u8(d.u8()?)?;
        let value = d.var()?;
        if value.len() > MAX_RECORD_VALUE {
            return Err(DhtError::ValueTooLarge(value.len()));
        }
        Ok(Self {
            key,
            kind,
            value: value.to_vec(),
            publisher: PeerId(d.array()?),
            publisher_keys: PublicKeys::decode(d.take(PublicKeys::ENCODED_LEN)?)?,
            expires_at: d.u64()?,
            signature: d.array()?,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DhtError> {
        let mut d = Decoder::new(bytes);
        let r = Self::decode_from(&mut d)?;
        d.finish()?;
        Ok(r)
    }
}

pub fn encode_records(e: Encoder, records: &[DhtRecord]) -> Encoder {
    records
        .iter()
        .fold(e.u32(records.len() as u32), |e, r| r.encode_into(e))
}

pub fn decode_records(d: &mut Decoder<'_>) -> Result<Vec<DhtRecord>, DhtError> {
    let n = d.u32()? as usize;
    if n > 1024 {
        return Err(WireError::Invalid("record list too long").into());
    }
    (0..n).map(|_| DhtRecord::decode_from(d)).collect()
}

/// Records held by this node, at most one per (key, kind, publisher).
#[derive(Debug, Default)]
pub struct RecordStore {
    map: HashMap<(Key, RecordKind), BTreeMap<PeerId, DhtRecord>>,
}

impl RecordStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Verifies and stores. Provider records replace an older record from the
    /// same publisher when they expire no earlier; queue-head records only when
    /// they expire strictly later. Returns whether the store changed.
    pub fn put(&mut self, record: DhtRecord, now: UnixMs) -> Result<bool, DhtError> {
        if !record.verify() {
            return Err(DhtError::InvalidSignature);
        }
        if record.is_expired(now) {
            return Err(DhtError::Expired);
        }
        let slot = self.map.entry((record.key, record.kind)).or_default();
        match slot.get(&record.publisher) {
            Some(old) if old == &record => Ok(false),
            Some(old) => {
                let newer = match record.kind {
                    RecordKind::Provider => record.expires_at >= old.expires_at,
                    RecordKind::QueueHead => record.expires_at > old.expires_at,
                };
                if newer {
                    slot.insert(record.publisher, record);
                }
                Ok(newer)
            }
            None => {
                slot.insert(record.publisher, record);
                Ok(true)
            }
        }
    }

    pub fn get(&self, key: &Key, kind: RecordKind, now: UnixMs) -> Vec<DhtRecord> {
        self.map
            .get(&(*key, kind))
            .map(|m| m.values().filter(|r| !r.is_expired(now)).cloned().collect())
            .unwrap_or_default()
    }

    pub fn remove_publisher(&mut self, key: &Key, kind: RecordKind, publisher: &PeerId) -> bool {
        self.map
            .get_mut(&(*key, kind))
            .and_then(|m| m.remove(publisher))
            .is_some()
    }

    pub fn sweep(&mut self, now: UnixMs) -> usize {
        let mut removed = 0;
        self.map.retain(|_, m| {
            let before = m.len();
            m.retain(|_, r| !r.is_expired(now));
            removed += before - m.len();
            !m.is_empty()
        });
        removed
    }

    pub fn live(&self, now: UnixMs) -> Vec<DhtRecord> {
        self.map
            .values()
            .flat_map(|m| m.values())
            .filter(|r| !r.is_expired(now))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.map.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
