//! Kademlia-style DHT over the 256-bit peer id / content id keyspace.
//!
//! The pure pieces (metric, routing table, records, lookup state machine) live
//! in submodules and are driven over the network by [`service::Dht`].

use std::fmt;
use std::net::SocketAddr;

use thiserror::Error;

use crate::clock::UnixMs;
use crate::crypto::{CryptoError, PeerId};
use crate::wire::{Decoder, Encoder, WireError};

pub mod lookup;
pub mod record;
pub mod routing;
pub mod service;

pub use lookup::Lookup;
pub use record::{DhtRecord, RecordKind, RecordStore};
pub use routing::{InsertOutcome, RoutingTable};
pub use service::{Dht, DhtConfig};

pub type Key = [u8; 32];

pub const K: usize = 20;
pub const ALPHA: usize = 3;
pub const RECORD_TTL_MS: u64 = 24 * 60 * 60 * 1000;
pub const REPUBLISH_INTERVAL_MS: u64 = 60 * 60 * 1000;
pub const MAX_RECORD_VALUE: usize = 4096;

#[derive(Debug, Error)]
pub enum DhtError {
    #[error("keys must both be 32 bytes (got {0} and {1})")]
    LengthMismatch(usize, usize),
    #[error("record value of {0} bytes exceeds {MAX_RECORD_VALUE}")]
    ValueTooLarge(usize),
    #[error("record signature does not verify")]
    InvalidSignature,
    #[error("record expired")]
    Expired,
    #[error("no bootstrap seed reachable")]
    SeedsUnreachable,
    #[error("malformed endpoint {0:?}")]
    BadEndpoint(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// XOR distance, compared as a big-endian 256-bit integer.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Distance(pub [u8; 32]);

impl Distance {
    /// `floor(log2(d))`, i.e. the routing bucket; `None` for distance zero.
    pub fn bucket_index(&self) -> Option<usize> {
        self.0
            .iter()
            .position(|b| *b != 0)
            .map(|i| (31 - i) * 8 + (7 - self.0[i].leading_zeros() as usize))
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|b| *b == 0)
    }
}

impl fmt::Debug for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Distance({})", hex::encode(self.0))
    }
}

pub fn xor_distance(a: &Key, b: &Key) -> Distance {
    Distance(std::array::from_fn(|i| a[i] ^ b[i]))
}

pub fn xor_distance_slices(a: &[u8], b: &[u8]) -> Result<Distance, DhtError> {
    let (Ok(a), Ok(b)) = (<&Key>::try_from(a), <&Key>::try_from(b)) else {
        return Err(DhtError::LengthMismatch(a.len(), b.len()));
    };
    Ok(xor_distance(a, b))
}

/// The `k` ids closest to `target`, by exhaustive sort.
pub fn brute_force_closest(ids: &[PeerId], target: &Key, k: usize) -> Vec<PeerId> {
    let mut v = ids.to_vec();
    v.sort_by_key(|id| xor_distance(id.as_bytes(), target));
    v.truncate(k);
    v
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct NodeInfo {
    pub peer_id: PeerId,
    pub endpoint: SocketAddr,
    pub last_seen: UnixMs,
}

impl NodeInfo {
    pub fn new(peer_id: PeerId, endpoint: SocketAddr) -> Self {
        Self {
            peer_id,
            endpoint,
            last_seen: 0,
        }
    }

    pub fn encode_into(&self, e: Encoder) -> Encoder {
        e.raw(self.peer_id.as_bytes())
            .str(&self.endpoint.to_string())
            .u64(self.last_seen)
    }

    pub fn encode(&self) -> Vec<u8> {
        self.encode_into(Encoder::new()).finish()
    }

    pub fn decode_from(d: &mut Decoder<'_>) -> Result<Self, DhtError> {
        let peer_id = PeerId(d.array()?);
        let ep = d.string()?;
        let endpoint = ep.parse().map_err(|_| DhtError::BadEndpoint(ep))?;
        Ok(Self {
            peer_id,
            endpoint,
            last_seen: d.u64()?,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DhtError> {
        let mut d = Decoder::new(bytes);
        let n = Self::decode_from(&mut d)?;
        d.finish()?;
        Ok(n)
    }
}

pub fn encode_nodes(e: Encoder, nodes: &[NodeInfo]) -> Encoder {
    nodes.iter().fold(e.u32(nodes.len() as u32), |e, n| n.encode_into(e))
}

pub fn decode_nodes(d: &mut Decoder<'_>) -> Result<Vec<NodeInfo>, DhtError> {
    let n = d.u32()? as usize;
    if n > 4 * K {
        return Err(WireError::Invalid("node list too long").into());
    }
    (0..n).map(|_| NodeInfo::decode_from(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn id_with_last(b: u8) -> Key {
        let mut k = [0u8; 32];
        k[31] = b;
        k
    }

    #[test]
    fn distance_examples() {
        let a = id_with_last(1);
        let b = id_with_last(3);
        assert_eq!(xor_distance(&a, &b), Distance(id_with_last(2)));
        assert!(xor_distance(&a, &a).is_zero());
        assert_eq!(xor_distance(&a, &b), xor_distance(&b, &a));
        assert!(matches!(
            xor_distance_slices(&a, &b[..31]),
            Err(DhtError::LengthMismatch(32, 31))
        ));
    }

    #[test]
    fn bucket_index_is_floor_log2() {
        assert_eq!(Distance(id_with_last(1)).bucket_index(), Some(0));
        assert_eq!(Distance(id_with_last(2)).bucket_index(), Some(1));
        assert_eq!(Distance(id_with_last(3)).bucket_index(), Some(1));
        assert_eq!(Distance(id_with_last(0x80)).bucket_index(), Some(7));
        let mut top = [0u8; 32];
        top[0] = 0x80;
        assert_eq!(Distance(top).bucket_index(), Some(255));
        assert_eq!(Distance::default().bucket_index(), None);
    }

    #[test]
    fn node_info_round_trip() {
        let n = NodeInfo {
            peer_id: PeerId([4; 32]),
            endpoint: "127.0.0.1:4040".parse().unwrap(),
            last_seen: 99,
        };
        assert_eq!(NodeInfo::decode(&n.encode()).unwrap(), n);
        let bad = Encoder::new().raw(&[0; 32]).str("nohost").u64(0).finish();
        assert!(matches!(NodeInfo::decode(&bad), Err(DhtError::BadEndpoint(_))));
    }

    proptest! {
        #[test]
        fn ordering_matches_big_endian_integer(a in any::<[u8; 32]>(), b in any::<[u8; 32]>(), t in any::<[u8; 32]>()) {
            let da = xor_distance(&a, &t);
            let db = xor_distance(&b, &t);
            // compare as two u128 halves
            let hi = |d: &Distance| u128::from_be_bytes(d.0[..16].try_into().unwrap());
            let lo = |d: &Distance| u128::from_be_bytes(d.0[16..].try_into().unwrap());
            prop_assert_eq!(da.cmp(&db), (hi(&da), lo(&da)).cmp(&(hi(&db), lo(&db))));
            // floor(log2) bounds: 2^i <= d < 2^(i+1)
            if let Some(i) = da.bucket_index() {
                let byte = 31 - i / 8;
                prop_assert!(da.0[byte] >> (i % 8) == 1);
                prop_assert!(da.0[..byte].iter().all(|x| *x == 0));
            }
        }
    }
}
