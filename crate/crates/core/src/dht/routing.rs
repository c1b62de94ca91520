use std::collections::VecDeque;

use super::{xor_distance, Key, NodeInfo, K};
use crate::crypto::PeerId;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    /// Already known; endpoint and last-seen updated, moved to most-recent.
    Refreshed,
    SelfEntry,
    /// Bucket is full. The caller should ping `least_recent` and either
    /// [`RoutingTable::touch`] it (alive) or [`RoutingTable::replace`] it.
    Full {
        least_recent: NodeInfo,
    },
}

/// 256 buckets of at most `k` entries; bucket `i` holds peers at distance
/// `[2^i, 2^(i+1))`. Within a bucket, least-recently-seen entries come first.
#[derive(Clone, Debug)]
pub struct RoutingTable {
    self_id: PeerId,
    k: usize,
    buckets: Vec<VecDeque<NodeInfo>>,
}

impl RoutingTable {
    pub fn new(self_id: PeerId) -> Self {
        Self::with_k(self_id, K)
    }

    pub fn with_k(self_id: PeerId, k: usize) -> Self {
        assert!(k > 0);
        Self {
            self_id,
            k,
            buckets: vec![VecDeque::new(); 256],
        }
    }

    pub fn self_id(&self) -> PeerId {
        self.self_id
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bucket_of(&self, peer: &PeerId) -> Option<usize> {
        xor_distance(self.self_id.as_bytes(), peer.as_bytes()).bucket_index()
    }

    pub fn insert(&mut self, node: NodeInfo) -> InsertOutcome {
        let Some(b) = self.bucket_of(&node.peer_id) else {
            return InsertOutcome::SelfEntry;
        };
        let k = self.k;
        let bucket = &mut self.buckets[b];
        if let Some(pos) = bucket.iter().position(|n| n.peer_id == node.peer_id) {
            let mut existing = bucket.remove(pos).unwrap();
            existing.endpoint = node.endpoint;
            existing.last_seen = existing.last_seen.max(node.last_seen);
            bucket.push_back(existing);
            return InsertOutcome::Refreshed;
        }
        if bucket.len() < k {
            bucket.push_back(node);
            InsertOutcome::Inserted
        } else {
            InsertOutcome::Full {
                least_recent: bucket.front().cloned().unwrap(),
            }
        }
    }

    /// Marks a peer as just seen (moves it to the tail of its bucket).
    pub fn touch(&mut self, peer: &PeerId, now: u64) -> bool {
        let Some(b) = self.bucket_of(peer) else {
            return false;
        };
        let bucket = &mut self.buckets[b];
        match bucket.iter().position(|n| &n.peer_id == peer) {
            Some(pos) => {
                let mut n = bucket.remove(pos).unwrap();
                n.last_seen = n.last_seen.max(now);
                bucket.push_back(n);
                true
            }
            None => false,
        }
    }

    /// Evicts `stale` (which failed its liveness ping) in favour of `node`.
    pub fn replace(&mut self, stale: &PeerId, node: NodeInfo) -> bool {
        let (Some(bs), Some(bn)) = (self.bucket_of(stale), self.bucket_of(&node.peer_id)) else {
            return false;
        };
        if bs != bn {
            return false;
        }
        let bucket = &mut self.buckets[bs];
        let Some(pos) = bucket.iter().position(|n| &n.peer_id == stale) else {
            return false;
        };
        if bucket.iter().any(|n| n.peer_id == node.peer_id) {
            bucket.remove(pos);
            return true;
        }
        bucket.remove(pos);
        bucket.push_back(node);
        true
    }

    pub fn remove(&mut self, peer: &PeerId) -> Option<NodeInfo> {
        let b = self.bucket_of(peer)?;
        let bucket = &mut self.buckets[b];
        let pos = bucket.iter().position(|n| &n.peer_id == peer)?;
        bucket.remove(pos)
    }

    pub fn get(&self, peer: &PeerId) -> Option<&NodeInfo> {
        let b = self.bucket_of(peer)?;
        self.buckets[b].iter().find(|n| &n.peer_id == peer)
    }

    pub fn contains(&self, peer: &PeerId) -> bool {
        self.get(peer).is_some()
    }

    pub fn closest(&self, target: &Key, n: usize) -> Vec<NodeInfo> {
        let mut all = self.all();
        all.sort_by_key(|x| xor_distance(x.peer_id.as_bytes(), target));
        all.truncate(n);
        all
    }

    pub fn all(&self) -> Vec<NodeInfo> {
        self.buckets.iter().flatten().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bucket(&self, i: usize) -> &VecDeque<NodeInfo> {
        &self.buckets[i]
    }

    /// Indices of non-empty buckets, farthest first.
    pub fn occupied_buckets(&self) -> Vec<usize> {
        (0..256).rev().filter(|i| !self.buckets[*i].is_empty()).collect()
    }

    /// Placement, capacity and uniqueness invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = std::collections::HashSet::new();
        for (i, bucket) in self.buckets.iter().enumerate() {
            if bucket.len() > self.k {
                return Err(format!("bucket {i} holds {} > k", bucket.len()));
            }
            for n in bucket {
                if self.bucket_of(&n.peer_id) != Some(i) {
                    return Err(format!("{:?} misplaced in bucket {i}", n.peer_id));
                }
                if !seen.insert(n.peer_id) {
                    return Err(format!("duplicate {:?}", n.peer_id));
                }
            }
        }
        Ok(())
    }
}

/// A random key whose distance from `self_id` falls in bucket `i`.
pub fn random_key_in_bucket(self_id: &PeerId, i: usize) -> Key {
    use rand::RngCore;
    let mut d = [0u8; 32];
    rand::rng().fill_bytes(&mut d);
    let byte = 31 - i / 8;
    let bit = i % 8;
    for b in d.iter_mut().take(byte) {
        *b = 0;
    }
    d[byte] = (d[byte] & ((1u8 << bit) - 1)) | (1u8 << bit);
    std::array::from_fn(|j| d[j] ^ self_id.0[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn node(id: [u8; 32], port: u16) -> NodeInfo {
        NodeInfo::new(PeerId(id), format!("127.0.0.1:{port}").parse().unwrap())
    }

    fn id_last(b: u8) -> [u8; 32] {
        let mut k = [0u8; 32];
        k[31] = b;
        k
    }

    #[test]
    fn self_is_never_stored() {
        let mut t = RoutingTable::new(PeerId([0; 32]));
        assert_eq!(t.insert(node([0; 32], 1)), InsertOutcome::SelfEntry);
        assert!(t.is_empty());
    }

    #[test]
    fn full_bucket_reports_least_recent_and_keeps_live_nodes() {
        let mut t = RoutingTable::with_k(PeerId([0; 32]), 2);
        // 0x80..0xff all land in bucket 7
        assert_eq!(t.insert(node(id_last(0x80), 1)), InsertOutcome::Inserted);
        assert_eq!(t.insert(node(id_last(0x81), 2)), InsertOutcome::Inserted);
        let out = t.insert(node(id_last(0x82), 3));
        let InsertOutcome::Full { least_recent } = out else {
            panic!("expected full bucket")
        };
        assert_eq!(least_recent.peer_id, PeerId(id_last(0x80)));

        // ping answered: the live node is kept and becomes most recent
        assert!(t.touch(&least_recent.peer_id, 10));
        assert!(!t.contains(&PeerId(id_last(0x82))));
        let order: Vec<_> = t.bucket(7).iter().map(|n| n.peer_id.0[31]).collect();
        assert_eq!(order, vec![0x81, 0x80]);

        // ping failed: the stale node gives way
        assert!(t.replace(&PeerId(id_last(0x81)), node(id_last(0x82), 3)));
        assert!(t.contains(&PeerId(id_last(0x82))));
        assert!(!t.contains(&PeerId(id_last(0x81))));
        t.check_invariants().unwrap();
    }

    #[test]
    fn refresh_updates_endpoint_and_keeps_last_seen_monotone() {
        let mut t = RoutingTable::new(PeerId([0; 32]));
        let mut n = node(id_last(9), 1);
        n.last_seen = 50;
        t.insert(n.clone());
        n.last_seen = 20;
        n.endpoint = "127.0.0.1:2".parse().unwrap();
        assert_eq!(t.insert(n), InsertOutcome::Refreshed);
        let got = t.get(&PeerId(id_last(9))).unwrap();
        assert_eq!(got.last_seen, 50);
        assert_eq!(got.endpoint.port(), 2);
    }

    #[test]
    fn closest_is_sorted_by_distance() {
        let mut t = RoutingTable::new(PeerId([0xff; 32]));
        for b in 1..=40u8 {
            t.insert(node(id_last(b), b as u16));
        }
        let got: Vec<u8> = t.closest(&id_last(8), 3).iter().map(|n| n.peer_id.0[31]).collect();
        assert_eq!(got, vec![8, 9, 10]);
    }

    #[test]
    fn random_key_lands_in_requested_bucket() {
        let me = PeerId([0x5a; 32]);
        for i in [0usize, 1, 7, 8, 100, 254, 255] {
            let k = random_key_in_bucket(&me, i);
            assert_eq!(xor_distance(me.as_bytes(), &k).bucket_index(), Some(i));
        }
    }

    proptest! {
        #[test]
        fn invariants_hold_under_random_inserts(me in any::<[u8; 32]>(), ids in prop::collection::vec(any::<[u8; 32]>(), 0..300), k in 1usize..8) {
            let mut t = RoutingTable::with_k(PeerId(me), k);
            for (i, id) in ids.iter().enumerate() {
                if let InsertOutcome::Full { least_recent } = t.insert(node(*id, i as u16)) {
                    if i % 2 == 0 {
                        t.touch(&least_recent.peer_id, i as u64);
                    } else {
                        t.replace(&least_recent.peer_id, node(*id, i as u16));
                    }
                }
                prop_assert!(t.check_invariants().is_ok());
            }
            for n in t.all() {
                let d = xor_distance(&me, n.peer_id.as_bytes());
                prop_assert_eq!(t.bucket_of(&n.peer_id), d.bucket_index());
            }
        }
    }
}
