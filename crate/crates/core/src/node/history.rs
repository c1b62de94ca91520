//! Message envelope, the owner-only local history log, and the contact book.
//!
//! History is an append-only file with one record per line; each record is
//! sealed to the owner's own key pair, so the file on disk reveals only
//! record sizes.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::clock::UnixMs;
use crate::crypto::{open, random_nonce, seal, PeerId, PeerIdentity, PublicKeys, SealedBox};
use crate::wire::{Decoder, Encoder, WireError};

pub type MsgId = [u8; 16];

/// Plaintext carried by both delivery paths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub msg_id: MsgId,
    pub created_at: UnixMs,
    /// Set when the payload is a file.
    pub filename: Option<String>,
    pub body: Vec<u8>,
}

impl Envelope {
    pub fn encode(&self) -> Vec<u8> {
        let e = Encoder::new().raw(&self.msg_id).u64(self.created_at);
        let e = match &self.filename {
            Some(f) => e.bool(true).str(f),
            None => e.bool(false),
        };
        e.raw(&self.body).finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut d = Decoder::new(bytes);
        let msg_id = d.array()?;
        let created_at = d.u64()?;
        let filename = if d.bool()? { Some(d.string()?) } else { None };
        Ok(Self {
            msg_id,
            created_at,
            filename,
            body: d.rest().to_vec(),
        })
    }
}

/// One history record, as sealed on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// `"in"` or `"out"`.
    pub direction: String,
    pub msg_id: String,
    pub peer: String,
    pub at: UnixMs,
    /// `direct` / `dmq` for inbound; the final state for outbound.
    pub detail: String,
    pub filename: Option<String>,
    /// Hex of the message body.
    pub body: String,
}

pub struct History {
    identity: PeerIdentity,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for History {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("History").field("path", &self.path).finish()
    }
}

impl History {
    pub fn memory(identity: PeerIdentity) -> Self {
        Self {
            identity,
            file: None,
            path: None,
        }
    }

    /// Opens (creating) the log and returns every readable record. Lines
    /// that fail to open are skipped: a torn final write loses one record.
    pub fn open(path: impl AsRef<Path>, identity: PeerIdentity) -> std::io::Result<(Self, Vec<HistoryRecord>)> {
        let path = path.as_ref().to_path_buf();
        let mut records = Vec::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if let Some(r) = Self::unseal(&identity, line.trim()) {
                    records.push(r);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok((
            Self {
                identity,
                file: Some(Mutex::new(file)),
                path: Some(path),
            },
            records,
        ))
    }

    fn unseal(identity: &PeerIdentity, line: &str) -> Option<HistoryRecord> {
        let bytes = hex::decode(line).ok()?;
        let sealed = SealedBox::decode(&bytes).ok()?;
        let plain = open(&sealed, identity, identity.enc_public()).ok()?;
        serde_json::from_slice(&plain).ok()
    }

    pub fn append(&self, record: &HistoryRecord) -> std::io::Result<()> {
        let Some(f) = &self.file else { return Ok(()) };
        let plain = serde_json::to_vec(record).map_err(std::io::Error::other)?;
        let sealed = seal(&plain, &self.identity, self.identity.enc_public(), random_nonce())
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let mut f = f.lock();
        writeln!(f, "{}", hex::encode(sealed.encode()))?;
        f.flush()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contact {
    pub name: String,
    /// Hex of the 64-byte public keys, once known.
    pub keys: Option<String>,
}

/// Peer id → contact, persisted as JSON.
#[derive(Debug)]
pub struct Contacts {
    path: Option<PathBuf>,
    map: Mutex<BTreeMap<String, Contact>>,
}

impl Contacts {
    pub fn memory() -> Self {
        Self {
            path: None,
            map: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let map = if path.exists() {
            serde_json::from_slice(&std::fs::read(&path)?).map_err(std::io::Error::other)?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            path: Some(path),
            map: Mutex::new(map),
        })
    }

    fn save(&self, map: &BTreeMap<String, Contact>) -> std::io::Result<()> {
        if let Some(p) = &self.path {
            let tmp = p.with_extension("tmp");
            std::fs::write(&tmp, serde_json::to_vec_pretty(map).map_err(std::io::Error::other)?)?;
            std::fs::rename(tmp, p)?;
        }
        Ok(())
    }

    pub fn add(&self, peer: &PeerId, name: &str) -> std::io::Result<()> {
        let mut map = self.map.lock();
        let entry = map.entry(peer.to_hex()).or_insert_with(|| Contact {
            name: String::new(),
            keys: None,
        });
        entry.name = name.to_string();
        self.save(&map)
    }

    /// Records verified keys for a peer, keeping any existing name.
    pub fn learn_keys(&self, keys: &PublicKeys) -> std::io::Result<()> {
        let mut map = self.map.lock();
        let entry = map.entry(keys.peer_id().to_hex()).or_insert_with(|| Contact {
            name: String::new(),
            keys: None,
        });
        let hex_keys = hex::encode(keys.encode());
        if entry.keys.as_deref() == Some(&hex_keys) {
            return Ok(());
        }
        entry.keys = Some(hex_keys);
        self.save(&map)
    }

    /// Keys for a peer, only if they hash to its id.
    pub fn keys(&self, peer: &PeerId) -> Option<PublicKeys> {
        let map = self.map.lock();
        let hex_keys = map.get(&peer.to_hex())?.keys.as_ref()?;
        let keys = PublicKeys::decode(&hex::decode(hex_keys).ok()?).ok()?;
        (keys.peer_id() == *peer).then_some(keys)
    }

    pub fn list(&self) -> Vec<(String, Contact)> {
        self.map.lock().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_round_trip() {
        for filename in [None, Some("notes.txt".to_string())] {
            let e = Envelope {
                msg_id: [3; 16],
                created_at: 42,
                filename,
                body: b"hello".to_vec(),
            };
            assert_eq!(Envelope::decode(&e.encode()).unwrap(), e);
        }
    }

    #[test]
    fn history_is_sealed_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let id = PeerIdentity::generate();
        let path = dir.path().join("history.log");
        let rec = HistoryRecord {
            direction: "in".into(),
            msg_id: "00".repeat(16),
            peer: "ab".repeat(32),
            at: 7,
            detail: "dmq".into(),
            filename: None,
            body: hex::encode(b"a secret message body"),
        };
        {
            let (h, existing) = History::open(&path, id.clone()).unwrap();
            assert!(existing.is_empty());
            h.append(&rec).unwrap();
        }
        let raw = std::fs::read_to_string(&path).unwrap();
        assert!(!raw.contains(&rec.body) && !raw.contains("secret"));
        let (_, back) = History::open(&path, id).unwrap();
        assert_eq!(back, vec![rec.clone()]);
        // another identity cannot read it
        let (_, other) = History::open(&path, PeerIdentity::generate()).unwrap();
        assert!(other.is_empty());
    }

    #[test]
    fn contacts_persist_and_check_bindings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("contacts.json");
        let a = PeerIdentity::generate();
        let c = Contacts::open(&path).unwrap();
        c.add(&a.peer_id(), "alice").unwrap();
        assert!(c.keys(&a.peer_id()).is_none());
        c.learn_keys(&a.public_keys()).unwrap();
        let c = Contacts::open(&path).unwrap();
        assert_eq!(c.keys(&a.peer_id()), Some(a.public_keys()));
        assert_eq!(c.list()[0].1.name, "alice");
    }
}
