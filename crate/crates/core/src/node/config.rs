//! Node configuration: line-oriented `key=value` files.
//!
//! Recognised keys: `key_file`, `listen`, `rendezvous`, `swarm_key` (hex),
//! `genesis` (hex of the founder's 64-byte public keys), `bootstrap`
//! (comma-separated), `replication`, `api_port`, `data_dir`,
//! `sync_interval_ms`, `chunk_size`. Blank lines and `#` comments are
//! ignored; unknown keys are an error so typos do not go unnoticed.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::channel::ChannelConfig;
use crate::clock::Clock;
use crate::crypto::{PeerIdentity, PublicKeys};
use crate::store::{DEFAULT_CHUNK_SIZE, DEFAULT_REPLICATION};

pub const DEFAULT_API_PORT: u16 = 7777;
pub const DEFAULT_SYNC_INTERVAL: Duration = Duration::from_secs(10);
pub const DEFAULT_MAINTENANCE_INTERVAL: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("key file: {0}")]
    KeyFile(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub identity: PeerIdentity,
    pub listen: SocketAddr,
    pub rendezvous: Option<SocketAddr>,
    pub swarm_key: Option<Vec<u8>>,
    /// Founder of the membership log; defaults to this node.
    pub genesis: Option<PublicKeys>,
    pub bootstrap: Vec<SocketAddr>,
    pub replication: usize,
    /// Local API port; `None` (or `api_port=0` in a file) disables the API.
    pub api_port: Option<u16>,
    /// Persistent state; `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub sync_interval: Duration,
    pub maintenance_interval: Duration,
    pub chunk_size: usize,
    pub channel: ChannelConfig,
    pub rpc_timeout: Duration,
    /// Try the direct path before falling back.
    pub direct: bool,
    pub clock: Clock,
}

impl NodeConfig {
    /// In-memory node on an ephemeral loopback port with defaults.
    pub fn ephemeral(identity: PeerIdentity) -> Self {
        Self {
            identity,
            listen: "127.0.0.1:0".parse().unwrap(),
            rendezvous: None,
            swarm_key: None,
            genesis: None,
            bootstrap: Vec::new(),
            replication: DEFAULT_REPLICATION,
            api_port: None,
            data_dir: None,
            sync_interval: DEFAULT_SYNC_INTERVAL,
            maintenance_interval: DEFAULT_MAINTENANCE_INTERVAL,
            chunk_size: DEFAULT_CHUNK_SIZE,
            channel: ChannelConfig::default(),
            rpc_timeout: crate::rpc::DEFAULT_RPC_TIMEOUT,
            direct: true,
            clock: Clock::system(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut key_file: Option<PathBuf> = None;
        let mut pending = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                reason: "expected key=value".into(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k == "key_file" {
                key_file = Some(base.join(v));
            } else {
                pending.push((i + 1, k.to_string(), v.to_string()));
            }
        }
        let key_file = key_file.ok_or(ConfigError::Missing("key_file"))?;
        let identity =
            PeerIdentity::load(&key_file).map_err(|e| ConfigError::KeyFile(format!("{}: {e}", key_file.display())))?;
        let mut cfg = Self::ephemeral(identity);
        cfg.api_port = Some(DEFAULT_API_PORT);
        let mut saw_listen = false;
        for (line, k, v) in pending {
            let bad = |reason: String| ConfigError::Syntax { line, reason };
            match k.as_str() {
                "listen" => {
                    cfg.listen = v.parse().map_err(|e| bad(format!("listen: {e}")))?;
                    saw_listen = true;
                }
                "rendezvous" => {
                    cfg.rendezvous = if v.is_empty() {
                        None
                    } else {
                        Some(v.parse().map_err(|e| bad(format!("rendezvous: {e}")))?)
                    }
                }
                "swarm_key" => {
                    cfg.swarm_key = if v.is_empty() {
                        None
                    } else {
                        Some(hex::decode(&v).map_err(|e| bad(format!("swarm_key: {e}")))?)
                    }
                }
                "genesis" => {
                    let bytes = hex::decode(&v).map_err(|e| bad(format!("genesis: {e}")))?;
                    cfg.genesis = Some(PublicKeys::decode(&bytes).map_err(|e| bad(format!("genesis: {e}")))?);
                }
                "bootstrap" => {
                    cfg.bootstrap = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse().map_err(|e| bad(format!("bootstrap {s}: {e}"))))
                        .collect::<Result<_, _>>()?;
                }
                "replication" => {
                    cfg.replication = v.parse().map_err(|e| bad(format!("replication: {e}")))?;
                    if cfg.replication == 0 {
                        return Err(bad("replication must be at least 1".into()));
                    }
                }
                "api_port" => {
                    let port: u16 = v.parse().map_err(|e| bad(format!("api_port: {e}")))?;
                    cfg.api_port = (port != 0).then_some(port);
                }
                "data_dir" => cfg.data_dir = Some(base.join(v)),
                "sync_interval_ms" => {
                    cfg.sync_interval =
                        Duration::from_millis(v.parse().map_err(|e| bad(format!("sync_interval_ms: {e}")))?)
                }
                "chunk_size" => cfg.chunk_size = v.parse().map_err(|e| bad(format!("chunk_size: {e}")))?,
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        if !saw_listen {
            return Err(ConfigError::Missing("listen"));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys_and_rejects_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let id = PeerIdentity::generate();
        id.save(dir.path().join("k.key")).unwrap();
        let text = format!(
            "# node\nkey_file = k.key\nlisten=127.0.0.1:4000\nrendezvous=127.0.0.1:5000\nswarm_key=abcd\n\
             bootstrap=127.0.0.1:4001, 127.0.0.1:4002\nreplication=2\napi_port=8000\ndata_dir=state\n\
             genesis={}\n",
            hex::encode(id.public_keys().encode())
        );
        let cfg = NodeConfig::parse(&text, dir.path()).unwrap();
        assert_eq!(cfg.identity.peer_id(), id.peer_id());
        assert_eq!(cfg.listen.port(), 4000);
        assert_eq!(cfg.rendezvous.unwrap().port(), 5000);
        assert_eq!(cfg.swarm_key.as_deref(), Some(&[0xab, 0xcd][..]));
        assert_eq!(cfg.bootstrap.len(), 2);
        assert_eq!(cfg.replication, 2);
        assert_eq!(cfg.api_port, Some(8000));
        assert_eq!(cfg.data_dir.unwrap(), dir.path().join("state"));
        assert_eq!(cfg.genesis, Some(id.public_keys()));

        let err = NodeConfig::parse("key_file=k.key\nlisten=127.0.0.1:1\nbogus=1\n", dir.path()).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        assert!(matches!(
            NodeConfig::parse("listen=127.0.0.1:1\n", dir.path()),
            Err(ConfigError::Missing("key_file"))
        ));
        let defaults = NodeConfig::parse("key_file=k.key\nlisten=127.0.0.1:1\n", dir.path()).unwrap();
        assert_eq!(defaults.api_port, Some(DEFAULT_API_PORT));
    }

    #[test]
    fn malformed_key_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bad.key"), "not a key\n").unwrap();
        let err = NodeConfig::parse("key_file=bad.key\nlisten=127.0.0.1:1\n", dir.path()).unwrap_err();
        assert!(matches!(err, ConfigError::KeyFile(_)));
    }
}
