//! In-process swarms on loopback, scripted scenarios, and the latency
//! benchmark.
//!
//! Every node is a real [`Node`] with real sockets; the harness only
//! decides who runs when. Scenario schedules are ordered by their logical
//! time and executed back to back, so runs with the same seed take the same
//! decisions even though wall-clock timings differ.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;
use tokio_util::sync::CancellationToken;

use crate::clock::Clock;
use crate::crypto::{ContentId, PeerId, PeerIdentity};
use crate::node::{DeliveryPath, Node, NodeConfig, NodeError, OutboundState};
use crate::rendezvous::{RendezvousServer, ServerConfig};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("node {0} is not running")]
    NotRunning(usize),
    #[error("no node {0} in this swarm")]
    NoSuchNode(usize),
    #[error("scenario line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{0}")]
    Undelivered(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug)]
pub struct SwarmOptions {
    pub n_nodes: usize,
    pub replication: usize,
    pub with_rendezvous: bool,
    pub swarm_key: Option<Vec<u8>>,
    /// Try direct channels before queueing.
    pub direct: bool,
    /// Keep node state on disk so stopped nodes come back with it.
    pub persist: bool,
    pub sync_interval: Duration,
    pub maintenance_interval: Duration,
    pub chunk_size: usize,
    pub rpc_timeout: Duration,
    /// Identity seeds are derived from this, so peer ids are reproducible.
    pub seed: u64,
}

impl Default for SwarmOptions {
    fn default() -> Self {
        Self {
            n_nodes: 2,
            replication: crate::store::DEFAULT_REPLICATION,
            with_rendezvous: true,
            swarm_key: None,
            direct: true,
            persist: true,
            // the harness drives syncs itself
            sync_interval: Duration::from_secs(3600),
            maintenance_interval: Duration::from_secs(3600),
            chunk_size: crate::store::DEFAULT_CHUNK_SIZE,
            rpc_timeout: Duration::from_millis(1500),
            seed: 1,
        }
    }
}

struct Slot {
    identity: PeerIdentity,
    data_dir: Option<PathBuf>,
    /// Bound on first start; a restarted node reuses it.
    listen: Option<SocketAddr>,
    direct: bool,
    node: Option<Arc<Node>>,
}

struct RendezvousHandle {
    addr: SocketAddr,
    stop: CancellationToken,
    task: tokio::task::JoinHandle<()>,
}

/// N nodes, optionally with a rendezvous server, all on loopback.
pub struct Swarm {
    opts: SwarmOptions,
    slots: Vec<Slot>,
    rendezvous: Option<RendezvousHandle>,
    rendezvous_addr: Option<SocketAddr>,
    _dir: Option<tempfile::TempDir>,
}

impl fmt::Debug for Swarm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Swarm")
            .field("nodes", &self.slots.len())
            .field("running", &self.running().len())
            .field("rendezvous", &self.rendezvous_addr)
            .finish()
    }
}

/// Seeded identity for node `i` of a swarm.
pub fn sim_identity(seed: u64, i: usize) -> PeerIdentity {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_be_bytes());
    s[8..16].copy_from_slice(&(i as u64).to_be_bytes());
    PeerIdentity::from_seed(&s).expect("32-byte seed")
}

impl Swarm {
    /// Starts the rendezvous (if any) and every node; node 0 is the
    /// founder and the others bootstrap from it. All nodes learn each
    /// other's keys.
    pub async fn start(opts: SwarmOptions) -> Result<Self, SimError> {
        let dir = if opts.persist { Some(tempfile::tempdir()?) } else { None };
        let identities: Vec<_> = (0..opts.n_nodes).map(|i| sim_identity(opts.seed, i)).collect();
        let rendezvous = if opts.with_rendezvous {
            let genesis = identities.first().map(|id| id.public_keys());
            let config = ServerConfig {
                swarm_key: opts.swarm_key.clone(),
                genesis: opts.swarm_key.as_ref().and(genesis),
            };
            Some(spawn_rendezvous("127.0.0.1:0".parse().unwrap(), config).await?)
        } else {
            None
        };
        let mut swarm = Swarm {
            rendezvous_addr: rendezvous.as_ref().map(|r| r.addr),
            rendezvous,
            slots: Vec::new(),
            _dir: None,
            opts: opts.clone(),
        };
        for (i, identity) in identities.into_iter().enumerate() {
            swarm.slots.push(Slot {
                identity,
                data_dir: dir.as_ref().map(|d| d.path().join(format!("node{i}"))),
                listen: None,
                direct: opts.direct,
                node: None,
            });
        }
        swarm._dir = dir;
        for i in 0..swarm.slots.len() {
            swarm.start_node(i).await?;
        }
        swarm.introduce_all();
        Ok(swarm)
    }

    pub fn options(&self) -> &SwarmOptions {
        &self.opts
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn rendezvous_addr(&self) -> Option<SocketAddr> {
        self.rendezvous_addr
    }

    pub fn peer_id(&self, i: usize) -> PeerId {
        self.slots[i].identity.peer_id()
    }

    pub fn identity(&self, i: usize) -> &PeerIdentity {
        &self.slots[i].identity
    }

    pub fn index_of(&self, peer: &PeerId) -> Option<usize> {
        self.slots.iter().position(|s| s.identity.peer_id() == *peer)
    }

    /// The running node `i`. Panics if it is stopped.
    pub fn node(&self, i: usize) -> &Arc<Node> {
        self.slots[i]
            .node
            .as_ref()
            .unwrap_or_else(|| panic!("node {i} is not running"))
    }

    pub fn try_node(&self, i: usize) -> Option<&Arc<Node>> {
        self.slots.get(i).and_then(|s| s.node.as_ref())
    }

    pub fn is_running(&self, i: usize) -> bool {
        self.try_node(i).is_some()
    }

    pub fn running(&self) -> Vec<usize> {
        (0..self.slots.len()).filter(|i| self.is_running(*i)).collect()
    }

    /// Enables or disables the direct path for node `i` from its next start.
    pub fn set_direct(&mut self, i: usize, on: bool) {
        self.slots[i].direct = on;
    }

    /// Starts (or restarts) node `i`, bootstrapping from any running node.
    pub async fn start_node(&mut self, i: usize) -> Result<Arc<Node>, SimError> {
        let slot = self.slots.get(i).ok_or(SimError::NoSuchNode(i))?;
        if let Some(n) = &slot.node {
            return Ok(n.clone());
        }
        let mut cfg = NodeConfig::ephemeral(slot.identity.clone());
        if let Some(addr) = slot.listen {
            cfg.listen = addr;
        }
        cfg.rendezvous = self.rendezvous_addr;
        cfg.swarm_key = self.opts.swarm_key.clone();
        cfg.genesis = self.slots.first().map(|s| s.identity.public_keys());
        cfg.bootstrap = self
            .slots
            .iter()
            .filter_map(|s| s.node.as_ref().map(|n| n.endpoint()))
            .take(3)
            .collect();
        cfg.replication = self.opts.replication;
        cfg.data_dir = slot.data_dir.clone();
        cfg.sync_interval = self.opts.sync_interval;
        cfg.maintenance_interval = self.opts.maintenance_interval;
        cfg.chunk_size = self.opts.chunk_size;
        cfg.rpc_timeout = self.opts.rpc_timeout;
        cfg.direct = slot.direct;
        cfg.clock = Clock::system();
        let node = start_with_retry(cfg).await?;
        let peers: Vec<_> = self.slots.iter().map(|s| s.identity.public_keys()).collect();
        for k in peers {
            if k.peer_id() != node.peer_id() {
                node.learn_keys(&k)?;
            }
        }
        self.slots[i].listen = Some(node.endpoint());
        self.slots[i].node = Some(node.clone());
        Ok(node)
    }

    /// Gracefully stops node `i`; its sockets close and its state stays on
    /// disk when the swarm persists.
    pub async fn stop_node(&mut self, i: usize) -> Result<(), SimError> {
        let node = self.slots.get_mut(i).ok_or(SimError::NoSuchNode(i))?.node.take();
        match node {
            Some(n) => {
                n.shutdown().await;
                Ok(())
            }
            None => Err(SimError::NotRunning(i)),
        }
    }

    /// Every running node learns every other node's keys.
    pub fn introduce_all(&self) {
        let keys: Vec<_> = self.slots.iter().map(|s| s.identity.public_keys()).collect();
        for i in self.running() {
            for k in &keys {
                if k.peer_id() != self.peer_id(i) {
                    let _ = self.node(i).learn_keys(k);
                }
            }
        }
    }

    /// Stops the rendezvous server; nodes keep running.
    pub async fn kill_rendezvous(&mut self) {
        if let Some(r) = self.rendezvous.take() {
            r.stop.cancel();
            let _ = r.task.await;
        }
    }

    /// Restarts the rendezvous on its old address.
    pub async fn restart_rendezvous(&mut self) -> Result<(), SimError> {
        if self.rendezvous.is_some() {
            return Ok(());
        }
        let Some(addr) = self.rendezvous_addr else {
            return Ok(());
        };
        let config = ServerConfig {
            swarm_key: self.opts.swarm_key.clone(),
            genesis: self
                .opts
                .swarm_key
                .as_ref()
                .and(self.slots.first().map(|s| s.identity.public_keys())),
        };
        self.rendezvous = Some(spawn_rendezvous(addr, config).await?);
        Ok(())
    }

    /// Runs one maintenance cycle (refresh, republish, GC) on every running node.
    pub async fn maintain_all(&self) {
        for i in self.running() {
            self.node(i).maintain().await;
        }
    }

    /// Runs GC on every running node; returns blocks removed.
    pub fn gc_all(&self) -> usize {
        self.running().iter().map(|i| self.node(*i).gc()).sum()
    }

    /// How many running nodes store each of `cids` (raw, verified or not).
    pub fn copies(&self, cids: &[ContentId]) -> usize {
        self.running()
            .iter()
            .map(|i| {
                cids.iter()
                    .filter(|c| self.node(*i).blocks().get_raw(c).is_some())
                    .count()
            })
            .sum()
    }

    /// Total queued entries held for anyone across running nodes.
    pub fn queued_entries(&self) -> usize {
        self.running()
            .iter()
            .map(|i| self.node(*i).dmq().store().pending())
            .sum()
    }

    pub async fn shutdown(mut self) {
        for i in self.running() {
            let _ = self.stop_node(i).await;
        }
        self.kill_rendezvous().await;
    }
}

async fn spawn_rendezvous(addr: SocketAddr, config: ServerConfig) -> Result<RendezvousHandle, SimError> {
    let mut last = None;
    for _ in 0..50 {
        match RendezvousServer::bind(addr, config.clone(), Clock::system()).await {
            Ok(server) => {
                let addr = server.local_addr();
                let stop = CancellationToken::new();
                let task = tokio::spawn(server.run_until_cancelled(stop.clone()));
                return Ok(RendezvousHandle { addr, stop, task });
            }
            Err(e) => {
                last = Some(e);
                tokio::time::sleep(Duration::from_millis(20)).await;
            }
        }
    }
    Err(last.expect("at least one attempt").into())
}

/// A just-closed listener's port can take a moment to become bindable again.
async fn start_with_retry(cfg: NodeConfig) -> Result<Arc<Node>, SimError> {
    let mut attempts = 0;
    loop {
        match Node::start(cfg.clone()).await {
            Ok(n) => return Ok(n),
            Err(NodeError::Io(e)) if e.kind() == std::io::ErrorKind::AddrInUse && attempts < 100 => {
                attempts += 1;
                tokio::time::sleep(Duration::from_millis(20)).await;
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Deterministic printable text of exactly `len` ASCII characters.
pub fn sample_text(rng: &mut impl Rng, len: usize) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 ";
    (0..len).map(|_| *ALPHABET.choose(rng).unwrap() as char).collect()
}

/// Length of message `i` of `n`, interpolated linearly between the bounds.
pub fn message_length(i: usize, n: usize, len_from: usize, len_to: usize) -> usize {
    if n <= 1 {
        return len_from;
    }
    let span = len_to as f64 - len_from as f64;
    (len_from as f64 + i as f64 * span / (n - 1) as f64).round() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchPath {
    Direct,
    Dmq,
}

impl std::str::FromStr for BenchPath {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "direct" => Ok(BenchPath::Direct),
            "dmq" => Ok(BenchPath::Dmq),
            other => Err(format!("path must be direct or dmq, not `{other}`")),
        }
    }
}

/// One message's timing. Timestamps are Unix milliseconds with
/// microsecond precision.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencySample {
    pub msg_index: usize,
    pub length_chars: usize,
    pub path: BenchPath,
    pub send_ts: f64,
    pub recv_ts: f64,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    /// Wall time from the first send to the last receipt.
    pub total_ms: f64,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn summarize(samples: &[LatencySample], total_ms: f64) -> Option<Summary> {
    if samples.is_empty() {
        return None;
    }
    let mut lat: Vec<f64> = samples.iter().map(|s| s.latency_ms).collect();
    lat.sort_by(f64::total_cmp);
    Some(Summary {
        count: lat.len(),
        mean_ms: lat.iter().sum::<f64>() / lat.len() as f64,
        p50_ms: percentile(&lat, 50.0),
        p99_ms: percentile(&lat, 99.0),
        max_ms: *lat.last().unwrap(),
        total_ms,
    })
}

/// Writes samples ordered by `msg_index`; the same samples always produce
/// the same bytes.
pub fn export_csv(samples: &[LatencySample], path: impl AsRef<Path>) -> Result<(), SimError> {
    let mut sorted: Vec<&LatencySample> = samples.iter().collect();
    sorted.sort_by_key(|s| s.msg_index);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["msg_index", "length_chars", "path", "send_ts", "recv_ts", "latency_ms"])?;
    for s in sorted {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub messages: usize,
    pub len_from: usize,
    pub len_to: usize,
    pub path: BenchPath,
    pub seed: u64,
    /// Give up on a message not received within this long.
    pub receive_timeout: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            messages: 500,
            len_from: 50,
            len_to: 500,
            path: BenchPath::Direct,
            seed: 7,
            receive_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub samples: Vec<LatencySample>,
    pub summary: Option<Summary>,
}

fn unix_us_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

/// Sends the benchmark stream from node `from` to node `to` one message at
/// a time. On the direct path each send completes when the receiver has
/// acknowledged it; on the queue path the receiver syncs after each send.
pub async fn run_benchmark(swarm: &Swarm, from: usize, to: usize, cfg: &BenchConfig) -> Result<BenchReport, SimError> {
    let sender = swarm.node(from).clone();
    let receiver = swarm.node(to).clone();
    let to_id = receiver.peer_id();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let texts: Vec<String> = (0..cfg.messages)
        .map(|i| sample_text(&mut rng, message_length(i, cfg.messages, cfg.len_from, cfg.len_to)))
        .collect();
    let mut events = receiver.subscribe();
    let mut samples = Vec::with_capacity(cfg.messages);
    let started = Instant::now();
    for (i, text) in texts.iter().enumerate() {
        let send_us = unix_us_now();
        let out = sender.send_message(&to_id, text.as_bytes()).await?;
        let expected = match cfg.path {
            BenchPath::Direct => OutboundState::SentDirect,
            BenchPath::Dmq => OutboundState::Queued,
        };
        if out.state != expected {
            return Err(SimError::Undelivered(format!(
                "message {i} ended {} ({})",
                out.state.as_str(),
                out.error.unwrap_or_default()
            )));
        }
        if cfg.path == BenchPath::Dmq {
            receiver.sync_inbox().await?;
        }
        let recv = tokio::time::timeout(cfg.receive_timeout, async {
            loop {
                match events.recv().await {
                    Ok(crate::node::NodeEvent::Inbound(m)) if m.msg_id == out.msg_id => return Some(m),
                    Ok(_) => {}
                    Err(tokio::sync::broadcast::error::RecvError::Lagged(_)) => {}
                    Err(_) => return None,
                }
            }
        })
        .await
        .ok()
        .flatten()
        .ok_or_else(|| SimError::Undelivered(format!("message {i} not received")))?;
        let expected_path = match cfg.path {
            BenchPath::Direct => DeliveryPath::Direct,
            BenchPath::Dmq => DeliveryPath::Dmq,
        };
        if recv.plaintext != text.as_bytes() || recv.path != expected_path {
            return Err(SimError::Undelivered(format!(
                "message {i} arrived altered or by the wrong path"
            )));
        }
        let recv_us = recv.received_at_us.max(send_us);
        samples.push(LatencySample {
            msg_index: i,
            length_chars: text.chars().count(),
            path: cfg.path,
            send_ts: send_us as f64 / 1000.0,
            recv_ts: recv_us as f64 / 1000.0,
            latency_ms: (recv_us - send_us) as f64 / 1000.0,
        });
    }
    let total_ms = started.elapsed().as_secs_f64() * 1000.0;
    let summary = summarize(&samples, total_ms);
    Ok(BenchReport { samples, summary })
}

// Scenarios.

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    Start,
    Stop,
    Send { to: usize, len: usize },
    Sync,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// A running holder serves a block with one flipped byte.
    CorruptChunk,
    /// A running holder with no later scheduled action is stopped.
    DropHolder,
    KillRendezvous,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    Node { node: usize, action: Action },
    Fault(Fault),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scenario {
    pub n_nodes: usize,
    pub seed: u64,
    pub replication: usize,
    /// (logical time in ms, step); kept sorted by time.
    pub schedule: Vec<(u64, Step)>,
    /// After the schedule, restart every stopped node and sync until quiet.
    pub settle: bool,
}

impl Scenario {
    pub fn new(n_nodes: usize, seed: u64) -> Self {
        Self {
            n_nodes,
            seed,
            replication: crate::store::DEFAULT_REPLICATION,
            schedule: Vec::new(),
            settle: true,
        }
    }

    pub fn at(mut self, t: u64, node: usize, action: Action) -> Self {
        self.schedule.push((t, Step::Node { node, action }));
        self.sort();
        self
    }

    pub fn fault(mut self, t: u64, fault: Fault) -> Self {
        self.schedule.push((t, Step::Fault(fault)));
        self.sort();
        self
    }

    fn sort(&mut self) {
        // stable: equal times keep insertion order
        self.schedule.sort_by_key(|(t, _)| *t);
    }

    /// Random online/offline schedule: every node starts, then a mix of
    /// stops, restarts, sends and syncs.
    pub fn random(n_nodes: usize, steps: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Scenario::new(n_nodes, seed);
        let mut up = vec![true; n_nodes];
        for k in 0..steps {
            let t = (k as u64 + 1) * 10;
            let node = rng.random_range(0..n_nodes);
            let action = match rng.random_range(0..10) {
                0..=1 => {
                    // keep at least two nodes up so the swarm stays connected
                    if up[node] && up.iter().filter(|u| **u).count() > 2 {
                        up[node] = false;
                        Action::Stop
                    } else if !up[node] {
                        up[node] = true;
                        Action::Start
                    } else {
                        Action::Sync
                    }
                }
                2..=7 if up[node] => {
                    let mut to = rng.random_range(0..n_nodes - 1);
                    if to >= node {
                        to += 1;
                    }
                    Action::Send {
                        to,
                        len: rng.random_range(1..400),
                    }
                }
                _ if up[node] => Action::Sync,
                _ => {
                    up[node] = true;
                    Action::Start
                }
            };
            s = s.at(t, node, action);
        }
        s
    }

    /// Parses the `key=value` header and the `[schedule]` block:
    ///
    /// ```text
    /// n_nodes=5
    /// seed=7
    /// [schedule]
    /// 0 1 stop
    /// 10 0 send 1 200
    /// 20 fault corrupt_chunk
    /// 30 1 start
    /// 40 1 sync
    /// ```
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut s = Scenario::new(0, 0);
        let mut in_schedule = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let bad = |reason: &str| SimError::Parse {
                line: i + 1,
                reason: reason.to_string(),
            };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "[schedule]" {
                in_schedule = true;
                continue;
            }
            if !in_schedule {
                let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
                let v = v.trim();
                let num = || v.parse::<u64>().map_err(|_| bad("expected an integer"));
                match k.trim() {
                    "n_nodes" => s.n_nodes = num()? as usize,
                    "seed" => s.seed = num()?,
                    "replication" => s.replication = num()? as usize,
                    "settle" => s.settle = v == "true",
                    other => return Err(bad(&format!("unknown key `{other}`"))),
                }
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let n = |j: usize| -> Result<u64, SimError> {
                f.get(j)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("expected a number"))
            };
            let t = n(0)?;
            if f.get(1) == Some(&"fault") {
                let fault = match f.get(2).copied() {
                    Some("corrupt_chunk") => Fault::CorruptChunk,
                    Some("drop_holder") => Fault::DropHolder,
                    Some("kill_rendezvous") => Fault::KillRendezvous,
                    _ => return Err(bad("unknown fault")),
                };
                s.schedule.push((t, Step::Fault(fault)));
                continue;
            }
            let node = n(1)? as usize;
            let action = match f.get(2).copied() {
                Some("start") => Action::Start,
                Some("stop") => Action::Stop,
                Some("sync") => Action::Sync,
                Some("send") => Action::Send {
                    to: n(3)? as usize,
                    len: n(4)? as usize,
                },
                _ => return Err(bad("unknown action")),
            };
            if node >= s.n_nodes {
                return Err(bad("node index out of range"));
            }
            s.schedule.push((t, Step::Node { node, action }));
        }
        if s.n_nodes == 0 {
            return Err(SimError::Parse {
                line: 0,
                reason: "n_nodes is required".into(),
            });
        }
        s.sort();
        Ok(s)
    }
}

/// One line of the machine-readable run log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LogEvent {
    pub t: u64,
    pub node: Option<usize>,
    pub event: String,
    pub detail: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ScenarioReport {
    pub log: Vec<LogEvent>,
    pub sent: usize,
    /// (message index, receiving node), once each.
    pub delivered: BTreeSet<(usize, usize)>,
    pub duplicates: usize,
    pub corrupted_surfaced: usize,
    /// Deliveries whose path differs from the one the sender reported.
    pub path_mismatches: usize,
    /// Sent messages still waiting in a queue when the run ended.
    pub queued: usize,
    pub failed: usize,
    pub assertion_failures: Vec<String>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.assertion_failures.is_empty()
    }
}

struct SentMessage {
    to: usize,
    text: String,
    msg_id: [u8; 16],
    state: OutboundState,
}

/// Runs a scenario to completion on a fresh swarm and checks delivery
/// invariants: no duplicates, no altered plaintext, conservation of
/// messages, and (when settling without faults) zero loss.
pub async fn run_scenario(s: &Scenario) -> Result<ScenarioReport, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x5eed);
    let mut swarm = Swarm::start(SwarmOptions {
        n_nodes: s.n_nodes,
        replication: s.replication,
        seed: s.seed,
        ..SwarmOptions::default()
    })
    .await?;
    let mut report = ScenarioReport::default();
    let mut sent: Vec<SentMessage> = Vec::new();
    let mut seen: HashMap<(usize, [u8; 16]), usize> = HashMap::new();
    let mut faulty = false;

    for (k, (t, step)) in s.schedule.iter().enumerate() {
        let t = *t;
        let log = |node: Option<usize>, event: &str, detail: String| LogEvent {
            t,
            node,
            event: event.into(),
            detail,
        };
        match step {
            Step::Node { node, action } => {
                let i = *node;
                match action {
                    Action::Start => {
                        if !swarm.is_running(i) {
                            swarm.start_node(i).await?;
                            report.log.push(log(Some(i), "start", String::new()));
                        }
                    }
                    Action::Stop => {
                        if swarm.is_running(i) {
                            swarm.stop_node(i).await?;
                            report.log.push(log(Some(i), "stop", String::new()));
                        }
                    }
                    Action::Send { to, len } => {
                        if !swarm.is_running(i) {
                            continue;
                        }
                        let text = format!("{}:{}", sent.len(), sample_text(&mut rng, *len));
                        let out = swarm.node(i).send_message(&swarm.peer_id(*to), text.as_bytes()).await?;
                        report.log.push(log(
                            Some(i),
                            "send",
                            format!("msg {} to {} -> {}", sent.len(), to, out.state.as_str()),
                        ));
                        sent.push(SentMessage {
                            to: *to,
                            text,
                            msg_id: out.msg_id,
                            state: out.state,
                        });
                    }
                    Action::Sync => {
                        if swarm.is_running(i) {
                            let got = swarm.node(i).sync_inbox().await?;
                            report
                                .log
                                .push(log(Some(i), "sync", format!("{} delivered", got.len())));
                        }
                    }
                }
            }
            Step::Fault(fault) => {
                faulty = true;
                let detail = apply_fault(&mut swarm, *fault, &s.schedule[k + 1..], &mut rng).await?;
                report.log.push(log(None, "fault", detail));
            }
        }
        collect_deliveries(&swarm, &sent, &mut seen, &mut report, t);
    }

    if s.settle {
        let t = s.schedule.last().map(|(t, _)| *t + 10).unwrap_or(0);
        swarm.restart_rendezvous().await?;
        for i in 0..swarm.len() {
            if !swarm.is_running(i) {
                swarm.start_node(i).await?;
            }
        }
        for _round in 0..3 {
            for i in swarm.running() {
                swarm.node(i).sync_inbox().await?;
            }
        }
        collect_deliveries(&swarm, &sent, &mut seen, &mut report, t);
    }

    report.sent = sent.len();
    for (idx, m) in sent.iter().enumerate() {
        if report.delivered.contains(&(idx, m.to)) {
            continue;
        }
        match m.state {
            OutboundState::Failed => report.failed += 1,
            _ => report.queued += 1,
        }
    }
    if report.duplicates > 0 {
        report
            .assertion_failures
            .push(format!("{} messages surfaced more than once", report.duplicates));
    }
    if report.corrupted_surfaced > 0 {
        report
            .assertion_failures
            .push(format!("{} altered messages surfaced", report.corrupted_surfaced));
    }
    if report.path_mismatches > 0 {
        report.assertion_failures.push(format!(
            "{} messages arrived by a path other than the one reported",
            report.path_mismatches
        ));
    }
    if report.delivered.len() + report.queued + report.failed != report.sent {
        report.assertion_failures.push("conservation violated".into());
    }
    if !faulty && report.failed > 0 {
        report
            .assertion_failures
            .push(format!("{} sends failed in a fault-free run", report.failed));
    }
    if s.settle && !faulty && report.queued > 0 {
        report
            .assertion_failures
            .push(format!("{} messages lost after every node rejoined", report.queued));
    }
    swarm.shutdown().await;
    Ok(report)
}

fn collect_deliveries(
    swarm: &Swarm,
    sent: &[SentMessage],
    seen: &mut HashMap<(usize, [u8; 16]), usize>,
    report: &mut ScenarioReport,
    t: u64,
) {
    let by_id: HashMap<[u8; 16], usize> = sent.iter().enumerate().map(|(i, m)| (m.msg_id, i)).collect();
    for node in swarm.running() {
        let inbox = swarm.node(node).inbox();
        let mut counts: BTreeMap<[u8; 16], usize> = BTreeMap::new();
        for m in &inbox {
            *counts.entry(m.msg_id).or_default() += 1;
        }
        for m in inbox {
            let Some(&idx) = by_id.get(&m.msg_id) else { continue };
            let key = (node, m.msg_id);
            let c = counts[&m.msg_id];
            let prev = seen.insert(key, c).unwrap_or(0);
            if c > prev && prev > 0 {
                report.duplicates += c - prev;
            }
            if prev == 0 {
                if c > 1 {
                    report.duplicates += c - 1;
                }
                if m.plaintext != sent[idx].text.as_bytes() || sent[idx].to != node {
                    report.corrupted_surfaced += 1;
                }
                let expected = match sent[idx].state {
                    OutboundState::SentDirect => Some(DeliveryPath::Direct),
                    OutboundState::Queued => Some(DeliveryPath::Dmq),
                    _ => None,
                };
                if expected != Some(m.path) {
                    report.path_mismatches += 1;
                }
                report.delivered.insert((idx, node));
                report.log.push(LogEvent {
                    t,
                    node: Some(node),
                    event: "deliver".into(),
                    detail: format!("msg {idx} via {}", m.path.as_str()),
                });
            }
        }
    }
}

async fn apply_fault(
    swarm: &mut Swarm,
    fault: Fault,
    later: &[(u64, Step)],
    rng: &mut ChaCha8Rng,
) -> Result<String, SimError> {
    let busy: BTreeSet<usize> = later
        .iter()
        .filter_map(|(_, s)| match s {
            Step::Node { node, action } => Some(match action {
                Action::Send { to, .. } => vec![*node, *to],
                _ => vec![*node],
            }),
            _ => None,
        })
        .flatten()
        .collect();
    let holders: Vec<usize> = swarm
        .running()
        .into_iter()
        .filter(|i| !swarm.node(*i).blocks().is_empty())
        .collect();
    match fault {
        Fault::KillRendezvous => {
            swarm.kill_rendezvous().await;
            Ok("rendezvous stopped".into())
        }
        Fault::DropHolder => {
            let candidates: Vec<usize> = holders.iter().copied().filter(|i| !busy.contains(i)).collect();
            match candidates.choose(rng) {
                Some(&i) => {
                    swarm.stop_node(i).await?;
                    Ok(format!("holder {i} stopped"))
                }
                None => Ok("no idle holder to drop".into()),
            }
        }
        Fault::CorruptChunk => {
            let Some(&i) = holders.choose(rng) else {
                return Ok("no holder to corrupt".into());
            };
            let node = swarm.node(i);
            let cids = node.blocks().cids();
            let cid = *cids.choose(rng).expect("holder has blocks");
            let len = node.blocks().get_raw(&cid).map(|b| b.len()).unwrap_or(1).max(1);
            node.blocks().corrupt_byte(&cid, rng.random_range(0..len), 0x01);
            node.pins().set_serve_unverified(true);
            Ok(format!("node {i} serves block {cid} corrupted"))
        }
    }
}
