//! `fybrr`: run a node or a rendezvous server, drive a running node through
//! its local API, and run the benchmark harness.
//!
//! Output is line-oriented. With `--json` every line is one JSON object,
//! errors included. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use tokio_util::sync::CancellationToken;

use fybrr_core::clock::Clock;
use fybrr_core::crypto::{PeerId, PeerIdentity, PublicKeys};
use fybrr_core::node::api::{ApiClient, ApiError};
use fybrr_core::node::config::DEFAULT_API_PORT;
use fybrr_core::node::{Node, NodeConfig};
use fybrr_core::rendezvous::{RendezvousServer, ServerConfig};
use fybrr_core::sim::{self, BenchConfig, BenchPath, Scenario, Swarm, SwarmOptions};

#[derive(Parser)]
#[command(name = "fybrr", version, about = "Serverless peer-to-peer messaging")]
struct Cli {
    /// Emit one JSON object per output line.
    #[arg(long, global = true)]
    json: bool,
    /// Port of the running node's local API.
    #[arg(long, global = true, env = "FYBRR_API_PORT", default_value_t = DEFAULT_API_PORT)]
    api_port: u16,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a new identity and write it to a key file.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Run a rendezvous server until interrupted.
    Rendezvous {
        #[arg(long)]
        listen: SocketAddr,
        /// Pre-shared swarm key (hex); makes the swarm private.
        #[arg(long, value_parser = parse_hex)]
        swarm_key: Option<Vec<u8>>,
        /// Public keys (128 hex chars) of the private swarm's founder.
        #[arg(long, value_parser = parse_keys, requires = "swarm_key")]
        genesis: Option<PublicKeys>,
    },
    /// Run a node from a config file until interrupted.
    Node {
        #[arg(long)]
        config: PathBuf,
    },
    /// Send a text message or a file. Repeat `--to` for a group: each
    /// recipient gets its own sealed copy, reported in `--to` order.
    Send {
        #[arg(long, required = true)]
        to: Vec<PeerId>,
        #[arg(long, required_unless_present = "file", conflicts_with = "file")]
        text: Option<String>,
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Show received messages, syncing the queue first.
    Inbox {
        /// Do not drain the queue before listing.
        #[arg(long)]
        no_sync: bool,
    },
    /// Show sent and received messages in time order.
    History {
        #[arg(long)]
        peer: Option<PeerId>,
    },
    /// List or add contacts.
    Contacts {
        #[command(subcommand)]
        action: Option<ContactsCmd>,
    },
    /// Ask the rendezvous whether a peer is online.
    Presence { peer: PeerId },
    /// Swarm governance.
    Swarm {
        #[command(subcommand)]
        action: SwarmCmd,
    },
    /// Node status.
    Status,
    /// Message-latency benchmark on a local swarm.
    Bench(BenchArgs),
    /// Run a scenario file on a local swarm and print its event log.
    Scenario { file: PathBuf },
}

#[derive(Subcommand)]
enum ContactsCmd {
    /// Add a contact; `--keys` lets the node encrypt to it without a lookup.
    Add {
        peer_id: PeerId,
        name: String,
        #[arg(long, value_parser = parse_keys)]
        keys: Option<PublicKeys>,
    },
    List,
}

#[derive(Subcommand)]
enum SwarmCmd {
    /// Open a proposal: add_member, remove_member, promote_bootstrap,
    /// demote_bootstrap (with --subject) or set_policy (with --name/--value).
    Propose {
        #[arg(long)]
        kind: String,
        /// Peer id, or for add_member also the newcomer's public keys.
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        value: Option<String>,
    },
    /// Vote on an open proposal.
    Vote {
        #[arg(long, value_parser = parse_id)]
        proposal: String,
        #[arg(long, required_unless_present = "no", conflicts_with = "no")]
        yes: bool,
        #[arg(long)]
        no: bool,
    },
    /// Membership and open proposals.
    Status,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 500)]
    messages: usize,
    #[arg(long, default_value_t = 50)]
    min_len: usize,
    #[arg(long, default_value_t = 500)]
    max_len: usize,
    /// `direct` or `dmq`.
    #[arg(long, default_value = "direct")]
    path: BenchPath,
    /// Write per-message samples here.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Swarm size; the queue path needs a third node to hold replicas.
    #[arg(long)]
    nodes: Option<usize>,
}

fn parse_hex(s: &str) -> Result<Vec<u8>, String> {
    hex::decode(s).map_err(|e| format!("not hex: {e}"))
}

fn parse_keys(s: &str) -> Result<PublicKeys, String> {
    PublicKeys::decode(&parse_hex(s)?).map_err(|_| "expected 128 hex chars of public keys".to_string())
}

fn parse_id(s: &str) -> Result<String, String> {
    match hex::decode(s) {
        Ok(b) if b.len() == 32 => Ok(s.to_lowercase()),
        _ => Err("expected 64 hex chars".into()),
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Writes results as text lines or JSON objects.
struct Out {
    json: bool,
}

impl Out {
    fn emit(&self, text: impl AsRef<str>, value: Value) {
        if self.json {
            println!("{value}");
        } else {
            println!("{}", text.as_ref());
        }
    }
}

fn main() -> ExitCode {
    let json = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json {
                println!(
                    "{}",
                    json!({"error": e.kind().to_string(), "detail": e.to_string().trim(), "exit": 2})
                );
            } else {
                let _ = e.print();
            }
            return ExitCode::from(2);
        }
    };
    let out = Out { json: cli.json };
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return fail(&out, Failure::Runtime(e.to_string())),
    };
    match rt.block_on(run(cli, &out)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&out, f),
    }
}

fn fail(out: &Out, f: Failure) -> ExitCode {
    let (msg, code) = match f {
        Failure::Usage(m) => (m, 2u8),
        Failure::Runtime(m) => (m, 1u8),
    };
    if out.json {
        println!("{}", json!({"error": msg, "exit": code}));
    } else {
        eprintln!("error: {msg}");
    }
    ExitCode::from(code)
}

async fn run(cli: Cli, out: &Out) -> Result<(), Failure> {
    let api: SocketAddr = ([127, 0, 0, 1], cli.api_port).into();
    match cli.command {
        Command::Keygen { out: path, force } => keygen(out, path, force),
        Command::Rendezvous {
            listen,
            swarm_key,
            genesis,
        } => rendezvous(out, listen, swarm_key, genesis).await,
        Command::Node { config } => node(out, config).await,
        Command::Bench(args) => bench(out, args).await,
        Command::Scenario { file } => scenario(out, file).await,
        other => {
            let mut client = ApiClient::connect(api).await?;
            client_command(out, &mut client, other).await
        }
    }
}

fn keygen(out: &Out, path: PathBuf, force: bool) -> Result<(), Failure> {
    if path.exists() && !force {
        return Err(Failure::Runtime(format!(
            "{} exists; pass --force to replace it",
            path.display()
        )));
    }
    let id = PeerIdentity::generate();
    id.save(&path).map_err(|e| Failure::Runtime(e.to_string()))?;
    let keys = hex::encode(id.public_keys().encode());
    out.emit(
        format!("peer_id {}\npublic_keys {keys}", id.peer_id().to_hex()),
        json!({"peer_id": id.peer_id().to_hex(), "public_keys": keys, "key_file": path.display().to_string()}),
    );
    Ok(())
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into());
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .try_init();
}

async fn rendezvous(
    out: &Out,
    listen: SocketAddr,
    swarm_key: Option<Vec<u8>>,
    genesis: Option<PublicKeys>,
) -> Result<(), Failure> {
    init_logging();
    let private = swarm_key.is_some();
    let server = RendezvousServer::bind(listen, ServerConfig { swarm_key, genesis }, Clock::system())
        .await
        .map_err(|e| Failure::Runtime(format!("cannot listen on {listen}: {e}")))?;
    let addr = server.local_addr();
    out.emit(
        format!("rendezvous listening {addr} private {private}"),
        json!({"event": "listening", "addr": addr.to_string(), "private": private}),
    );
    server.run_until_cancelled(cancel_on_signal()).await;
    out.emit("rendezvous stopped", json!({"event": "stopped"}));
    Ok(())
}

async fn node(out: &Out, config: PathBuf) -> Result<(), Failure> {
    init_logging();
    let mut cfg = NodeConfig::load(&config).map_err(|e| Failure::Runtime(format!("{}: {e}", config.display())))?;
    if let Some(port) = std::env::var("FYBRR_API_PORT").ok().and_then(|v| v.parse().ok()) {
        cfg.api_port = (port != 0).then_some(port);
    }
    let node = Node::start(cfg).await.map_err(|e| Failure::Runtime(e.to_string()))?;
    let api = node.api_addr().map(|a| a.to_string());
    out.emit(
        format!(
            "node {} endpoint {} api {}",
            node.peer_id().to_hex(),
            node.endpoint(),
            api.as_deref().unwrap_or("off")
        ),
        json!({"event": "started", "peer_id": node.peer_id().to_hex(), "endpoint": node.endpoint().to_string(), "api": api}),
    );
    cancel_on_signal().cancelled().await;
    node.shutdown().await;
    out.emit("node stopped", json!({"event": "stopped"}));
    Ok(())
}

async fn bench(out: &Out, a: BenchArgs) -> Result<(), Failure> {
    if a.messages == 0 || a.min_len == 0 || a.min_len > a.max_len {
        return Err(Failure::Usage(
            "need --messages > 0 and 0 < --min-len <= --max-len".into(),
        ));
    }
    let direct = a.path == BenchPath::Direct;
    let swarm = Swarm::start(SwarmOptions {
        n_nodes: a.nodes.unwrap_or(if direct { 2 } else { 3 }).max(2),
        direct,
        persist: false,
        ..SwarmOptions::default()
    })
    .await
    .map_err(|e| Failure::Runtime(e.to_string()))?;
    let cfg = BenchConfig {
        messages: a.messages,
        len_from: a.min_len,
        len_to: a.max_len,
        path: a.path,
        seed: a.seed,
        ..BenchConfig::default()
    };
    let report = sim::run_benchmark(&swarm, 0, 1, &cfg).await;
    swarm.shutdown().await;
    let report = report.map_err(|e| Failure::Runtime(e.to_string()))?;
    if let Some(path) = &a.csv {
        sim::export_csv(&report.samples, path).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let s = report.summary.expect("at least one message");
    out.emit(
        format!(
            "messages {} path {} mean_ms {:.3} p50_ms {:.3} p99_ms {:.3} max_ms {:.3} total_ms {:.1}",
            s.count,
            serde_json::to_value(a.path).unwrap().as_str().unwrap_or(""),
            s.mean_ms,
            s.p50_ms,
            s.p99_ms,
            s.max_ms,
            s.total_ms
        ),
        json!({"summary": s, "path": a.path, "csv": a.csv.map(|p| p.display().to_string())}),
    );
    Ok(())
}

async fn scenario(out: &Out, file: PathBuf) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&file).map_err(|e| Failure::Runtime(format!("{}: {e}", file.display())))?;
    let s = Scenario::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", file.display())))?;
    let r = sim::run_scenario(&s)
        .await
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    for e in &r.log {
        let node = e.node.map(|n| n.to_string()).unwrap_or_else(|| "-".into());
        out.emit(format!("{} {node} {} {}", e.t, e.event, e.detail).trim_end(), json!(e));
    }
    out.emit(
        format!(
            "sent {} delivered {} queued {} failed {} duplicates {} corrupted_surfaced {} path_mismatches {}",
            r.sent,
            r.delivered.len(),
            r.queued,
            r.failed,
            r.duplicates,
            r.corrupted_surfaced,
            r.path_mismatches
        ),
        json!({
            "sent": r.sent, "delivered": r.delivered.len(), "queued": r.queued, "failed": r.failed,
            "duplicates": r.duplicates, "corrupted_surfaced": r.corrupted_surfaced,
            "path_mismatches": r.path_mismatches, "passed": r.passed(),
        }),
    );
    if r.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime(r.assertion_failures.join("; ")))
    }
}

fn strip_id(mut v: Value) -> Value {
    if let Some(o) = v.as_object_mut() {
        o.remove("id");
    }
    v
}

fn body_text(m: &Value) -> String {
    match m.get("filename").and_then(Value::as_str) {
        Some(f) => format!("[file {f}, {} bytes]", m["data"].as_str().map_or(0, |d| d.len() / 2)),
        None => m["text"].as_str().unwrap_or("").replace('\n', "\\n"),
    }
}

fn proposal_line(p: &Value) -> String {
    format!(
        "{} {} tally {} yes {} no {} members {} deadline {}",
        p["proposal"].as_str().unwrap_or(""),
        p["kind"],
        p["tally"].as_str().unwrap_or(""),
        p["yes"],
        p["no"],
        p["members"],
        p["deadline"]
    )
}

async fn client_command(out: &Out, c: &mut ApiClient, cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Send { to, text, file } => {
            let mut req = match (text, file) {
                (Some(t), _) => json!({"op": "send", "text": t}),
                (None, Some(path)) => {
                    let data =
                        std::fs::read(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
                    let name = path
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "file".into());
                    json!({"op": "send", "filename": name, "data": hex::encode(data)})
                }
                (None, None) => return Err(Failure::Usage("--text or --file is required".into())),
            };
            let mut failures = Vec::new();
            for peer in to {
                req["to"] = json!(peer.to_hex());
                let mut r = strip_id(c.call(req.clone()).await?);
                r["to"] = json!(peer.to_hex());
                let state = r["state"].as_str().unwrap_or("").to_string();
                out.emit(format!("{} {state}", r["msg_id"].as_str().unwrap_or("")), r.clone());
                if state == "failed" {
                    failures.push(format!(
                        "{}: {}",
                        peer.to_hex(),
                        r["error"].as_str().unwrap_or("send failed")
                    ));
                }
            }
            if !failures.is_empty() {
                return Err(Failure::Runtime(failures.join("; ")));
            }
        }
        Command::Inbox { no_sync } => {
            let r = c.call(json!({"op": "inbox", "sync": !no_sync})).await?;
            for m in r["messages"].as_array().into_iter().flatten() {
                out.emit(
                    format!(
                        "{} {} {} {}",
                        m["received_at"],
                        m["from"].as_str().unwrap_or(""),
                        m["path"].as_str().unwrap_or(""),
                        body_text(m)
                    ),
                    m.clone(),
                );
            }
        }
        Command::History { peer } => {
            let mut req = json!({"op": "history"});
            if let Some(p) = peer {
                req["peer"] = json!(p.to_hex());
            }
            let r = c.call(req).await?;
            for m in r["messages"].as_array().into_iter().flatten() {
                let line = if m["op"] == "inbound" {
                    format!(
                        "in {} {} {}",
                        m["received_at"],
                        m["from"].as_str().unwrap_or(""),
                        body_text(m)
                    )
                } else {
                    format!(
                        "out {} {} {} {}",
                        m["created_at"],
                        m["to"].as_str().unwrap_or(""),
                        m["state"].as_str().unwrap_or(""),
                        body_text(m)
                    )
                };
                out.emit(line, m.clone());
            }
        }
        Command::Contacts { action } => {
            let r = match action {
                Some(ContactsCmd::Add { peer_id, name, keys }) => {
                    let mut req = json!({"op": "contact_add", "peer_id": peer_id.to_hex(), "name": name});
                    if let Some(k) = keys {
                        req["keys"] = json!(hex::encode(k.encode()));
                    }
                    c.call(req).await?
                }
                Some(ContactsCmd::List) | None => c.call(json!({"op": "contacts"})).await?,
            };
            for ct in r["contacts"].as_array().into_iter().flatten() {
                out.emit(
                    format!(
                        "{} {}",
                        ct["peer_id"].as_str().unwrap_or(""),
                        ct["name"].as_str().unwrap_or("")
                    ),
                    ct.clone(),
                );
            }
        }
        Command::Presence { peer } => {
            let r = strip_id(c.call(json!({"op": "presence", "peer": peer.to_hex()})).await?);
            let online = r["online"].as_bool().unwrap_or(false);
            out.emit(
                format!(
                    "{} {}",
                    peer.to_hex(),
                    if online {
                        format!("online {}", r["endpoint"].as_str().unwrap_or(""))
                    } else {
                        "offline".into()
                    }
                ),
                r,
            );
        }
        Command::Status => {
            let r = strip_id(c.call(json!({"op": "status"})).await?);
            status_lines(out, &r);
        }
        Command::Swarm { action } => match action {
            SwarmCmd::Propose {
                kind,
                subject,
                name,
                value,
            } => {
                let mut req = json!({"op": "propose", "kind": kind});
                for (k, v) in [("subject", subject), ("name", name), ("value", value)] {
                    if let Some(v) = v {
                        req[k] = json!(v);
                    }
                }
                let r = strip_id(c.call(req).await?);
                out.emit(proposal_line(&r), r);
            }
            SwarmCmd::Vote { proposal, yes, no } => {
                let choice = match (yes, no) {
                    (true, false) => "yes",
                    (false, true) => "no",
                    _ => return Err(Failure::Usage("pass exactly one of --yes and --no".into())),
                };
                let r = strip_id(
                    c.call(json!({"op": "vote", "proposal": proposal, "choice": choice}))
                        .await?,
                );
                out.emit(proposal_line(&r), r);
            }
            SwarmCmd::Status => {
                let s = strip_id(c.call(json!({"op": "status"})).await?);
                out.emit(
                    format!("epoch {} members {} private {}", s["epoch"], s["members"], s["private"]),
                    json!({"epoch": s["epoch"], "members": s["members"], "private": s["private"]}),
                );
                let r = c.call(json!({"op": "proposals"})).await?;
                for p in r["proposals"].as_array().into_iter().flatten() {
                    out.emit(proposal_line(p), p.clone());
                }
            }
        },
        Command::Keygen { .. }
        | Command::Rendezvous { .. }
        | Command::Node { .. }
        | Command::Bench(_)
        | Command::Scenario { .. } => unreachable!("handled without a node"),
    }
    Ok(())
}

fn status_lines(out: &Out, r: &Value) {
    if out.json {
        out.emit("", r.clone());
        return;
    }
    if let Some(o) = r.as_object() {
        for (k, v) in o {
            if k == "op" {
                continue;
            }
            let v = v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string());
            println!("{k} {v}");
        }
    }
}

/// A token cancelled on Ctrl-C, or SIGTERM on unix.
fn cancel_on_signal() -> CancellationToken {
    let token = CancellationToken::new();
    let t = token.clone();
    tokio::spawn(async move {
        wait_for_signal().await;
        t.cancel();
    });
    token
}

#[cfg(unix)]
async fn wait_for_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    match signal(SignalKind::terminate()) {
        Ok(mut term) => {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
        }
        Err(_) => {
            let _ = tokio::signal::ctrl_c().await;
        }
    }
}

#[cfg(not(unix))]
async fn wait_for_signal() {
    let _ = tokio::signal::ctrl_c().await;
}
