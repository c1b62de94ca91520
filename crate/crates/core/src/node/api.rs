//! Local client API: a WebSocket session on a loopback port carrying one
//! JSON object per text message.
//!
//! Commands carry an `op` and an optional `id`; the reply to a command
//! echoes the `id`. Events pushed without a request have no `id`:
//!
//! | command | fields | reply `op` |
//! |---|---|---|
//! | `send` | `to`, `text` or (`filename`, `data` hex) | `status` |
//! | `history` | optional `peer` | `history` |
//! | `inbox` | optional `sync` (bool) | `inbox` |
//! | `contacts` | | `contacts` |
//! | `contact_add` | `peer_id`, `name`, optional `keys` hex | `contacts` |
//! | `presence` | `peer` | `presence` |
//! | `proposals` | | `proposals` |
//! | `propose` | `kind`, `subject` or (`name`, `value`) | `proposal` |
//! | `vote` | `proposal`, `choice` = `yes`/`no` | `proposal` |
//! | `status` | | `node_status` |
//!
//! Pushed events: `inbound`, `status`, `proposal`, `membership`,
//! `quarantined`. Failures produce `{"op":"error","error":...}` and leave the
//! session open. Connections presenting a non-loopback `Origin` are refused
//! during the upgrade.

use std::net::SocketAddr;
use std::sync::Arc;

use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::broadcast::error::RecvError;
use tokio_tungstenite::tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tokio_tungstenite::tungstenite::http::StatusCode;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};
use tracing::debug;

use super::{InboundMessage, Node, NodeError, NodeEvent, OutboundMessage};
use crate::consensus::{Choice, ProposalKind, ProposalStatus};
use crate::crypto::{PeerId, PublicKeys};

/// Accepts only loopback origins; a missing Origin (non-browser client) is
/// allowed because the socket itself is bound to loopback.
pub fn origin_allowed(origin: Option<&str>) -> bool {
    let Some(origin) = origin else { return true };
    let host = origin
        .split_once("://")
        .map(|(_, rest)| rest)
        .unwrap_or(origin)
        .split('/')
        .next()
        .unwrap_or("");
    let host = match host.strip_prefix('[') {
        Some(v6) => v6.split(']').next().unwrap_or(""),
        None => host.rsplit_once(':').map(|(h, _)| h).unwrap_or(host),
    };
    matches!(host, "localhost" | "127.0.0.1" | "::1")
}

/// Binds the API listener on `addr` (which must be loopback) and serves it
/// until the node shuts down. Returns the bound address.
pub async fn serve(node: Arc<Node>, addr: SocketAddr) -> std::io::Result<SocketAddr> {
    if !addr.ip().is_loopback() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "the local API only binds loopback addresses",
        ));
    }
    let listener = TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    let cancel = node.cancel.clone();
    let tasks = node.tasks.clone();
    let weak = Arc::downgrade(&node);
    tasks.spawn(async move {
        loop {
            let accepted = tokio::select! {
                _ = cancel.cancelled() => break,
                r = listener.accept() => r,
            };
            let Ok((stream, peer)) = accepted else { continue };
            let Some(node) = weak.upgrade() else { break };
            if !peer.ip().is_loopback() {
                continue;
            }
            node.tasks.clone().spawn(session(node, stream));
        }
    });
    Ok(bound)
}

async fn session(node: Arc<Node>, stream: TcpStream) {
    // the handshake callback's signature is fixed by tungstenite
    #[allow(clippy::result_large_err)]
    let check = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
        let origin = req.headers().get("origin").and_then(|v| v.to_str().ok());
        if origin_allowed(origin) {
            Ok(resp)
        } else {
            let mut e = ErrorResponse::new(Some("origin not allowed".into()));
            *e.status_mut() = StatusCode::FORBIDDEN;
            Err(e)
        }
    };
    let Ok(ws) = tokio_tungstenite::accept_hdr_async(stream, check).await else {
        return;
    };
    let (mut tx, mut rx) = ws.split();
    let mut events = node.subscribe();
    let cancel = node.cancel.clone();
    loop {
        let out = tokio::select! {
            _ = cancel.cancelled() => break,
            m = rx.next() => match m {
                Some(Ok(Message::Text(t))) => Some(handle_text(&node, t.as_str()).await),
                Some(Ok(Message::Binary(_))) => Some(error_json(None, "binary frames are not supported")),
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => None,
            },
            e = events.recv() => match e {
                Ok(ev) => Some(event_json(&ev)),
                Err(RecvError::Lagged(n)) => Some(error_json(None, &format!("{n} events dropped"))),
                Err(RecvError::Closed) => break,
            },
        };
        if let Some(v) = out {
            if tx.send(Message::text(v.to_string())).await.is_err() {
                break;
            }
        }
    }
    debug!("api session closed");
}

fn error_json(id: Option<&Value>, msg: &str) -> Value {
    let mut v = json!({"op": "error", "error": msg});
    if let Some(id) = id {
        v["id"] = id.clone();
    }
    v
}

async fn handle_text(node: &Node, text: &str) -> Value {
    let cmd: Value = match serde_json::from_str(text) {
        Ok(v @ Value::Object(_)) => v,
        Ok(_) => return error_json(None, "expected a JSON object"),
        Err(e) => return error_json(None, &format!("malformed JSON: {e}")),
    };
    let id = cmd.get("id").cloned();
    match handle_command(node, &cmd).await {
        Ok(mut v) => {
            if let Some(id) = id {
                v["id"] = id;
            }
            v
        }
        Err(e) => error_json(id.as_ref(), &e),
    }
}

fn field<'a>(cmd: &'a Value, name: &str) -> Result<&'a str, String> {
    cmd.get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| format!("missing string field `{name}`"))
}

fn peer_field(cmd: &Value, name: &str) -> Result<PeerId, String> {
    field(cmd, name)?
        .parse()
        .map_err(|_| format!("`{name}` must be a 64-char hex peer id"))
}

fn hex32(s: &str, what: &str) -> Result<[u8; 32], String> {
    hex::decode(s)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| format!("`{what}` must be 64 hex chars"))
}

async fn handle_command(node: &Node, cmd: &Value) -> Result<Value, String> {
    let op = field(cmd, "op")?;
    let err = |e: NodeError| e.to_string();
    match op {
        "send" => {
            let to = peer_field(cmd, "to")?;
            let m = match cmd.get("filename").and_then(Value::as_str) {
                Some(name) => {
                    let data = hex::decode(field(cmd, "data")?).map_err(|e| format!("`data`: {e}"))?;
                    node.send_file(&to, name, &data).await
                }
                None => node.send_message(&to, field(cmd, "text")?.as_bytes()).await,
            }
            .map_err(err)?;
            Ok(outbound_status_json(&m))
        }
        "history" => {
            let peer = match cmd.get("peer") {
                Some(_) => Some(peer_field(cmd, "peer")?),
                None => None,
            };
            let mut items: Vec<(u64, Value)> = Vec::new();
            for m in node.inbox() {
                if peer.is_none_or(|p| p == m.from) {
                    items.push((m.received_at, inbound_json(&m)));
                }
            }
            for m in node.outbox() {
                if peer.is_none_or(|p| p == m.to) {
                    items.push((m.created_at, outbound_json(&m)));
                }
            }
            items.sort_by_key(|(t, _)| *t);
            Ok(json!({"op": "history", "messages": items.into_iter().map(|(_, v)| v).collect::<Vec<_>>()}))
        }
        "inbox" => {
            if cmd.get("sync").and_then(Value::as_bool).unwrap_or(false) {
                node.sync_inbox().await.map_err(err)?;
            }
            let msgs: Vec<Value> = node.inbox().iter().map(inbound_json).collect();
            Ok(json!({"op": "inbox", "messages": msgs}))
        }
        "contacts" => Ok(contacts_json(node)),
        "contact_add" => {
            let peer = peer_field(cmd, "peer_id")?;
            if let Some(k) = cmd.get("keys").and_then(Value::as_str) {
                let keys = hex::decode(k)
                    .ok()
                    .and_then(|b| PublicKeys::decode(&b).ok())
                    .ok_or("`keys` must be 128 hex chars")?;
                if keys.peer_id() != peer {
                    return Err("keys do not hash to peer_id".into());
                }
                node.learn_keys(&keys).map_err(err)?;
            }
            node.add_contact(&peer, field(cmd, "name")?).map_err(err)?;
            Ok(contacts_json(node))
        }
        "presence" => {
            let peer = peer_field(cmd, "peer")?;
            let p = node.presence(&peer).await.map_err(err)?;
            Ok(json!({
                "op": "presence",
                "peer": peer.to_hex(),
                "online": p.is_some(),
                "endpoint": p.as_ref().map(|p| p.endpoint.clone()),
                "expires_at": p.as_ref().map(|p| p.expires_at),
            }))
        }
        "proposals" => {
            let list: Vec<Value> = node.proposals().iter().map(proposal_json).collect();
            Ok(json!({"op": "proposals", "proposals": list}))
        }
        "propose" => {
            let kind = parse_kind(node, cmd).await?;
            let p = node.propose(kind).await.map_err(err)?;
            let s = node.proposal_status(&p.id()).map_err(err)?;
            Ok(proposal_json(&s))
        }
        "vote" => {
            let pid = hex32(field(cmd, "proposal")?, "proposal")?;
            let choice = match field(cmd, "choice")? {
                "yes" => Choice::Yes,
                "no" => Choice::No,
                other => return Err(format!("choice must be yes or no, not `{other}`")),
            };
            let s = node.vote(&pid, choice).await.map_err(err)?;
            Ok(proposal_json(&s))
        }
        "status" => {
            let mut v = node.status_json();
            v["op"] = json!("node_status");
            Ok(v)
        }
        other => Err(format!("unknown op `{other}`")),
    }
}

/// `add_member` takes the newcomer's 128-hex public keys, or a peer id
/// whose keys the node can resolve; the other kinds take a peer id, except
/// `set_policy` which takes `name` and `value`.
async fn parse_kind(node: &Node, cmd: &Value) -> Result<ProposalKind, String> {
    let kind = field(cmd, "kind")?;
    let subject = || field(cmd, "subject");
    let peer = || -> Result<PeerId, String> {
        subject()?
            .parse()
            .map_err(|_| "`subject` must be a 64-char hex peer id".to_string())
    };
    Ok(match kind {
        "add_member" => {
            let s = subject()?;
            let keys = if s.len() == 2 * PublicKeys::ENCODED_LEN {
                hex::decode(s)
                    .ok()
                    .and_then(|b| PublicKeys::decode(&b).ok())
                    .ok_or("`subject` is not valid public keys")?
            } else {
                node.resolve_keys(&peer()?).await.map_err(|e| e.to_string())?
            };
            ProposalKind::AddMember { keys }
        }
        "remove_member" => ProposalKind::RemoveMember { peer: peer()? },
        "promote_bootstrap" => ProposalKind::PromoteBootstrap { peer: peer()? },
        "demote_bootstrap" => ProposalKind::DemoteBootstrap { peer: peer()? },
        "set_policy" => ProposalKind::SetPolicy {
            name: field(cmd, "name")?.to_string(),
            value: field(cmd, "value")?.to_string(),
        },
        other => return Err(format!("unknown proposal kind `{other}`")),
    })
}

fn contacts_json(node: &Node) -> Value {
    let list: Vec<Value> = node
        .contacts()
        .into_iter()
        .map(|(peer, c)| json!({"peer_id": peer, "name": c.name, "keys": c.keys}))
        .collect();
    json!({"op": "contacts", "contacts": list})
}

fn body_fields(v: &mut Value, body: &[u8], filename: &Option<String>) {
    match filename {
        Some(f) => {
            v["filename"] = json!(f);
            v["data"] = json!(hex::encode(body));
        }
        None => v["text"] = json!(String::from_utf8_lossy(body)),
    }
}

pub fn inbound_json(m: &InboundMessage) -> Value {
    let mut v = json!({
        "op": "inbound",
        "msg_id": hex::encode(m.msg_id),
        "from": m.from.to_hex(),
        "created_at": m.created_at,
        "received_at": m.received_at,
        "path": m.path.as_str(),
    });
    body_fields(&mut v, &m.plaintext, &m.filename);
    v
}

fn outbound_json(m: &OutboundMessage) -> Value {
    let mut v = json!({
        "op": "outbound",
        "msg_id": hex::encode(m.msg_id),
        "to": m.to.to_hex(),
        "created_at": m.created_at,
        "state": m.state.as_str(),
        "error": m.error,
    });
    body_fields(&mut v, &m.plaintext, &m.filename);
    v
}

fn outbound_status_json(m: &OutboundMessage) -> Value {
    json!({
        "op": "status",
        "msg_id": hex::encode(m.msg_id),
        "to": m.to.to_hex(),
        "state": m.state.as_str(),
        "error": m.error,
    })
}

pub fn proposal_json(s: &ProposalStatus) -> Value {
    json!({
        "op": "proposal",
        "proposal": hex::encode(s.proposal.id()),
        "kind": s.proposal.kind,
        "proposer": s.proposal.proposer.to_hex(),
        "epoch": s.proposal.epoch,
        "created_at": s.proposal.created_at,
        "deadline": s.proposal.deadline,
        "tally": s.tally,
        "yes": s.yes,
        "no": s.no,
        "members": s.members,
        "applied": s.applied,
    })
}

pub fn event_json(ev: &NodeEvent) -> Value {
    match ev {
        NodeEvent::Inbound(m) => inbound_json(m),
        NodeEvent::Status { msg_id, state, error } => {
            json!({"op": "status", "msg_id": hex::encode(msg_id), "state": state.as_str(), "error": error})
        }
        NodeEvent::Proposal(s) => proposal_json(s),
        NodeEvent::Membership { epoch, members } => json!({"op": "membership", "epoch": epoch, "members": members}),
        NodeEvent::Quarantined { msg_cid, from, reason } => json!({
            "op": "quarantined", "msg_cid": msg_cid.to_hex(), "from": from.to_hex(), "reason": reason,
        }),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("cannot reach the node API at {addr}: {reason}")]
    Connect { addr: SocketAddr, reason: String },
    #[error("{0}")]
    Remote(String),
    #[error("API session closed")]
    Closed,
}

/// Minimal client for the local API, used by the command-line frontend.
pub struct ApiClient {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    next_id: u64,
}

impl ApiClient {
    pub async fn connect(addr: SocketAddr) -> Result<Self, ApiError> {
        let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/"))
            .await
            .map_err(|e| ApiError::Connect {
                addr,
                reason: e.to_string(),
            })?;
        Ok(Self { ws, next_id: 1 })
    }

    /// Sends one command and waits for its reply, skipping pushed events.
    pub async fn call(&mut self, mut cmd: Value) -> Result<Value, ApiError> {
        let id = self.next_id;
        self.next_id += 1;
        cmd["id"] = json!(id);
        self.ws
            .send(Message::text(cmd.to_string()))
            .await
            .map_err(|_| ApiError::Closed)?;
        loop {
            let v = self.next_message().await?;
            if v.get("id").and_then(Value::as_u64) == Some(id) {
                if v["op"] == "error" {
                    return Err(ApiError::Remote(v["error"].as_str().unwrap_or("error").to_string()));
                }
                return Ok(v);
            }
        }
    }

    /// Next message from the node, reply or event.
    pub async fn next_message(&mut self) -> Result<Value, ApiError> {
        loop {
            match self.ws.next().await {
                Some(Ok(Message::Text(t))) => {
                    if let Ok(v) = serde_json::from_str(t.as_str()) {
                        return Ok(v);
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return Err(ApiError::Closed),
                Some(Ok(_)) => {}
            }
        }
    }

    /// Sends a raw text frame (used to exercise error handling).
    pub async fn send_raw(&mut self, text: &str) -> Result<(), ApiError> {
        self.ws
            .send(Message::text(text.to_string()))
            .await
            .map_err(|_| ApiError::Closed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_policy() {
        assert!(origin_allowed(None));
        assert!(origin_allowed(Some("http://localhost:3000")));
        assert!(origin_allowed(Some("http://127.0.0.1")));
        assert!(origin_allowed(Some("http://[::1]:8080")));
        assert!(!origin_allowed(Some("https://evil.example")));
        assert!(!origin_allowed(Some("http://localhost.evil.example")));
        assert!(!origin_allowed(Some("null")));
    }
}
