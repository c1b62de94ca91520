//! Request/response transport for node-to-node RPC.
//!
//! Each request is one [`Frame`] answered by exactly one frame on the same
//! connection. Connections are pooled per endpoint and reused; a pooled
//! connection that turns out to be dead is replaced once before the call
//! fails. Every request payload starts with a [`RequestHeader`].

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;
use tokio::net::TcpStream;

use crate::crypto::sha256;
use crate::dht::{DhtError, NodeInfo};
use crate::wire::{read_frame, write_frame, Decoder, Encoder, Frame, WireError, MAX_FRAME_LEN};

pub mod msg {
    pub const CHANNEL_HELLO: u8 = 0x10;

    pub const PING: u8 = 0x20;
    pub const PONG: u8 = 0x21;
    pub const FIND_NODE: u8 = 0x22;
    pub const NODES: u8 = 0x23;
    pub const FIND_VALUE: u8 = 0x24;
    pub const VALUES: u8 = 0x25;
    pub const STORE: u8 = 0x26;
    pub const STORED: u8 = 0x27;

    pub const PIN_PUSH: u8 = 0x30;
    pub const PIN_ACK: u8 = 0x31;
    pub const GET_BLOCK: u8 = 0x32;
    pub const BLOCK: u8 = 0x33;
    pub const RELEASE: u8 = 0x34;
    pub const RELEASED: u8 = 0x35;

    pub const DMQ_ENQUEUE: u8 = 0x40;
    pub const DMQ_DRAIN: u8 = 0x41;
    pub const DMQ_ENTRIES: u8 = 0x42;
    pub const DMQ_ACK: u8 = 0x43;
    pub const DMQ_SYNC: u8 = 0x44;
    pub const DMQ_OK: u8 = 0x45;
    pub const DMQ_STATUS: u8 = 0x46;
    pub const DMQ_STATUS_RESP: u8 = 0x47;

    pub const PROPOSE: u8 = 0x50;
    pub const BALLOT: u8 = 0x51;
    pub const STATE_REQ: u8 = 0x52;
    pub const STATE_RESP: u8 = 0x53;
    pub const GOSSIP_OK: u8 = 0x54;

    pub const ERROR: u8 = 0x7f;
}

pub const DEFAULT_RPC_TIMEOUT: Duration = Duration::from_secs(3);
pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum RpcError {
    #[error("connect to {0} failed: {1}")]
    Connect(SocketAddr, std::io::Error),
    #[error("request to {0} timed out")]
    Timeout(SocketAddr),
    #[error("connection to {0} closed")]
    Closed(SocketAddr),
    #[error("remote error: {0}")]
    Remote(String),
    #[error("unexpected response type 0x{0:02x}")]
    UnexpectedResponse(u8),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Dht(#[from] DhtError),
}

/// Digest of the swarm pre-shared key; all zeros for the public swarm.
pub fn swarm_digest(swarm_key: Option<&[u8]>) -> [u8; 32] {
    match swarm_key {
        Some(k) => sha256(&[b"fybrr/swarm/v1", k]),
        None => [0; 32],
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RequestHeader {
    pub swarm_digest: [u8; 32],
    pub sender: NodeInfo,
}

impl RequestHeader {
    pub fn encode(&self) -> Encoder {
        self.sender.encode_into(Encoder::new().raw(&self.swarm_digest))
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self, DhtError> {
        Ok(Self {
            swarm_digest: d.array()?,
            sender: NodeInfo::decode_from(d)?,
        })
    }
}

pub fn error_frame(reason: impl AsRef<str>) -> Frame {
    Frame::new(msg::ERROR, reason.as_ref().as_bytes().to_vec())
}

/// Returns the payload when `frame` has type `expected`.
pub fn expect(frame: Frame, expected: u8) -> Result<Vec<u8>, RpcError> {
    if frame.kind == expected {
        Ok(frame.payload)
    } else if frame.kind == msg::ERROR {
        Err(RpcError::Remote(String::from_utf8_lossy(&frame.payload).into_owned()))
    } else {
        Err(RpcError::UnexpectedResponse(frame.kind))
    }
}

type Slot = Arc<tokio::sync::Mutex<Option<TcpStream>>>;

#[derive(Debug)]
pub struct RpcClient {
    pool: Mutex<HashMap<SocketAddr, Slot>>,
    timeout: Duration,
    connect_timeout: Duration,
}

impl Default for RpcClient {
    fn default() -> Self {
        Self::new(DEFAULT_RPC_TIMEOUT)
    }
}

impl RpcClient {
    pub fn new(timeout: Duration) -> Self {
        Self {
            pool: Mutex::new(HashMap::new()),
            timeout,
            connect_timeout: DEFAULT_CONNECT_TIMEOUT.min(timeout),
        }
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    fn slot(&self, addr: SocketAddr) -> Slot {
        self.pool.lock().entry(addr).or_default().clone()
    }

    /// Drops every pooled connection.
    pub fn clear(&self) {
        self.pool.lock().clear();
    }

    pub async fn call(&self, addr: SocketAddr, request: &Frame) -> Result<Frame, RpcError> {
        let slot = self.slot(addr);
        let mut guard = slot.lock().await;
        match tokio::time::timeout(self.timeout, self.call_locked(addr, &mut guard, request)).await {
            Ok(r) => r,
            Err(_) => {
                *guard = None;
                Err(RpcError::Timeout(addr))
            }
        }
    }

    async fn call_locked(
        &self,
        addr: SocketAddr,
        conn: &mut Option<TcpStream>,
        request: &Frame,
    ) -> Result<Frame, RpcError> {
        let reused = conn.is_some();
        match Self::exchange(addr, self.connect_timeout, conn, request).await {
            Ok(f) => Ok(f),
            Err(RpcError::Closed(_) | RpcError::Wire(WireError::Io(_))) if reused => {
                *conn = None;
                Self::exchange(addr, self.connect_timeout, conn, request).await
            }
            Err(e) => Err(e),
        }
    }

    async fn exchange(
        addr: SocketAddr,
        connect_timeout: Duration,
        conn: &mut Option<TcpStream>,
        request: &Frame,
    ) -> Result<Frame, RpcError> {
        if conn.is_none() {
            let stream = tokio::time::timeout(connect_timeout, TcpStream::connect(addr))
                .await
                .map_err(|_| RpcError::Timeout(addr))?
                .map_err(|e| RpcError::Connect(addr, e))?;
            let _ = stream.set_nodelay(true);
            *conn = Some(stream);
        }
        let stream = conn.as_mut().unwrap();
        let result = async {
            write_frame(stream, request).await?;
            read_frame(stream, MAX_FRAME_LEN).await?.ok_or(RpcError::Closed(addr))
        }
        .await;
        if result.is_err() {
            *conn = None;
        }
        result
    }
}
