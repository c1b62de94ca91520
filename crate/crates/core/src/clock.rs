//! Millisecond wall clock shared by every component of a node.
//!
//! Production nodes read the system clock. Tests and the simulation harness
//! use a manual clock so TTLs, deadlines, and expiry can be exercised without
//! sleeping.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

/// Unix time in milliseconds.
pub type UnixMs = u64;

#[derive(Debug)]
enum Source {
    System,
    Manual(AtomicU64),
}

#[derive(Clone, Debug)]
pub struct Clock {
    source: Arc<Source>,
}

impl Default for Clock {
    fn default() -> Self {
        Self::system()
    }
}

impl Clock {
    pub fn system() -> Self {
        Self {
            source: Arc::new(Source::System),
        }
    }

    pub fn manual(start: UnixMs) -> Self {
        Self {
            source: Arc::new(Source::Manual(AtomicU64::new(start))),
        }
    }

    pub fn now_ms(&self) -> UnixMs {
        match &*self.source {
            Source::System => system_now_ms(),
            Source::Manual(t) => t.load(Ordering::SeqCst),
        }
    }

    pub fn is_manual(&self) -> bool {
        matches!(&*self.source, Source::Manual(_))
    }

    /// Moves a manual clock forward. No effect on the system clock.
    pub fn advance(&self, ms: u64) {
        if let Source::Manual(t) = &*self.source {
            t.fetch_add(ms, Ordering::SeqCst);
        }
    }

    /// Sets a manual clock, never moving it backwards.
    pub fn set(&self, ms: UnixMs) {
        if let Source::Manual(t) = &*self.source {
            t.fetch_max(ms, Ordering::SeqCst);
        }
    }
}

pub fn system_now_ms() -> UnixMs {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or_default()
}
