//! Worker bootstrap, ring transports, and the ring allreduce.
//!
//! Workers form a directed ring: every message goes to the successor rank
//! and arrives from the predecessor, over either in-process channels
//! (loopback, one worker per thread) or TCP (one worker per process, a
//! rendezvous listener on rank 0 for discovery). Links are reliable and
//! FIFO per direction; progress requires all ranks to participate, so a
//! stalled peer surfaces as a receive timeout rather than a hang.
//!
//! The allreduce is reduce-scatter followed by allgather over `P`
//! contiguous chunks. Unusually, the reduce-scatter does not fold partial
//! sums sequentially: each in-flight chunk carries a stack of canonical
//! tree blocks ([`crate::pairwise::BlockMerge`]), so the finished sum is
//! the canonical tree over ranks. That makes the result independent of
//! which rank a chunk started at, and lines the cross-rank reduction up
//! with the in-rank batch reduction so the same total appears at every
//! world size.

mod allreduce;
mod transport;
pub mod wire;

pub use allreduce::{allgather_flags, barrier, chunk_span, ring_allreduce};
pub use transport::{bootstrap_loopback, bootstrap_tcp, RingEndpoint, TcpBootstrap, WireStats};

use std::time::Duration;

/// Ring shape; all ranks must agree on `world`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RingTopology {
    pub world: usize,
    pub rank: usize,
}

impl RingTopology {
    pub fn new(world: usize, rank: usize) -> RingTopology {
        assert!(world >= 1 && rank < world, "rank {rank} of {world}");
        RingTopology { world, rank }
    }

    pub fn successor(&self) -> usize {
        (self.rank + 1) % self.world
    }

    pub fn predecessor(&self) -> usize {
        (self.rank + self.world - 1) % self.world
    }
}

/// Default patience for receives and bootstrap connects.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, thiserror::Error)]
pub enum CommError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("receive timed out after {0:?}")]
    Timeout(Duration),
    #[error("peer closed the connection")]
    Closed,
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported wire version {0}")]
    BadVersion(u8),
    #[error("malformed frame: {0}")]
    BadFrame(String),
    #[error("unexpected frame: {0}")]
    Protocol(String),
    #[error("world size mismatch: ours {ours}, peer {theirs}")]
    WorldMismatch { ours: u32, theirs: u32 },
    #[error("bootstrap failed at rank {rank}: {reason}")]
    Bootstrap { rank: usize, reason: String },
}
