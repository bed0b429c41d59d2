//! Ring endpoints over in-process channels or TCP.
//!
//! Loopback wires every rank up front (one worker per thread); TCP workers
//! discover each other through a rendezvous listener on rank 0, exchange
//! listen addresses, then connect to their ring successors directly. Both
//! transports move the same encoded frames, so byte accounting and codec
//! behavior are identical.
//!
//! TCP sends go through a writer thread per endpoint. All ranks send before
//! they receive inside every ring step; if sends blocked on full kernel
//! buffers the whole ring could deadlock on large frames, so the worker
//! only ever blocks on receives.

use crate::comm::wire::{Frame, GROUP_HELLO, GROUP_MAP, GROUP_REJECT, GROUP_RING, HEADER_LEN};
use crate::comm::{CommError, RingTopology, DEFAULT_TIMEOUT};
use std::io::{ErrorKind, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

#[derive(Default)]
struct CounterCells {
    data_bytes: AtomicU64,
    control_bytes: AtomicU64,
    frames: AtomicU64,
    total_bytes: AtomicU64,
}

/// Sent-side byte accounting for one endpoint. Payload bytes split by
/// frame class; `total_bytes` adds headers on top.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WireStats {
    pub data_bytes: u64,
    pub control_bytes: u64,
    pub frames: u64,
    pub total_bytes: u64,
}

impl CounterCells {
    fn charge(&self, frame: &Frame) {
        let payload = frame.payload.len() as u64;
        if frame.is_control() {
            self.control_bytes.fetch_add(payload, Ordering::Relaxed);
        } else {
            self.data_bytes.fetch_add(payload, Ordering::Relaxed);
        }
        self.frames.fetch_add(1, Ordering::Relaxed);
        self.total_bytes
            .fetch_add(payload + HEADER_LEN as u64, Ordering::Relaxed);
    }

    fn snapshot(&self) -> WireStats {
        WireStats {
            data_bytes: self.data_bytes.load(Ordering::Relaxed),
            control_bytes: self.control_bytes.load(Ordering::Relaxed),
            frames: self.frames.load(Ordering::Relaxed),
            total_bytes: self.total_bytes.load(Ordering::Relaxed),
        }
    }
}

enum Link {
    /// World of one; the ring never carries a frame.
    Solo,
    Loopback {
        tx: Sender<Vec<u8>>,
        rx: Receiver<Vec<u8>>,
    },
    Tcp {
        out: Sender<Vec<u8>>,
        write_err: Arc<Mutex<Option<String>>>,
        reader: TcpStream,
    },
}

/// One rank's handle on the ring: send to successor, receive from
/// predecessor. Owned by exactly one worker.
pub struct RingEndpoint {
    topo: RingTopology,
    timeout: Duration,
    counters: Arc<CounterCells>,
    link: Link,
}

impl std::fmt::Debug for RingEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RingEndpoint")
            .field("topo", &self.topo)
            .finish_non_exhaustive()
    }
}

impl RingEndpoint {
    pub fn topology(&self) -> RingTopology {
        self.topo
    }

    pub fn rank(&self) -> usize {
        self.topo.rank
    }

    pub fn world(&self) -> usize {
        self.topo.world
    }

    pub fn stats(&self) -> WireStats {
        self.counters.snapshot()
    }

    pub fn send_next(&mut self, frame: &Frame) -> Result<(), CommError> {
        self.counters.charge(frame);
        let bytes = frame.encode();
        match &mut self.link {
            Link::Solo => unreachable!("send on a single-rank ring"),
            Link::Loopback { tx, .. } => {
                tx.send(bytes).map_err(|_| CommError::Closed)?;
            }
            Link::Tcp { out, write_err, .. } => {
                if let Some(msg) = write_err.lock().unwrap().take() {
                    return Err(CommError::Protocol(format!("writer failed: {msg}")));
                }
                out.send(bytes).map_err(|_| CommError::Closed)?;
            }
        }
        Ok(())
    }

    pub fn recv_prev(&mut self) -> Result<Frame, CommError> {
        match &mut self.link {
            Link::Solo => unreachable!("receive on a single-rank ring"),
            Link::Loopback { rx, .. } => match rx.recv_timeout(self.timeout) {
                Ok(bytes) => Frame::decode_bytes(&bytes),
                Err(RecvTimeoutError::Timeout) => Err(CommError::Timeout(self.timeout)),
                Err(RecvTimeoutError::Disconnected) => Err(CommError::Closed),
            },
            Link::Tcp { reader, .. } => match Frame::decode(reader) {
                Err(CommError::Io(e)) => Err(match e.kind() {
                    ErrorKind::WouldBlock | ErrorKind::TimedOut => {
                        CommError::Timeout(self.timeout)
                    }
                    ErrorKind::UnexpectedEof => CommError::Closed,
                    _ => CommError::Io(e),
                }),
                other => other,
            },
        }
    }
}

/// Builds all endpoints of an in-process ring. Endpoint `r` is moved into
/// worker thread `r`; the ring is connected on return, so a barrier is
/// purely a logical sync.
pub fn bootstrap_loopback(world: usize) -> Vec<RingEndpoint> {
    bootstrap_loopback_with_timeout(world, DEFAULT_TIMEOUT)
}

pub fn bootstrap_loopback_with_timeout(world: usize, timeout: Duration) -> Vec<RingEndpoint> {
    assert!(world >= 1);
    if world == 1 {
        return vec![RingEndpoint {
            topo: RingTopology::new(1, 0),
            timeout,
            counters: Arc::default(),
            link: Link::Solo,
        }];
    }
    // queues[r] feeds rank r from its predecessor
    let (mut txs, mut rxs): (Vec<_>, Vec<_>) = (0..world).map(|_| channel::<Vec<u8>>()).unzip();
    let mut out = Vec::with_capacity(world);
    for rank in 0..world {
        let succ = (rank + 1) % world;
        out.push(RingEndpoint {
            topo: RingTopology::new(world, rank),
            timeout,
            counters: Arc::default(),
            link: Link::Loopback {
                tx: std::mem::replace(&mut txs[succ], channel().0),
                rx: std::mem::replace(&mut rxs[rank], channel().1),
            },
        });
    }
    out
}

/// TCP bootstrap parameters. `rendezvous` is rank 0's listen address; the
/// other ranks bind ephemeral ports and report them during the handshake.
#[derive(Clone, Debug)]
pub struct TcpBootstrap {
    pub world: usize,
    pub rank: usize,
    pub rendezvous: String,
    pub timeout: Duration,
}

/// Connects one rank into a TCP ring.
///
/// Rank 0 listens at the rendezvous address (or on `prebound` when the
/// caller already owns the listener, e.g. to learn an ephemeral port),
/// collects a hello from every other rank, validates that all agree on the
/// world size, and answers each with its ring successor's address. Every
/// rank then dials its successor and accepts its predecessor. No parameter
/// data moves here; only addresses and ranks.
pub fn bootstrap_tcp(
    cfg: &TcpBootstrap,
    prebound: Option<TcpListener>,
) -> Result<RingEndpoint, CommError> {
    assert!(cfg.rank < cfg.world, "rank {} of {}", cfg.rank, cfg.world);
    if cfg.world == 1 {
        return Ok(RingEndpoint {
            topo: RingTopology::new(1, 0),
            timeout: cfg.timeout,
            counters: Arc::default(),
            link: Link::Solo,
        });
    }
    let deadline = Instant::now() + cfg.timeout;
    let counters = Arc::<CounterCells>::default();
    let (succ_stream, pred_stream) = if cfg.rank == 0 {
        rendezvous_leader(cfg, prebound, deadline, &counters)?
    } else {
        rendezvous_follower(cfg, deadline, &counters)?
    };
    succ_stream.set_nodelay(true)?;
    pred_stream.set_nodelay(true)?;
    pred_stream.set_read_timeout(Some(cfg.timeout))?;

    let (out, out_rx) = channel::<Vec<u8>>();
    let write_err = Arc::new(Mutex::new(None::<String>));
    let err_slot = Arc::clone(&write_err);
    let mut writer = succ_stream;
    thread::Builder::new()
        .name(format!("ring-writer-{}", cfg.rank))
        .spawn(move || {
            while let Ok(bytes) = out_rx.recv() {
                if let Err(e) = writer.write_all(&bytes) {
                    *err_slot.lock().unwrap() = Some(e.to_string());
                    return;
                }
            }
        })
        .expect("spawn writer");

    Ok(RingEndpoint {
        topo: RingTopology::new(cfg.world, cfg.rank),
        timeout: cfg.timeout,
        counters,
        link: Link::Tcp {
            out,
            write_err,
            reader: pred_stream,
        },
    })
}

fn boot_err(rank: usize, reason: impl Into<String>) -> CommError {
    CommError::Bootstrap {
        rank,
        reason: reason.into(),
    }
}

fn send_counted(
    stream: &mut TcpStream,
    frame: &Frame,
    counters: &CounterCells,
) -> Result<(), CommError> {
    counters.charge(frame);
    stream.write_all(&frame.encode())?;
    Ok(())
}

fn addr_frame(group: u32, lead: &[u32], addr: &str) -> Frame {
    let bytes = addr.as_bytes();
    let mut words = lead.to_vec();
    for chunk in bytes.chunks(4) {
        let mut w = [0u8; 4];
        w[..chunk.len()].copy_from_slice(chunk);
        words.push(u32::from_le_bytes(w));
    }
    Frame::from_words(group, bytes.len() as u32, &words)
}

fn addr_from_frame(frame: &Frame, lead: usize) -> Result<String, CommError> {
    let words = frame.words();
    let len = frame.chunk as usize;
    let mut bytes = Vec::with_capacity(len);
    for w in &words[lead..] {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    if bytes.len() < len {
        return Err(CommError::BadFrame("address length".into()));
    }
    bytes.truncate(len);
    String::from_utf8(bytes).map_err(|_| CommError::BadFrame("address encoding".into()))
}

fn accept_by(
    listener: &TcpListener,
    deadline: Instant,
    rank: usize,
    what: &str,
) -> Result<TcpStream, CommError> {
    listener.set_nonblocking(true)?;
    loop {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                stream.set_read_timeout(Some(DEFAULT_TIMEOUT))?;
                return Ok(stream);
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(boot_err(rank, format!("timed out accepting {what}")));
                }
                thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn connect_by(addr: &str, deadline: Instant, rank: usize) -> Result<TcpStream, CommError> {
    loop {
        match TcpStream::connect(addr) {
            Ok(stream) => {
                stream.set_read_timeout(Some(DEFAULT_TIMEOUT))?;
                return Ok(stream);
            }
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(boot_err(rank, format!("connect to {addr} failed: {e}")));
                }
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

/// Rank 0: collect hellos, distribute successor addresses, join the ring.
fn rendezvous_leader(
    cfg: &TcpBootstrap,
    prebound: Option<TcpListener>,
    deadline: Instant,
    counters: &CounterCells,
) -> Result<(TcpStream, TcpStream), CommError> {
    let listener = match prebound {
        Some(l) => l,
        None => TcpListener::bind(&cfg.rendezvous)?,
    };
    let own_addr = listener.local_addr()?.to_string();
    let mut peers: Vec<Option<(TcpStream, String)>> = (1..cfg.world).map(|_| None).collect();
    let mut seen = 0;
    while seen < cfg.world - 1 {
        let mut stream = accept_by(&listener, deadline, 0, "hello")?;
        let hello = Frame::decode(&mut stream)?;
        if hello.group != GROUP_HELLO {
            return Err(CommError::Protocol(format!(
                "expected hello, got group {:#x}",
                hello.group
            )));
        }
        let words = hello.words();
        let (theirs, rank) = (words[0], words[1] as usize);
        if theirs as usize != cfg.world {
            let reject = Frame::from_words(GROUP_REJECT, 0, &[cfg.world as u32]);
            let _ = send_counted(&mut stream, &reject, counters);
            return Err(CommError::WorldMismatch {
                ours: cfg.world as u32,
                theirs,
            });
        }
        if rank == 0 || rank >= cfg.world || peers[rank - 1].is_some() {
            return Err(CommError::Protocol(format!("bad hello rank {rank}")));
        }
        peers[rank - 1] = Some((stream, addr_from_frame(&hello, 2)?));
        seen += 1;
    }
    // Every rank's successor address; rank world-1 wraps to this listener.
    let addrs: Vec<String> = std::iter::once(own_addr)
        .chain(peers.iter().map(|p| p.as_ref().unwrap().1.clone()))
        .collect();
    for (i, peer) in peers.iter_mut().enumerate() {
        let rank = i + 1;
        let succ = addrs[(rank + 1) % cfg.world].clone();
        let (stream, _) = peer.as_mut().unwrap();
        send_counted(stream, &addr_frame(GROUP_MAP, &[], &succ), counters)?;
    }
    let mut succ_stream = connect_by(&addrs[1], deadline, 0)?;
    send_counted(
        &mut succ_stream,
        &Frame::from_words(GROUP_RING, 0, &[0]),
        counters,
    )?;
    let pred_stream = accept_ring(&listener, deadline, cfg)?;
    Ok((succ_stream, pred_stream))
}

/// Any other rank: say hello, learn the successor, join the ring.
fn rendezvous_follower(
    cfg: &TcpBootstrap,
    deadline: Instant,
    counters: &CounterCells,
) -> Result<(TcpStream, TcpStream), CommError> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let own_addr = listener.local_addr()?.to_string();
    let mut control = connect_by(&cfg.rendezvous, deadline, cfg.rank)?;
    let hello = addr_frame(GROUP_HELLO, &[cfg.world as u32, cfg.rank as u32], &own_addr);
    send_counted(&mut control, &hello, counters)?;
    let reply = Frame::decode(&mut control)?;
    let succ_addr = match reply.group {
        GROUP_MAP => addr_from_frame(&reply, 0)?,
        GROUP_REJECT => {
            return Err(CommError::WorldMismatch {
                ours: cfg.world as u32,
                theirs: reply.words()[0],
            })
        }
        g => return Err(CommError::Protocol(format!("expected map, got {g:#x}"))),
    };
    let mut succ_stream = connect_by(&succ_addr, deadline, cfg.rank)?;
    send_counted(
        &mut succ_stream,
        &Frame::from_words(GROUP_RING, 0, &[cfg.rank as u32]),
        counters,
    )?;
    let pred_stream = accept_ring(&listener, deadline, cfg)?;
    Ok((succ_stream, pred_stream))
}

fn accept_ring(
    listener: &TcpListener,
    deadline: Instant,
    cfg: &TcpBootstrap,
) -> Result<TcpStream, CommError> {
    let topo = RingTopology::new(cfg.world, cfg.rank);
    let mut stream = accept_by(listener, deadline, cfg.rank, "ring predecessor")?;
    let frame = Frame::decode(&mut stream)?;
    if frame.group != GROUP_RING || frame.words()[0] as usize != topo.predecessor() {
        return Err(CommError::Protocol(format!(
            "rank {}: ring hello from wrong peer",
            cfg.rank
        )));
    }
    Ok(stream)
}
