use super::{decode, encode, Message, ProtocolError, Result};
use std::collections::VecDeque;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

/// Byte and message counters for one channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub messages: u64,
    /// Accumulated simulated transfer time.
    pub sim_micros: u64,
}

impl ChannelStats {
    pub fn merge(&self, other: &ChannelStats) -> ChannelStats {
        ChannelStats {
            bytes_up: self.bytes_up + other.bytes_up,
            bytes_down: self.bytes_down + other.bytes_down,
            messages: self.messages + other.messages,
            sim_micros: self.sim_micros + other.sim_micros,
        }
    }
}

/// Shared counters; readable from any thread.
#[derive(Debug, Default)]
pub struct StatsHandle {
    bytes_up: AtomicU64,
    bytes_down: AtomicU64,
    messages: AtomicU64,
    sim_micros: AtomicU64,
}

impl StatsHandle {
    pub fn snapshot(&self) -> ChannelStats {
        ChannelStats {
            bytes_up: self.bytes_up.load(Ordering::Acquire),
            bytes_down: self.bytes_down.load(Ordering::Acquire),
            messages: self.messages.load(Ordering::Acquire),
            sim_micros: self.sim_micros.load(Ordering::Acquire),
        }
    }

    fn record(&self, dir: Direction, len: usize, micros: u64) {
        match dir {
            Direction::Up => self.bytes_up.fetch_add(len as u64, Ordering::AcqRel),
            Direction::Down => self.bytes_down.fetch_add(len as u64, Ordering::AcqRel),
        };
        self.messages.fetch_add(1, Ordering::AcqRel);
        self.sim_micros.fetch_add(micros, Ordering::AcqRel);
    }
}

/// Up is client to server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// Observer called with every message before it is delivered.
pub type AuditHook = Arc<dyn Fn(Direction, &Message, &[u8]) + Send + Sync>;

pub trait Transport {
    fn send(&mut self, msg: &Message) -> Result<()>;
    fn recv(&mut self) -> Result<Message>;
    fn stats(&self) -> ChannelStats;
    fn close(&mut self);
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimConfig {
    pub latency_micros: u64,
    /// Zero means unlimited.
    pub bytes_per_sec: u64,
}

impl SimConfig {
    fn transfer_micros(&self, len: usize) -> u64 {
        let wire = (len as u64).saturating_mul(1_000_000).checked_div(self.bytes_per_sec).unwrap_or(0);
        self.latency_micros + wire
    }
}

#[derive(Default)]
struct Queues {
    up: VecDeque<Vec<u8>>,
    down: VecDeque<Vec<u8>>,
    closed: bool,
}

struct Shared {
    queues: Mutex<Queues>,
    ready: Condvar,
    stats: Arc<StatsHandle>,
    config: SimConfig,
    hooks: Mutex<Vec<AuditHook>>,
}

/// One end of an in-process channel. Messages travel as encoded bytes.
pub struct SimEndpoint {
    shared: Arc<Shared>,
    outgoing: Direction,
}

/// Creates a connected (client, server) endpoint pair.
pub fn sim_pair(config: SimConfig) -> (SimEndpoint, SimEndpoint) {
    let shared = Arc::new(Shared {
        queues: Mutex::new(Queues::default()),
        ready: Condvar::new(),
        stats: Arc::new(StatsHandle::default()),
        config,
        hooks: Mutex::new(Vec::new()),
    });
    (
        SimEndpoint { shared: shared.clone(), outgoing: Direction::Up },
        SimEndpoint { shared, outgoing: Direction::Down },
    )
}

impl SimEndpoint {
    pub fn stats_handle(&self) -> Arc<StatsHandle> {
        self.shared.stats.clone()
    }

    pub fn add_audit_hook(&self, hook: AuditHook) {
        self.shared.hooks.lock().unwrap().push(hook);
    }

    /// Number of messages waiting for this endpoint.
    pub fn pending(&self) -> usize {
        let q = self.shared.queues.lock().unwrap();
        match self.outgoing {
            Direction::Up => q.down.len(),
            Direction::Down => q.up.len(),
        }
    }

    pub fn try_recv(&mut self) -> Result<Option<Message>> {
        let mut q = self.shared.queues.lock().unwrap();
        if q.closed {
            return Err(ProtocolError::ChannelClosed);
        }
        let next = match self.outgoing {
            Direction::Up => q.down.pop_front(),
            Direction::Down => q.up.pop_front(),
        };
        drop(q);
        next.map(|b| decode(&b)).transpose()
    }
}

impl Transport for SimEndpoint {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let bytes = encode(msg)?;
        let mut q = self.shared.queues.lock().unwrap();
        if q.closed {
            return Err(ProtocolError::ChannelClosed);
        }
        for hook in self.shared.hooks.lock().unwrap().iter() {
            hook(self.outgoing, msg, &bytes);
        }
        let micros = self.shared.config.transfer_micros(bytes.len());
        self.shared.stats.record(self.outgoing, bytes.len(), micros);
        match self.outgoing {
            Direction::Up => q.up.push_back(bytes),
            Direction::Down => q.down.push_back(bytes),
        }
        drop(q);
        self.shared.ready.notify_all();
        Ok(())
    }

    /// Blocks until a message arrives or the channel closes.
    fn recv(&mut self) -> Result<Message> {
        let mut q = self.shared.queues.lock().unwrap();
        loop {
            if q.closed {
                return Err(ProtocolError::ChannelClosed);
            }
            let next = match self.outgoing {
                Direction::Up => q.down.pop_front(),
                Direction::Down => q.up.pop_front(),
            };
            if let Some(b) = next {
                drop(q);
                return decode(&b);
            }
            q = self.shared.ready.wait(q).unwrap();
        }
    }

    fn stats(&self) -> ChannelStats {
        self.shared.stats.snapshot()
    }

    fn close(&mut self) {
        self.shared.queues.lock().unwrap().closed = true;
        self.shared.ready.notify_all();
    }
}

/// Length-prefixed framing over any reliable byte stream.
pub struct StreamTransport<S> {
    stream: S,
    outgoing: Direction,
    stats: Arc<StatsHandle>,
    closed: bool,
}

impl<S: Read + Write> StreamTransport<S> {
    /// `outgoing` is the direction this end sends in.
    pub fn new(stream: S, outgoing: Direction) -> Self {
        Self { stream, outgoing, stats: Arc::new(StatsHandle::default()), closed: false }
    }

    pub fn stats_handle(&self) -> Arc<StatsHandle> {
        self.stats.clone()
    }

    pub fn into_inner(self) -> S {
        self.stream
    }
}

fn io_err(e: std::io::Error) -> ProtocolError {
    match e.kind() {
        std::io::ErrorKind::UnexpectedEof
        | std::io::ErrorKind::BrokenPipe
        | std::io::ErrorKind::ConnectionReset
        | std::io::ErrorKind::ConnectionAborted => ProtocolError::ChannelClosed,
        _ => ProtocolError::Io(e.to_string()),
    }
}

impl<S: Read + Write> Transport for StreamTransport<S> {
    fn send(&mut self, msg: &Message) -> Result<()> {
        if self.closed {
            return Err(ProtocolError::ChannelClosed);
        }
        let bytes = encode(msg)?;
        let len = u32::try_from(bytes.len())
            .map_err(|_| ProtocolError::InvariantViolation("frame exceeds u32".into()))?;
        self.stream.write_all(&len.to_le_bytes()).map_err(io_err)?;
        self.stream.write_all(&bytes).map_err(io_err)?;
        self.stream.flush().map_err(io_err)?;
        self.stats.record(self.outgoing, bytes.len(), 0);
        Ok(())
    }

    fn recv(&mut self) -> Result<Message> {
        if self.closed {
            return Err(ProtocolError::ChannelClosed);
        }
        let mut len = [0u8; 4];
        self.stream.read_exact(&mut len).map_err(io_err)?;
        let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
        self.stream.read_exact(&mut buf).map_err(io_err)?;
        decode(&buf)
    }

    fn stats(&self) -> ChannelStats {
        self.stats.snapshot()
    }

    fn close(&mut self) {
        self.closed = true;
    }
}
