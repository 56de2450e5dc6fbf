//! The socket scheduler framework and its two policies: AMAP writes as much
//! as possible the moment cells or socket space appear; KIST runs on a fixed
//! interval, limits each socket by live TCP state, and applies circuit
//! priority across all pending sockets.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use crate::engine::{Engine, NodeId, SimTime};
use crate::relay::{ConnId, OUTBUF_FLUSH_THRESHOLD};
use crate::sim::{flush_outbuf_bytes, Ev, Sim};
use crate::tcp::TcpInfo;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Amap,
    Kist,
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Policy::Amap => write!(f, "amap"),
            Policy::Kist => write!(f, "kist"),
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "amap" => Ok(Policy::Amap),
            "kist" => Ok(Policy::Kist),
            other => Err(format!("unknown policy `{other}` (expected amap|kist)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PolicyConfig {
    pub policy: Policy,
    pub kist_interval: SimTime,
    /// Ablation switch; disabling it removes the per-socket write limit while
    /// keeping the interval-driven global priority loop.
    pub per_socket_limit_enabled: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            policy: Policy::Kist,
            kist_interval: SimTime::from_millis(10),
            per_socket_limit_enabled: true,
        }
    }
}

impl PolicyConfig {
    pub fn amap() -> Self {
        PolicyConfig { policy: Policy::Amap, ..Default::default() }
    }

    pub fn kist(interval: SimTime) -> Self {
        assert!(interval > SimTime::ZERO, "kist interval must be positive");
        PolicyConfig { policy: Policy::Kist, kist_interval: interval, ..Default::default() }
    }

    pub fn is_amap(&self) -> bool {
        self.policy == Policy::Amap
    }

    pub fn is_kist(&self) -> bool {
        self.policy == Policy::Kist
    }
}

/// Per-socket write limit from a TCP snapshot:
/// `max(0, 2*cwnd*mss - una*mss - notsent)`.
///
/// The negative raw value after loss shrinks the window clamps to zero.
pub fn socket_limit(info: &TcpInfo) -> u64 {
    let cwnd = i128::from(info.cwnd);
    let una = i128::from(info.una);
    let mss = i128::from(info.mss);
    let raw = 2 * cwnd * mss - una * mss - i128::from(info.notsent);
    raw.max(0) as u64
}

#[derive(Debug, Clone, Copy)]
struct PendEntry {
    key: f64,
    conn: ConnId,
}

impl PartialEq for PendEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for PendEntry {}
impl PartialOrd for PendEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for PendEntry {
    // Reversed so the max-heap pops the minimum (key, conn) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key.total_cmp(&self.key).then(other.conn.cmp(&self.conn))
    }
}

/// Per-round socket bookkeeping: the tick's cached TCP snapshot and the bytes
/// flushed to the kernel so far this round.
#[derive(Debug, Clone, Copy)]
pub struct SocketRound {
    pub info: TcpInfo,
    pub written: u64,
}

/// The set of write-pending connections, ordered by the minimum EWMA value
/// among each connection's pending circuits (lower pops first).
#[derive(Debug, Default)]
pub struct PendingSet {
    heap: BinaryHeap<PendEntry>,
    rounds: BTreeMap<ConnId, SocketRound>,
}

impl PendingSet {
    pub fn new() -> PendingSet {
        PendingSet::default()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Adds a connection at set-build time with its cached snapshot.
    pub fn insert(&mut self, conn: ConnId, key: f64, info: TcpInfo) {
        self.heap.push(PendEntry { key, conn });
        self.rounds.insert(conn, SocketRound { info, written: 0 });
    }

    /// Returns the connection to the set with a refreshed priority key.
    pub fn push(&mut self, conn: ConnId, key: f64) {
        debug_assert!(self.rounds.contains_key(&conn));
        self.heap.push(PendEntry { key, conn });
    }

    pub fn pop_min(&mut self) -> Option<(f64, ConnId)> {
        self.heap.pop().map(|e| (e.key, e.conn))
    }

    pub fn peek_min(&self) -> Option<(f64, ConnId)> {
        self.heap.peek().map(|e| (e.key, e.conn))
    }

    pub fn round(&self, conn: ConnId) -> &SocketRound {
        &self.rounds[&conn]
    }

    pub fn add_written(&mut self, conn: ConnId, bytes: u64) {
        self.rounds.get_mut(&conn).expect("member").written += bytes;
    }
}

impl Sim {
    /// Builds the tick's pending set: exactly the connections with queued
    /// cells (or output-buffer residue) whose kernel buffer is writable. Takes
    /// one TCP snapshot per member; idle sockets cost nothing.
    pub fn get_pending_sockets(&mut self, node: NodeId, now: SimTime) -> PendingSet {
        let Some(r) = self.relay_of(node) else {
            return PendingSet::new();
        };
        let mut set = PendingSet::new();
        let conn_ids: Vec<ConnId> = self.relays[r].scheds.keys().copied().collect();
        for conn_id in conn_ids {
            let conn = &self.conns[conn_id.0 as usize];
            if !conn.open || !self.relays[r].wants_write(conn_id) {
                continue;
            }
            let pipe = conn.pipe(conn.dir_from(node));
            if !pipe.tcp.writable() {
                continue;
            }
            let key = self.relays[r].best_key(conn_id, now).unwrap_or(f64::INFINITY);
            let info = pipe.tcp.info();
            self.metrics.counters.tcpinfo_calls += 1;
            set.insert(conn_id, key, info);
        }
        set
    }

    fn kist_can_write(&self, node: NodeId, r: usize, conn_id: ConnId, written: u64, limit: u64) -> bool {
        let conn = &self.conns[conn_id.0 as usize];
        let pipe = conn.pipe(conn.dir_from(node));
        // Bytes staged in the outbuf this round count against the headroom;
        // socket-buffer free space is deliberately not consulted.
        let staged = self.relays[r].scheds[&conn_id].outbuf.len_bytes();
        pipe.tcp.writable() && written.saturating_add(staged) < limit
    }

    /// One KIST scheduling pass over this relay's pending sockets.
    pub fn kist_tick(&mut self, engine: &mut Engine<Ev>, node: NodeId) {
        let Some(r) = self.relay_of(node) else {
            return;
        };
        let now = engine.now();
        let calls_before = self.metrics.counters.tcpinfo_calls;
        let mut set = self.get_pending_sockets(node, now);
        let snapshots = self.metrics.counters.tcpinfo_calls - calls_before;
        self.metrics.record_kist_tick(now, set.len() as u64, snapshots);

        while let Some((_key, conn_id)) = set.pop_min() {
            self.relays[r].circ_flush(conn_id, 1, now);
            let limit = if self.params.policy.per_socket_limit_enabled {
                socket_limit(&set.round(conn_id).info)
            } else {
                u64::MAX
            };
            let written = set.round(conn_id).written;
            let candidate = self.relays[r].has_pending_cells(conn_id)
                && self.kist_can_write(node, r, conn_id, written, limit);
            let new_key = self.relays[r].best_key(conn_id, now).unwrap_or(f64::INFINITY);
            // Flush the outbuf only when the next decision would move to a
            // different socket, or when no pending socket remains.
            let next_is_same = candidate
                && set
                    .peek_min()
                    .is_none_or(|(k2, c2)| match new_key.total_cmp(&k2) {
                        Ordering::Less => true,
                        Ordering::Equal => conn_id < c2,
                        Ordering::Greater => false,
                    });
            let mut repush = candidate;
            if !next_is_same {
                let flushed = self.flush_relay_outbuf(engine, node, r, conn_id, limit.saturating_sub(written));
                set.add_written(conn_id, flushed);
                if set.round(conn_id).written > limit {
                    self.metrics.counters.limit_violations += 1;
                }
                repush = candidate && self.kist_can_write(node, r, conn_id, set.round(conn_id).written, limit);
            }
            if repush {
                set.push(conn_id, new_key);
            }
        }
    }

    /// AMAP: triggered per connection by cell enqueues and writable
    /// notifications; drains circuits through the 32 KiB outbuf into the
    /// kernel until backpressure or nothing is left. No per-socket limit.
    pub fn amap_run(&mut self, engine: &mut Engine<Ev>, node: NodeId, conn_id: ConnId) {
        let Some(r) = self.relay_of(node) else {
            return;
        };
        if !self.conns[conn_id.0 as usize].open {
            return;
        }
        let now = engine.now();
        loop {
            // Fill the outbuf until the flush threshold or the circuits drain.
            loop {
                let sched = &self.relays[r].scheds[&conn_id];
                if sched.outbuf.len_bytes() >= OUTBUF_FLUSH_THRESHOLD || !self.relays[r].has_pending_cells(conn_id) {
                    break;
                }
                self.relays[r].circ_flush(conn_id, 1, now);
            }
            if self.relays[r].scheds[&conn_id].outbuf.is_empty() {
                break;
            }
            let flushed = self.flush_relay_outbuf(engine, node, r, conn_id, u64::MAX);
            let dir = self.conns[conn_id.0 as usize].dir_from(node);
            if !self.conns[conn_id.0 as usize].pipe(dir).tcp.writable() {
                // Kernel pushed back; the rest waits for the writable event.
                break;
            }
            if flushed == 0 || !self.relays[r].wants_write(conn_id) {
                break;
            }
        }
    }

    /// Moves outbuf bytes into the kernel for one relay connection, recording
    /// application queue times, then pumps the pipe.
    fn flush_relay_outbuf(&mut self, engine: &mut Engine<Ev>, node: NodeId, r: usize, conn_id: ConnId, budget: u64) -> u64 {
        let now = engine.now();
        let conn = &mut self.conns[conn_id.0 as usize];
        let dir = conn.dir_from(node);
        let sched = self.relays[r].scheds.get_mut(&conn_id).expect("attached");
        let flushed = flush_outbuf_bytes(&mut sched.outbuf, conn.pipe_mut(dir), budget, now, true, &mut self.metrics);
        if flushed > 0 {
            self.pump(engine, conn_id, dir);
        }
        flushed
    }
}
