//! Relay data plane: 512-byte cells, per-circuit FIFO queues with EWMA
//! priority, per-connection circuit schedulers, and the application output
//! buffer between circuit queues and the kernel.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::engine::SimTime;

/// Fixed cell size on the wire.
pub const CELL_LEN: u64 = 512;
/// Usable payload per cell; the rest is the simulated header.
pub const CELL_PAYLOAD: u64 = 498;
/// AMAP's output-buffer flush threshold.
pub const OUTBUF_FLUSH_THRESHOLD: u64 = 32 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CircuitId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConnId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DownloadId(pub u64);

/// Direction of travel along a circuit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TravelDir {
    ToServer,
    ToClient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    /// Client-issued request for `size` payload bytes.
    Request { size: u64 },
    /// Server payload; `last` marks the final cell of a download.
    Payload { payload_len: u16, last: bool },
}

/// Per-hop pipeline timestamps; restamped at every relay the cell crosses.
#[derive(Debug, Clone, Copy, Default)]
pub struct CellTrace {
    pub enqueued_to_circuit: SimTime,
    pub written_to_outbuf: SimTime,
    pub flushed_to_kernel: SimTime,
    pub first_transmitted: SimTime,
}

/// A 512-byte unit of circuit traffic. Onion encryption is modeled as the
/// identity transform; the circuit id rides in the clear.
#[derive(Debug, Clone)]
pub struct Cell {
    pub id: CellId,
    pub circuit: CircuitId,
    pub download: DownloadId,
    pub kind: CellKind,
    pub trace: CellTrace,
}

/// Decayed cell counter: halves every `halflife` of idle time, increments by
/// the cells sent. Lower values mean better (bursty/low-volume) priority.
#[derive(Debug, Clone, Copy)]
pub struct Ewma {
    value: f64,
    last_decay_at: SimTime,
    halflife: SimTime,
}

impl Ewma {
    pub fn new(halflife: SimTime) -> Ewma {
        Ewma {
            value: 0.0,
            last_decay_at: SimTime::ZERO,
            halflife,
        }
    }

    /// Current value with decay applied lazily at read time; no mutation.
    pub fn decayed(&self, now: SimTime) -> f64 {
        debug_assert!(now >= self.last_decay_at);
        let elapsed = (now - self.last_decay_at).as_nanos() as f64;
        let halflives = elapsed / self.halflife.as_nanos() as f64;
        self.value * (-halflives).exp2()
    }

    /// Applies decay up to `now`, then adds `cells_sent`.
    pub fn update(&mut self, now: SimTime, cells_sent: u32) -> f64 {
        self.value = self.decayed(now) + f64::from(cells_sent);
        self.last_decay_at = now;
        self.value
    }
}

/// Per-relay, per-direction circuit cell FIFO plus its priority counter.
#[derive(Debug)]
pub struct LegQueue {
    pub cells: VecDeque<Cell>,
    pub ewma: Ewma,
}

impl LegQueue {
    fn new(halflife: SimTime) -> LegQueue {
        LegQueue {
            cells: VecDeque::new(),
            ewma: Ewma::new(halflife),
        }
    }
}

/// One circuit's state at one relay: the two neighbor connections and a cell
/// queue per direction of travel.
#[derive(Debug)]
pub struct CircuitLeg {
    pub circuit: CircuitId,
    pub conn_to_client: ConnId,
    pub conn_to_server: ConnId,
    pub to_server: LegQueue,
    pub to_client: LegQueue,
}

impl CircuitLeg {
    pub fn queue_for_conn(&mut self, conn: ConnId) -> &mut LegQueue {
        if conn == self.conn_to_server {
            &mut self.to_server
        } else {
            debug_assert_eq!(conn, self.conn_to_client);
            &mut self.to_client
        }
    }

    fn queue_for_conn_ref(&self, conn: ConnId) -> &LegQueue {
        if conn == self.conn_to_server {
            &self.to_server
        } else {
            &self.to_client
        }
    }
}

/// Application output byte buffer in front of one connection. Holds whole
/// cells; the head cell may be partially flushed to the kernel.
#[derive(Debug, Default)]
pub struct Outbuf {
    cells: VecDeque<Cell>,
    head_flushed: u64,
    len_bytes: u64,
}

impl Outbuf {
    pub fn push(&mut self, cell: Cell) {
        self.cells.push_back(cell);
        self.len_bytes += CELL_LEN;
    }

    pub fn len_bytes(&self) -> u64 {
        self.len_bytes
    }

    pub fn is_empty(&self) -> bool {
        self.len_bytes == 0
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// Consumes exactly `budget` bytes (callers cap it at `len_bytes`),
    /// returning each cell completed by this flush along with the byte count
    /// into the flush at which it completed. A partially consumed head cell
    /// stays queued.
    pub fn take(&mut self, budget: u64) -> Vec<(u64, Cell)> {
        debug_assert!(budget <= self.len_bytes);
        let mut consumed = 0u64;
        let mut done = Vec::new();
        let mut remaining = budget;
        while remaining > 0 {
            let head_left = CELL_LEN - self.head_flushed;
            if head_left <= remaining {
                remaining -= head_left;
                consumed += head_left;
                self.head_flushed = 0;
                let cell = self.cells.pop_front().expect("non-empty outbuf");
                done.push((consumed, cell));
            } else {
                self.head_flushed += remaining;
                consumed += remaining;
                remaining = 0;
            }
        }
        self.len_bytes -= budget;
        done
    }

    /// Cells currently resident, counting a partially flushed head.
    pub fn drain_cells(&mut self) -> Vec<Cell> {
        self.len_bytes = 0;
        self.head_flushed = 0;
        self.cells.drain(..).collect()
    }
}

/// Scheduler state attached to one connection endpoint: the set of circuits
/// with cells pending for this connection, plus its output buffer.
#[derive(Debug, Default)]
pub struct ConnSched {
    pub pending: BTreeSet<CircuitId>,
    pub outbuf: Outbuf,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RelayError {
    #[error("unknown circuit {0:?}")]
    UnknownCircuit(CircuitId),
    #[error("no pending circuits for connection {0:?}")]
    EmptyScheduler(ConnId),
}

/// The circuit-forwarding state of one relay.
#[derive(Debug)]
pub struct RelayNode {
    pub legs: BTreeMap<CircuitId, CircuitLeg>,
    pub scheds: BTreeMap<ConnId, ConnSched>,
    halflife: SimTime,
}

impl RelayNode {
    pub fn new(halflife: SimTime) -> RelayNode {
        RelayNode {
            legs: BTreeMap::new(),
            scheds: BTreeMap::new(),
            halflife,
        }
    }

    pub fn attach_conn(&mut self, conn: ConnId) {
        self.scheds.entry(conn).or_default();
    }

    pub fn attach_circuit(&mut self, circuit: CircuitId, conn_to_client: ConnId, conn_to_server: ConnId) {
        self.attach_conn(conn_to_client);
        self.attach_conn(conn_to_server);
        self.legs.insert(
            circuit,
            CircuitLeg {
                circuit,
                conn_to_client,
                conn_to_server,
                to_server: LegQueue::new(self.halflife),
                to_client: LegQueue::new(self.halflife),
            },
        );
    }

    /// Tears down a circuit, returning any cells still queued on its legs so
    /// the caller can account for them as drops.
    pub fn detach_circuit(&mut self, circuit: CircuitId) -> Vec<Cell> {
        let Some(mut leg) = self.legs.remove(&circuit) else {
            return Vec::new();
        };
        for sched in self.scheds.values_mut() {
            sched.pending.remove(&circuit);
        }
        let mut cells: Vec<Cell> = leg.to_server.cells.drain(..).collect();
        cells.extend(leg.to_client.cells.drain(..));
        cells
    }

    /// Appends a cell to the circuit's queue in its direction of travel,
    /// registers the circuit with the next-hop connection's scheduler, and
    /// returns that connection for the policy trigger.
    pub fn enqueue_cell(&mut self, circuit: CircuitId, dir: TravelDir, mut cell: Cell, now: SimTime) -> Result<ConnId, RelayError> {
        let leg = self.legs.get_mut(&circuit).ok_or(RelayError::UnknownCircuit(circuit))?;
        let conn = match dir {
            TravelDir::ToServer => leg.conn_to_server,
            TravelDir::ToClient => leg.conn_to_client,
        };
        cell.trace = CellTrace {
            enqueued_to_circuit: now,
            ..CellTrace::default()
        };
        leg.queue_for_conn(conn).cells.push_back(cell);
        self.scheds
            .get_mut(&conn)
            .expect("scheduler attached with circuit")
            .pending
            .insert(circuit);
        Ok(conn)
    }

    /// The scheduler invariant: a circuit is pending for a connection iff it
    /// has at least one queued cell destined for it.
    pub fn check_pending_invariant(&self, conn: ConnId) -> bool {
        let Some(sched) = self.scheds.get(&conn) else {
            return true;
        };
        self.legs.values().all(|leg| {
            let queued = !leg.queue_for_conn_ref(conn).cells.is_empty()
                && (leg.conn_to_server == conn || leg.conn_to_client == conn);
            queued == sched.pending.contains(&leg.circuit)
        })
    }

    /// Minimum decayed EWMA among the connection's pending circuits; the
    /// cross-connection priority key.
    pub fn best_key(&self, conn: ConnId, now: SimTime) -> Option<f64> {
        let sched = self.scheds.get(&conn)?;
        sched
            .pending
            .iter()
            .map(|c| self.legs[c].queue_for_conn_ref(conn).ewma.decayed(now))
            .min_by(|a, b| a.total_cmp(b))
    }

    /// Picks the pending circuit with the minimum decayed EWMA value, ties
    /// broken by the lowest circuit id.
    pub fn pop_best_circuit(&self, conn: ConnId, now: SimTime) -> Result<CircuitId, RelayError> {
        let sched = self.scheds.get(&conn).ok_or(RelayError::EmptyScheduler(conn))?;
        sched
            .pending
            .iter()
            .min_by(|a, b| {
                let va = self.legs[a].queue_for_conn_ref(conn).ewma.decayed(now);
                let vb = self.legs[b].queue_for_conn_ref(conn).ewma.decayed(now);
                va.total_cmp(&vb).then(a.cmp(b))
            })
            .copied()
            .ok_or(RelayError::EmptyScheduler(conn))
    }

    /// Pops the best circuit and moves up to `n_cells` of its cells into the
    /// connection's outbuf, stamping them and charging the circuit's EWMA.
    /// Returns the cells moved (zero when nothing is pending).
    pub fn circ_flush(&mut self, conn: ConnId, n_cells: u32, now: SimTime) -> u32 {
        let Ok(circuit) = self.pop_best_circuit(conn, now) else {
            return 0;
        };
        let leg = self.legs.get_mut(&circuit).expect("pending circuit has a leg");
        let queue = leg.queue_for_conn(conn);
        let mut moved = 0u32;
        let sched = self.scheds.get_mut(&conn).expect("attached");
        while moved < n_cells {
            let Some(mut cell) = queue.cells.pop_front() else {
                break;
            };
            cell.trace.written_to_outbuf = now;
            sched.outbuf.push(cell);
            moved += 1;
        }
        queue.ewma.update(now, moved);
        if queue.cells.is_empty() {
            sched.pending.remove(&circuit);
        }
        moved
    }

    pub fn has_pending_cells(&self, conn: ConnId) -> bool {
        self.scheds.get(&conn).is_some_and(|s| !s.pending.is_empty())
    }

    /// Write-pending: circuit cells queued or output-buffer residue to flush.
    pub fn wants_write(&self, conn: ConnId) -> bool {
        self.scheds
            .get(&conn)
            .is_some_and(|s| !s.pending.is_empty() || !s.outbuf.is_empty())
    }

    pub fn queued_cells_total(&self) -> u64 {
        let legs: u64 = self
            .legs
            .values()
            .map(|l| (l.to_server.cells.len() + l.to_client.cells.len()) as u64)
            .sum();
        let outbufs: u64 = self.scheds.values().map(|s| s.outbuf.cell_count() as u64).sum();
        legs + outbufs
    }
}

/// Pops cells whose final byte lies within the contiguously delivered prefix
/// of a connection's stream; a trailing partial cell stays buffered.
pub fn take_framed(in_transit: &mut VecDeque<(u64, Cell)>, delivered_to: u64) -> Vec<Cell> {
    let mut out = Vec::new();
    while let Some((end, _)) = in_transit.front() {
        if *end <= delivered_to {
            out.push(in_transit.pop_front().expect("front").1);
        } else {
            break;
        }
    }
    out
}
