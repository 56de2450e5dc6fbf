//! Simulation world: hosts with a shared NIC drain, TCP connections between
//! them, relay/client/server roles, and the event dispatch that ties the
//! modules to one deterministic timeline.

use std::collections::{BTreeMap, VecDeque};

use rand_chacha::ChaCha12Rng;

use crate::engine::{derive_rng, Engine, Event, NodeId, RunSummary, SimTime};
use crate::metrics::Collector;
use crate::netgraph::{Graph, TransmitOutcome, VertexId};
use crate::relay::{take_framed, Cell, CircuitId, ConnId, Outbuf, RelayNode, TravelDir};
use crate::sched::PolicyConfig;
use crate::tcp::{TcpConfig, TcpPipe};
use crate::traffic::{ClientModel, DownloadProgress, StreamState};

/// Direction of one pipe within a connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dir {
    AtoB,
    BtoA,
}

impl Dir {
    pub fn flip(self) -> Dir {
        match self {
            Dir::AtoB => Dir::BtoA,
            Dir::BtoA => Dir::AtoB,
        }
    }
}

/// One direction of a connection: the TCP pipe plus the cells riding its byte
/// stream, keyed by their end offset.
#[derive(Debug)]
pub struct PipeState {
    pub tcp: TcpPipe,
    pub in_transit: VecDeque<(u64, Cell)>,
    /// First-transmission watermark for stamping cell traces.
    wire_mark: u64,
}

impl PipeState {
    fn new(cfg: TcpConfig) -> PipeState {
        PipeState {
            tcp: TcpPipe::new(cfg),
            in_transit: VecDeque::new(),
            wire_mark: 0,
        }
    }
}

/// TCP-like transport between two nodes carrying cell frames both ways.
#[derive(Debug)]
pub struct Connection {
    pub id: ConnId,
    pub node_a: NodeId,
    pub node_b: NodeId,
    pub open: bool,
    pub ab: PipeState,
    pub ba: PipeState,
    rng: ChaCha12Rng,
}

impl Connection {
    pub fn dir_from(&self, node: NodeId) -> Dir {
        if node == self.node_a {
            Dir::AtoB
        } else {
            debug_assert_eq!(node, self.node_b);
            Dir::BtoA
        }
    }

    pub fn sender_node(&self, dir: Dir) -> NodeId {
        match dir {
            Dir::AtoB => self.node_a,
            Dir::BtoA => self.node_b,
        }
    }

    pub fn receiver_node(&self, dir: Dir) -> NodeId {
        match dir {
            Dir::AtoB => self.node_b,
            Dir::BtoA => self.node_a,
        }
    }

    pub fn pipe(&self, dir: Dir) -> &PipeState {
        match dir {
            Dir::AtoB => &self.ab,
            Dir::BtoA => &self.ba,
        }
    }

    pub fn pipe_mut(&mut self, dir: Dir) -> &mut PipeState {
        match dir {
            Dir::AtoB => &mut self.ab,
            Dir::BtoA => &mut self.ba,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct NicEntry {
    conn: ConnId,
    dir: Dir,
    start: u64,
    end: u64,
}

/// A simulated machine: graph vertex, symmetric transmission capacity, and
/// the FIFO that all of its connections' outgoing segments share.
#[derive(Debug)]
pub struct Host {
    pub vertex: VertexId,
    pub rate_bytes_per_sec: u64,
    pub is_relay: bool,
    nic_cap: usize,
    nic_queue: VecDeque<NicEntry>,
    nic_current: Option<NicEntry>,
}

impl Host {
    pub fn nic_backlog_segments(&self) -> usize {
        self.nic_queue.len() + usize::from(self.nic_current.is_some())
    }

    /// Snapshot of the NIC FIFO as (connection, segment length) pairs, the
    /// currently serializing segment first.
    pub fn nic_segments(&self) -> Vec<(ConnId, u64)> {
        self.nic_current
            .iter()
            .chain(self.nic_queue.iter())
            .map(|e| (e.conn, e.end - e.start))
            .collect()
    }
}

/// What runs on a host; the payload index points into the matching arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Relay(usize),
    Client(usize),
    Server(usize),
}

/// Client application state.
#[derive(Debug)]
pub struct ClientState {
    pub node: NodeId,
    pub model: ClientModel,
    /// Stable ordinal used in this client's RNG stream names.
    pub ordinal: usize,
    pub circuit: Option<CircuitId>,
    pub outbuf: Outbuf,
    pub download: Option<DownloadProgress>,
    pub cycle: usize,
}

/// File server application state: one response stream per connection.
#[derive(Debug, Default)]
pub struct ServerState {
    pub streams: BTreeMap<ConnId, StreamState>,
    pub outbufs: BTreeMap<ConnId, Outbuf>,
}

/// Global circuit registry entry.
#[derive(Debug)]
pub struct CircuitMeta {
    pub id: CircuitId,
    pub client: NodeId,
    pub relays: Vec<NodeId>,
    pub server: NodeId,
    /// client-to-entry, inter-relay..., exit-to-server.
    pub conns: Vec<ConnId>,
    pub alive: bool,
}

/// Simulation events.
#[derive(Debug)]
pub enum Ev {
    /// The target host finished serializing its current NIC segment.
    NicDeparture,
    SegArrive { conn: ConnId, dir: Dir, start: u64, end: u64 },
    Ack { conn: ConnId, dir: Dir, ack_to: u64 },
    /// Edge-triggered kernel-buffer-writable notification for the target node.
    Writable { conn: ConnId },
    RtoCheck { conn: ConnId, dir: Dir },
    KistTick,
    ClientStart,
    CircuitReady { circuit: CircuitId },
    NextDownload,
}

/// Knobs shared by every component of one simulation instance.
#[derive(Debug, Clone)]
pub struct SimParams {
    pub seed: u64,
    pub policy: PolicyConfig,
    pub tcp: TcpConfig,
    pub ewma_halflife: SimTime,
    pub nic_cap_segments: usize,
    pub trace_sample: u64,
    /// Circuit length: 3, or 6 for onion-service style paths.
    pub hops: u32,
    /// Fix one relay (by relay index) as every circuit's exit.
    pub pinned_exit: Option<u32>,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            seed: 1,
            policy: PolicyConfig::default(),
            tcp: TcpConfig::default(),
            ewma_halflife: SimTime::from_secs(30),
            nic_cap_segments: 1000,
            trace_sample: 1,
            hops: 3,
            pinned_exit: None,
        }
    }
}

/// One simulation instance. All state lives in per-role arenas indexed by the
/// ids stored in events; handlers never hold references across calls.
pub struct Sim {
    pub params: SimParams,
    pub graph: Graph,
    pub hosts: Vec<Host>,
    pub roles: Vec<Role>,
    pub relays: Vec<RelayNode>,
    pub clients: Vec<ClientState>,
    pub servers: Vec<ServerState>,
    pub conns: Vec<Connection>,
    pub circuits: Vec<CircuitMeta>,
    pub metrics: Collector,
    conn_index: BTreeMap<(NodeId, NodeId), ConnId>,
    pub(crate) next_cell_id: u64,
    pub(crate) next_download_id: u64,
}

impl Sim {
    pub fn new(graph: Graph, params: SimParams) -> Sim {
        let metrics = Collector::new(params.trace_sample);
        Sim {
            params,
            graph,
            hosts: Vec::new(),
            roles: Vec::new(),
            relays: Vec::new(),
            clients: Vec::new(),
            servers: Vec::new(),
            conns: Vec::new(),
            circuits: Vec::new(),
            metrics,
            conn_index: BTreeMap::new(),
            next_cell_id: 0,
            next_download_id: 0,
        }
    }

    fn add_host(&mut self, rate_bytes_per_sec: u64, is_relay: bool) -> NodeId {
        let id = NodeId(self.hosts.len() as u32);
        assert!((id.0 as u32) < self.graph.n_vertices(), "graph too small for host {id}");
        self.hosts.push(Host {
            vertex: VertexId(id.0),
            rate_bytes_per_sec,
            is_relay,
            nic_cap: self.params.nic_cap_segments,
            nic_queue: VecDeque::new(),
            nic_current: None,
        });
        id
    }

    pub fn add_relay(&mut self, rate_bytes_per_sec: u64) -> NodeId {
        let node = self.add_host(rate_bytes_per_sec, true);
        self.roles.push(Role::Relay(self.relays.len()));
        self.relays.push(RelayNode::new(self.params.ewma_halflife));
        node
    }

    pub fn add_client(&mut self, rate_bytes_per_sec: u64, model: ClientModel) -> NodeId {
        let node = self.add_host(rate_bytes_per_sec, false);
        self.roles.push(Role::Client(self.clients.len()));
        let ordinal = self.clients.len();
        self.clients.push(ClientState {
            node,
            model,
            ordinal,
            circuit: None,
            outbuf: Outbuf::default(),
            download: None,
            cycle: 0,
        });
        node
    }

    pub fn add_server(&mut self, rate_bytes_per_sec: u64) -> NodeId {
        let node = self.add_host(rate_bytes_per_sec, false);
        self.roles.push(Role::Server(self.servers.len()));
        self.servers.push(ServerState::default());
        node
    }

    pub fn role(&self, node: NodeId) -> Role {
        self.roles[node.0 as usize]
    }

    pub fn relay_of(&self, node: NodeId) -> Option<usize> {
        match self.role(node) {
            Role::Relay(i) => Some(i),
            _ => None,
        }
    }

    /// Creates a fresh connection between two nodes. Both ends start open
    /// with empty buffers; the transport handshake is not simulated.
    pub fn create_conn(&mut self, a: NodeId, b: NodeId) -> ConnId {
        let id = ConnId(self.conns.len() as u32);
        let rng = derive_rng(self.params.seed, &format!("conn-{}/loss", id.0));
        self.conns.push(Connection {
            id,
            node_a: a,
            node_b: b,
            open: true,
            ab: PipeState::new(self.params.tcp),
            ba: PipeState::new(self.params.tcp),
            rng,
        });
        if let Role::Relay(r) = self.role(a) {
            self.relays[r].attach_conn(id);
        }
        if let Role::Relay(r) = self.role(b) {
            self.relays[r].attach_conn(id);
        }
        id
    }

    /// Reuses an existing open connection between the pair, creating one
    /// otherwise; long-lived relay-to-relay links go through here.
    pub fn ensure_conn(&mut self, a: NodeId, b: NodeId) -> ConnId {
        let key = if a.0 <= b.0 { (a, b) } else { (b, a) };
        if let Some(&id) = self.conn_index.get(&key) {
            if self.conns[id.0 as usize].open {
                return id;
            }
        }
        let id = self.create_conn(a, b);
        self.conn_index.insert(key, id);
        id
    }

    pub fn conn(&self, id: ConnId) -> &Connection {
        &self.conns[id.0 as usize]
    }

    pub fn conn_mut(&mut self, id: ConnId) -> &mut Connection {
        &mut self.conns[id.0 as usize]
    }

    /// Registers a circuit across its relay path. `conns` runs client side to
    /// server side and has one more entry than `relays`.
    pub fn register_circuit(&mut self, client: NodeId, relay_nodes: &[NodeId], server: NodeId, conns: Vec<ConnId>) -> CircuitId {
        assert_eq!(conns.len(), relay_nodes.len() + 1);
        let id = CircuitId(self.circuits.len() as u64);
        for (i, &rn) in relay_nodes.iter().enumerate() {
            let r = self.relay_of(rn).expect("circuit hop is a relay");
            self.relays[r].attach_circuit(id, conns[i], conns[i + 1]);
        }
        self.circuits.push(CircuitMeta {
            id,
            client,
            relays: relay_nodes.to_vec(),
            server,
            conns,
            alive: true,
        });
        id
    }

    /// Tears down a circuit: detaches relay legs (stranded cells become
    /// counted drops) and closes its endpoint connections.
    pub fn teardown_circuit(&mut self, circuit: CircuitId) {
        let meta = &mut self.circuits[circuit.0 as usize];
        if !meta.alive {
            return;
        }
        meta.alive = false;
        let relay_nodes = meta.relays.clone();
        let endpoint_conns = [meta.conns[0], *meta.conns.last().expect("non-empty")];
        for rn in relay_nodes {
            let r = self.relay_of(rn).expect("relay");
            let stranded = self.relays[r].detach_circuit(circuit);
            self.metrics.counters.cells_dropped += stranded.len() as u64;
        }
        for conn_id in endpoint_conns {
            let conn = &mut self.conns[conn_id.0 as usize];
            conn.open = false;
            let stranded = conn.ab.in_transit.len() + conn.ba.in_transit.len();
            conn.ab.in_transit.clear();
            conn.ba.in_transit.clear();
            self.metrics.counters.cells_dropped += stranded as u64;
        }
    }

    pub fn fresh_cell_id(&mut self) -> u64 {
        let id = self.next_cell_id;
        self.next_cell_id += 1;
        id
    }

    pub fn fresh_download_id(&mut self) -> u64 {
        let id = self.next_download_id;
        self.next_download_id += 1;
        id
    }

    // ------------------------------------------------------------------
    // Transmission path: TCP pump -> host NIC FIFO -> wire -> receiver.
    // ------------------------------------------------------------------

    fn serialize_ns(bytes: u64, rate_bytes_per_sec: u64) -> u64 {
        (bytes as u128 * 1_000_000_000 / rate_bytes_per_sec as u128) as u64
    }

    /// Hands one segment to the sender host's NIC FIFO. A full FIFO tail-drops
    /// the segment; the sender discovers the loss through acks or its timer.
    pub(crate) fn nic_push(&mut self, engine: &mut Engine<Ev>, conn_id: ConnId, dir: Dir, start: u64, end: u64) {
        let conn = &self.conns[conn_id.0 as usize];
        let sender = conn.sender_node(dir);
        let entry = NicEntry { conn: conn_id, dir, start, end };
        let host = &mut self.hosts[sender.0 as usize];
        if host.nic_current.is_none() {
            host.nic_current = Some(entry);
            let dur = Self::serialize_ns(end - start, host.rate_bytes_per_sec);
            engine.schedule(SimTime::from_nanos(dur), sender, Ev::NicDeparture);
        } else if host.nic_queue.len() < host.nic_cap {
            host.nic_queue.push_back(entry);
        } else {
            self.metrics.counters.segments_dropped += 1;
        }
    }

    /// Sends every segment the pipe's congestion state allows.
    pub(crate) fn pump(&mut self, engine: &mut Engine<Ev>, conn_id: ConnId, dir: Dir) {
        loop {
            let conn = &mut self.conns[conn_id.0 as usize];
            if !conn.open {
                return;
            }
            let now = engine.now();
            match conn.pipe_mut(dir).tcp.next_segment(now) {
                Some(seg) => self.nic_push(engine, conn_id, dir, seg.start, seg.end),
                None => break,
            }
        }
        self.ensure_rto_check(engine, conn_id, dir);
    }

    fn ensure_rto_check(&mut self, engine: &mut Engine<Ev>, conn_id: ConnId, dir: Dir) {
        let conn = &mut self.conns[conn_id.0 as usize];
        let sender = conn.sender_node(dir);
        let pipe = conn.pipe_mut(dir);
        if let Some(deadline) = pipe.tcp.rto_deadline {
            if !pipe.tcp.rto_check_pending {
                pipe.tcp.rto_check_pending = true;
                let delay = deadline.saturating_sub(engine.now());
                engine.schedule(delay, sender, Ev::RtoCheck { conn: conn_id, dir });
            }
        }
    }

    fn on_nic_departure(&mut self, engine: &mut Engine<Ev>, node: NodeId) {
        let h = node.0 as usize;
        let Some(entry) = self.hosts[h].nic_current.take() else {
            return;
        };
        let is_relay = self.hosts[h].is_relay;
        let now = engine.now();
        let ci = entry.conn.0 as usize;
        let mut kernel_q: Option<SimTime> = None;
        let mut receiver = None;
        if self.conns[ci].open {
            let conn = &mut self.conns[ci];
            let pipe = conn.pipe_mut(entry.dir);
            kernel_q = pipe.tcp.segment_departed(entry.start, now);
            if kernel_q.is_some() {
                // First transmission of this range: stamp the cells whose last
                // byte just reached the wire.
                if entry.end > pipe.wire_mark {
                    let from = pipe.in_transit.partition_point(|(e, _)| *e <= pipe.wire_mark);
                    for (e, cell) in pipe.in_transit.iter_mut().skip(from) {
                        if *e > entry.end {
                            break;
                        }
                        cell.trace.first_transmitted = now;
                        debug_assert!(cell.trace.flushed_to_kernel <= now);
                    }
                    pipe.wire_mark = entry.end;
                }
            }
            receiver = Some(conn.receiver_node(entry.dir));
        }
        if let Some(q) = kernel_q {
            self.metrics.counters.segments_sent += 1;
            if is_relay {
                self.metrics.record_kernel_qtime(now, q);
            }
        }
        if let Some(receiver) = receiver {
            let (va, vb) = (
                self.hosts[node.0 as usize].vertex,
                self.hosts[receiver.0 as usize].vertex,
            );
            match self.graph.transmit(va, vb, now, &mut self.conns[ci].rng) {
                TransmitOutcome::Delivered { at } => {
                    engine.schedule(at - now, receiver, Ev::SegArrive {
                        conn: entry.conn,
                        dir: entry.dir,
                        start: entry.start,
                        end: entry.end,
                    });
                }
                TransmitOutcome::Dropped => {
                    self.metrics.counters.segments_dropped += 1;
                }
            }
        }
        // Start serializing the next queued segment.
        let host = &mut self.hosts[h];
        if let Some(next) = host.nic_queue.pop_front() {
            let dur = Self::serialize_ns(next.end - next.start, host.rate_bytes_per_sec);
            host.nic_current = Some(next);
            engine.schedule(SimTime::from_nanos(dur), node, Ev::NicDeparture);
        }
    }

    fn on_seg_arrive(&mut self, engine: &mut Engine<Ev>, conn_id: ConnId, dir: Dir, start: u64, end: u64) {
        let ci = conn_id.0 as usize;
        if !self.conns[ci].open {
            return;
        }
        let now = engine.now();
        let (ack_to, cells, sender, receiver) = {
            let conn = &mut self.conns[ci];
            let pipe = conn.pipe_mut(dir);
            let (ack_to, _advanced) = pipe.tcp.on_segment_arrived(start, end);
            let delivered = pipe.tcp.delivered_contiguous();
            let cells = take_framed(&mut pipe.in_transit, delivered);
            (ack_to, cells, conn.sender_node(dir), conn.receiver_node(dir))
        };
        // Ack takes the reverse edge directly; acks are small enough that the
        // host drain is modeled for data segments only.
        let (vr, vs) = (
            self.hosts[receiver.0 as usize].vertex,
            self.hosts[sender.0 as usize].vertex,
        );
        match self.graph.transmit(vr, vs, now, &mut self.conns[ci].rng) {
            TransmitOutcome::Delivered { at } => {
                engine.schedule(at - now, sender, Ev::Ack { conn: conn_id, dir, ack_to });
            }
            TransmitOutcome::Dropped => {}
        }
        for cell in cells {
            self.deliver_cell(engine, receiver, conn_id, cell);
        }
    }

    fn on_ack(&mut self, engine: &mut Engine<Ev>, conn_id: ConnId, dir: Dir, ack_to: u64) -> Result<(), String> {
        let ci = conn_id.0 as usize;
        if !self.conns[ci].open {
            return Ok(());
        }
        let now = engine.now();
        let (outcome, sender) = {
            let conn = &mut self.conns[ci];
            let sender = conn.sender_node(dir);
            let out = conn
                .pipe_mut(dir)
                .tcp
                .on_ack(ack_to, now)
                .map_err(|e| format!("conn {conn_id:?}: {e}"))?;
            (out, sender)
        };
        if let Some((s, e)) = outcome.retransmit {
            self.nic_push(engine, conn_id, dir, s, e);
        }
        if outcome.became_writable {
            engine.schedule(SimTime::ZERO, sender, Ev::Writable { conn: conn_id });
        }
        self.pump(engine, conn_id, dir);
        Ok(())
    }

    fn on_rto_check(&mut self, engine: &mut Engine<Ev>, conn_id: ConnId, dir: Dir) {
        let ci = conn_id.0 as usize;
        let now = engine.now();
        let retx = {
            let pipe = self.conns[ci].pipe_mut(dir);
            pipe.tcp.rto_check_pending = false;
            match pipe.tcp.rto_deadline {
                None => None,
                Some(d) if now < d => {
                    pipe.tcp.rto_check_pending = true;
                    let sender = self.conns[ci].sender_node(dir);
                    engine.schedule(d - now, sender, Ev::RtoCheck { conn: conn_id, dir });
                    None
                }
                Some(_) => self.conns[ci].pipe_mut(dir).tcp.on_timeout(now),
            }
        };
        if let Some((s, e)) = retx {
            if self.conns[ci].open {
                self.nic_push(engine, conn_id, dir, s, e);
            }
            self.ensure_rto_check(engine, conn_id, dir);
        }
    }

    fn on_writable(&mut self, engine: &mut Engine<Ev>, node: NodeId, conn_id: ConnId) {
        if !self.conns[conn_id.0 as usize].open {
            return;
        }
        match self.role(node) {
            Role::Relay(_) => {
                if self.params.policy.is_amap() {
                    self.amap_run(engine, node, conn_id);
                }
                // Under KIST the refreshed writable flag is picked up at the
                // next tick; nothing to do now.
            }
            Role::Client(_) => self.client_flush(engine, node, conn_id),
            Role::Server(_) => self.server_continue(engine, node, conn_id),
        }
    }

    /// Injects a cell as if it had just been reassembled from `arrived_on` at
    /// `node`; scenario-building hook for tests and micro-benchmarks.
    pub fn inject_arrival(&mut self, engine: &mut Engine<Ev>, node: NodeId, arrived_on: ConnId, cell: Cell) {
        self.deliver_cell(engine, node, arrived_on, cell);
    }

    /// Routes a cell that completed reassembly at `node`: forwards it along
    /// its circuit at relays, or delivers it to the local endpoint.
    fn deliver_cell(&mut self, engine: &mut Engine<Ev>, node: NodeId, arrived_on: ConnId, cell: Cell) {
        match self.role(node) {
            Role::Relay(r) => self.relay_forward(engine, node, r, arrived_on, cell),
            Role::Client(c) => self.client_receive(engine, node, c, arrived_on, cell),
            Role::Server(s) => self.server_receive(engine, node, s, arrived_on, cell),
        }
    }

    fn relay_forward(&mut self, engine: &mut Engine<Ev>, node: NodeId, r: usize, arrived_on: ConnId, cell: Cell) {
        let now = engine.now();
        let circuit = cell.circuit;
        let Some(leg) = self.relays[r].legs.get(&circuit) else {
            // Circuit no longer established at this relay.
            self.metrics.counters.cells_dropped += 1;
            return;
        };
        let dir = if arrived_on == leg.conn_to_client {
            TravelDir::ToServer
        } else {
            TravelDir::ToClient
        };
        let next_conn = match dir {
            TravelDir::ToServer => leg.conn_to_server,
            TravelDir::ToClient => leg.conn_to_client,
        };
        if !self.conns[next_conn.0 as usize].open {
            self.metrics.counters.cells_dropped += 1;
            return;
        }
        match self.relays[r].enqueue_cell(circuit, dir, cell, now) {
            Ok(trigger_conn) => {
                if self.params.policy.is_amap() {
                    self.amap_run(engine, node, trigger_conn);
                }
            }
            Err(_) => {
                self.metrics.counters.cells_dropped += 1;
            }
        }
    }

    /// Flushes a client's endpoint output buffer into its connection.
    pub(crate) fn client_flush(&mut self, engine: &mut Engine<Ev>, node: NodeId, conn_id: ConnId) {
        let Role::Client(c) = self.role(node) else {
            return;
        };
        let now = engine.now();
        let outbuf = &mut self.clients[c].outbuf;
        let dir = self.conns[conn_id.0 as usize].dir_from(node);
        let pipe = self.conns[conn_id.0 as usize].pipe_mut(dir);
        flush_outbuf_bytes(outbuf, pipe, u64::MAX, now, false, &mut self.metrics);
        self.pump(engine, conn_id, dir);
    }

    // ------------------------------------------------------------------
    // End-of-run accounting.
    // ------------------------------------------------------------------

    /// Cells resident anywhere in the network right now: circuit queues,
    /// output buffers, and TCP transit.
    pub fn cells_queued(&self) -> u64 {
        let relays: u64 = self.relays.iter().map(|r| r.queued_cells_total()).sum();
        let clients: u64 = self.clients.iter().map(|c| c.outbuf.cell_count() as u64).sum();
        let servers: u64 = self
            .servers
            .iter()
            .map(|s| s.outbufs.values().map(|o| o.cell_count() as u64).sum::<u64>())
            .sum();
        let transit: u64 = self
            .conns
            .iter()
            .map(|c| (c.ab.in_transit.len() + c.ba.in_transit.len()) as u64)
            .sum();
        relays + clients + servers + transit
    }

    pub fn finalize(&mut self, summary: RunSummary) {
        self.metrics.counters.cells_queued_end = self.cells_queued();
        self.metrics.counters.events_processed = summary.events_processed;
        self.metrics.counters.final_clock_ns = summary.clock.as_nanos();
        self.metrics.finalize();
    }

    /// Runs the timeline to `end` and finalizes the metrics.
    pub fn run(&mut self, engine: &mut Engine<Ev>, end: SimTime) -> Result<RunSummary, crate::engine::RunError> {
        let summary = engine.run_until(end, self, |eng, sim, ev| sim.handle(eng, ev))?;
        self.finalize(summary);
        Ok(summary)
    }

    pub fn handle(&mut self, engine: &mut Engine<Ev>, event: Event<Ev>) -> Result<(), String> {
        let node = event.target;
        match event.payload {
            Ev::NicDeparture => {
                self.on_nic_departure(engine, node);
                Ok(())
            }
            Ev::SegArrive { conn, dir, start, end } => {
                self.on_seg_arrive(engine, conn, dir, start, end);
                Ok(())
            }
            Ev::Ack { conn, dir, ack_to } => self.on_ack(engine, conn, dir, ack_to),
            Ev::Writable { conn } => {
                self.on_writable(engine, node, conn);
                Ok(())
            }
            Ev::RtoCheck { conn, dir } => {
                self.on_rto_check(engine, conn, dir);
                Ok(())
            }
            Ev::KistTick => {
                self.kist_tick(engine, node);
                engine.schedule(self.params.policy.kist_interval, node, Ev::KistTick);
                Ok(())
            }
            Ev::ClientStart => self.client_start(engine, node),
            Ev::CircuitReady { circuit } => self.circuit_ready(engine, node, circuit),
            Ev::NextDownload => self.next_download(engine, node),
        }
    }
}

/// Moves up to `budget` bytes from an output buffer into the kernel send
/// buffer, stamping and (for relays) recording each cell completed by the
/// flush. Returns the bytes the kernel accepted.
pub(crate) fn flush_outbuf_bytes(
    outbuf: &mut Outbuf,
    pipe: &mut PipeState,
    budget: u64,
    now: SimTime,
    record_tor_qtime: bool,
    metrics: &mut Collector,
) -> u64 {
    let ask = outbuf.len_bytes().min(budget);
    if ask == 0 {
        return 0;
    }
    let accepted = pipe.tcp.write(ask, now);
    if accepted == 0 {
        return 0;
    }
    let base = pipe.tcp.bytes_written() - accepted;
    for (delta, mut cell) in outbuf.take(accepted) {
        cell.trace.flushed_to_kernel = now;
        debug_assert!(cell.trace.written_to_outbuf <= now);
        if record_tor_qtime {
            let qtime = now - cell.trace.enqueued_to_circuit;
            metrics.record_tor_qtime(cell.id.0, now, qtime);
        }
        pipe.in_transit.push_back((base + delta, cell));
    }
    accepted
}
