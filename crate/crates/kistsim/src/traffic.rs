//! Client and server endpoints: the three client behavior models, circuit
//! construction over 3- or 6-hop paths, download lifecycle, and TTFB/TTLB
//! measurement.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::engine::{Engine, NodeId, SimTime};
use crate::relay::{Cell, CellId, CellKind, CellTrace, CircuitId, ConnId, DownloadId, CELL_PAYLOAD};
use crate::sim::{Ev, Role, ServerState, Sim};

pub const WEB_FILE_BYTES: u64 = 320 * 1024;
pub const BULK_FILE_BYTES: u64 = 5 * 1024 * 1024;
/// ShadowPerf cycles through these sizes, one per download.
pub const PERF_CYCLE_BYTES: [u64; 3] = [50 * 1024, 1024 * 1024, 5 * 1024 * 1024];

/// Client behavior models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientModel {
    /// 320 KiB downloads with a uniform 1-60s pause, reusing the circuit.
    Web,
    /// Back-to-back 5 MiB downloads, no pause.
    Bulk,
    /// 50 KiB / 1 MiB / 5 MiB cycle, uniform 60-120s pause, fresh circuit
    /// for every download.
    ShadowPerf,
}

impl ClientModel {
    pub fn label(&self) -> &'static str {
        match self {
            ClientModel::Web => "web",
            ClientModel::Bulk => "bulk",
            ClientModel::ShadowPerf => "perf",
        }
    }

    pub fn file_size(&self, cycle: usize) -> u64 {
        match self {
            ClientModel::Web => WEB_FILE_BYTES,
            ClientModel::Bulk => BULK_FILE_BYTES,
            ClientModel::ShadowPerf => PERF_CYCLE_BYTES[cycle % PERF_CYCLE_BYTES.len()],
        }
    }

    /// Pause bounds between downloads, in seconds; `None` means none at all.
    pub fn pause_range_s(&self) -> Option<(f64, f64)> {
        match self {
            ClientModel::Web => Some((1.0, 60.0)),
            ClientModel::Bulk => None,
            ClientModel::ShadowPerf => Some((60.0, 120.0)),
        }
    }

    pub fn fresh_circuit_per_download(&self) -> bool {
        matches!(self, ClientModel::ShadowPerf)
    }
}

/// Cells a server must stream for a download of `size` payload bytes.
pub fn cells_for_size(size: u64) -> u64 {
    size.div_ceil(CELL_PAYLOAD)
}

/// One download in flight at a client.
#[derive(Debug, Clone, Copy)]
pub struct DownloadProgress {
    pub id: DownloadId,
    pub size: u64,
    pub received: u64,
    pub t_request: SimTime,
    pub t_first: Option<SimTime>,
}

/// One response stream at a server: bytes still to be packaged into cells.
#[derive(Debug, Clone, Copy)]
pub struct StreamState {
    pub circuit: CircuitId,
    pub download: DownloadId,
    pub bytes_left: u64,
}

/// Weighted draw over relay capacities.
fn pick_weighted(weights: &[u64], rng: &mut ChaCha12Rng) -> usize {
    let total: u64 = weights.iter().sum();
    debug_assert!(total > 0);
    let mut x = rng.gen_range(0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

/// Picks `hops` distinct relays weighted by capacity. With a pinned exit the
/// last hop is fixed and the rest are drawn distinct from it.
pub fn pick_relays(
    weights: &[u64],
    hops: usize,
    pinned_exit: Option<usize>,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<usize>, String> {
    if weights.len() < hops {
        return Err(format!("need {hops} distinct relays, only {} available", weights.len()));
    }
    let mut picked: Vec<usize> = Vec::with_capacity(hops);
    let reserved = pinned_exit.into_iter().collect::<Vec<_>>();
    let free_slots = hops - reserved.len();
    let mut guard = 0;
    while picked.len() < free_slots {
        let i = pick_weighted(weights, rng);
        if !picked.contains(&i) && !reserved.contains(&i) {
            picked.push(i);
        }
        guard += 1;
        if guard > 100_000 {
            return Err("relay selection failed to find distinct relays".into());
        }
    }
    picked.extend(reserved);
    Ok(picked)
}

impl Sim {
    /// Client wake-up at its staggered start time: build the first circuit.
    pub(crate) fn client_start(&mut self, engine: &mut Engine<Ev>, node: NodeId) -> Result<(), String> {
        self.build_circuit_for(engine, node)
    }

    /// Builds a circuit hop by hop; each telescoping step costs one round
    /// trip on the new hop's edge. Schedules `CircuitReady` at the end.
    pub fn build_circuit_for(&mut self, engine: &mut Engine<Ev>, node: NodeId) -> Result<(), String> {
        let Role::Client(c) = self.role(node) else {
            return Err("circuit build on a non-client node".into());
        };
        let ordinal = self.clients[c].ordinal;
        let hops = self.params.hops as usize;
        let relay_nodes: Vec<NodeId> = (0..self.roles.len() as u32)
            .map(NodeId)
            .filter(|n| matches!(self.role(*n), Role::Relay(_)))
            .collect();
        let weights: Vec<u64> = relay_nodes
            .iter()
            .map(|n| self.hosts[n.0 as usize].rate_bytes_per_sec)
            .collect();
        let pinned = self.params.pinned_exit.map(|i| i as usize);
        let picks = {
            let rng = engine.stream(&format!("client-{ordinal}/path"));
            pick_relays(&weights, hops, pinned, rng)?
        };
        let path: Vec<NodeId> = picks.into_iter().map(|i| relay_nodes[i]).collect();

        let server_nodes: Vec<NodeId> = (0..self.roles.len() as u32)
            .map(NodeId)
            .filter(|n| matches!(self.role(*n), Role::Server(_)))
            .collect();
        if server_nodes.is_empty() {
            return Err("no servers available".into());
        }
        let si = engine.rng_uniform_u64(
            &format!("client-{ordinal}/server"),
            0,
            server_nodes.len() as u64 - 1,
        ) as usize;
        let server = server_nodes[si];

        let mut conns: Vec<ConnId> = vec![self.create_conn(node, path[0])];
        for pair in path.windows(2) {
            conns.push(self.ensure_conn(pair[0], pair[1]));
        }
        conns.push(self.create_conn(*path.last().expect("hops >= 1"), server));
        let circuit = self.register_circuit(node, &path, server, conns);
        self.clients[c].circuit = Some(circuit);

        let mut delay = SimTime::ZERO;
        let mut prev = node;
        for &hop in &path {
            let edge = self.graph.edge(
                self.hosts[prev.0 as usize].vertex,
                self.hosts[hop.0 as usize].vertex,
            );
            delay += edge.latency + edge.latency;
            prev = hop;
        }
        engine.schedule(delay, node, Ev::CircuitReady { circuit });
        Ok(())
    }

    pub(crate) fn circuit_ready(&mut self, engine: &mut Engine<Ev>, node: NodeId, circuit: CircuitId) -> Result<(), String> {
        let Role::Client(c) = self.role(node) else {
            return Ok(());
        };
        if self.clients[c].circuit != Some(circuit) || !self.circuits[circuit.0 as usize].alive {
            return Ok(()); // stale notification for a torn-down circuit
        }
        self.start_download(engine, node)
    }

    /// Sends the request cell for the client's next download and starts the
    /// TTFB/TTLB clock.
    pub fn start_download(&mut self, engine: &mut Engine<Ev>, node: NodeId) -> Result<(), String> {
        let Role::Client(c) = self.role(node) else {
            return Err("download on a non-client node".into());
        };
        let now = engine.now();
        let circuit = self.clients[c].circuit.ok_or("download without a circuit")?;
        let size = self.clients[c].model.file_size(self.clients[c].cycle);
        self.clients[c].cycle += 1;
        let id = DownloadId(self.fresh_download_id());
        self.metrics.counters.downloads_started += 1;
        self.clients[c].download = Some(DownloadProgress {
            id,
            size,
            received: 0,
            t_request: now,
            t_first: None,
        });
        if size == 0 {
            // Degenerate download: completes immediately with TTFB = TTLB.
            let label = self.clients[c].model.label();
            self.metrics.record_ttfb(label, now, SimTime::ZERO);
            self.metrics.record_ttlb(label, now, SimTime::ZERO);
            self.metrics.counters.downloads_completed += 1;
            self.clients[c].download = None;
            self.after_download(engine, node);
            return Ok(());
        }
        let cell = Cell {
            id: CellId(self.fresh_cell_id()),
            circuit,
            download: id,
            kind: CellKind::Request { size },
            trace: CellTrace {
                enqueued_to_circuit: now,
                written_to_outbuf: now,
                ..CellTrace::default()
            },
        };
        self.metrics.counters.cells_created += 1;
        let conn = self.circuits[circuit.0 as usize].conns[0];
        self.clients[c].outbuf.push(cell);
        self.client_flush(engine, node, conn);
        Ok(())
    }

    /// Payload delivery at the requesting client.
    pub(crate) fn client_receive(&mut self, engine: &mut Engine<Ev>, node: NodeId, c: usize, _arrived_on: ConnId, cell: Cell) {
        let now = engine.now();
        let mut finished = false;
        {
            let client = &mut self.clients[c];
            let Some(dl) = client.download.as_mut() else {
                self.metrics.counters.cells_dropped += 1;
                return;
            };
            match cell.kind {
                CellKind::Payload { payload_len, last } if cell.download == dl.id => {
                    self.metrics.counters.cells_delivered += 1;
                    if dl.t_first.is_none() {
                        dl.t_first = Some(now);
                        self.metrics.record_ttfb(client.model.label(), now, now - dl.t_request);
                    }
                    dl.received += u64::from(payload_len);
                    self.metrics.record_goodput(now, u64::from(payload_len));
                    if last {
                        debug_assert_eq!(dl.received, dl.size);
                        self.metrics.record_ttlb(client.model.label(), now, now - dl.t_request);
                        self.metrics.counters.downloads_completed += 1;
                        client.download = None;
                        finished = true;
                    }
                }
                _ => {
                    self.metrics.counters.cells_dropped += 1;
                }
            }
        }
        if finished {
            self.after_download(engine, node);
        }
    }

    /// Schedules what the client does after a completed download.
    fn after_download(&mut self, engine: &mut Engine<Ev>, node: NodeId) {
        let Role::Client(c) = self.role(node) else {
            return;
        };
        let model = self.clients[c].model;
        match model.pause_range_s() {
            None => {
                // Bulk: repeat immediately on the same circuit.
                if let Err(e) = self.start_download(engine, node) {
                    debug_assert!(false, "bulk restart failed: {e}");
                }
            }
            Some((lo, hi)) => {
                let ordinal = self.clients[c].ordinal;
                let pause_s = engine.rng_uniform(&format!("client-{ordinal}/pause"), lo, hi);
                let pause = SimTime::from_nanos((pause_s * 1e9) as u64);
                engine.schedule(pause, node, Ev::NextDownload);
            }
        }
    }

    pub(crate) fn next_download(&mut self, engine: &mut Engine<Ev>, node: NodeId) -> Result<(), String> {
        let Role::Client(c) = self.role(node) else {
            return Ok(());
        };
        if self.clients[c].model.fresh_circuit_per_download() {
            if let Some(old) = self.clients[c].circuit.take() {
                self.teardown_circuit(old);
            }
            self.build_circuit_for(engine, node)
        } else {
            self.start_download(engine, node)
        }
    }

    /// Request delivery at a file server: start streaming the response.
    pub(crate) fn server_receive(&mut self, engine: &mut Engine<Ev>, node: NodeId, s: usize, arrived_on: ConnId, cell: Cell) {
        match cell.kind {
            CellKind::Request { size } => {
                self.metrics.counters.cells_delivered += 1;
                self.servers[s].streams.insert(
                    arrived_on,
                    StreamState {
                        circuit: cell.circuit,
                        download: cell.download,
                        bytes_left: size,
                    },
                );
                self.servers[s].outbufs.entry(arrived_on).or_default();
                self.server_continue(engine, node, arrived_on);
            }
            _ => {
                self.metrics.counters.cells_dropped += 1;
            }
        }
    }

    /// Streams response cells while the kernel accepts them; resumes on the
    /// connection's writable notifications.
    pub fn server_continue(&mut self, engine: &mut Engine<Ev>, node: NodeId, conn_id: ConnId) {
        let Role::Server(s) = self.role(node) else {
            return;
        };
        let ci = conn_id.0 as usize;
        if !self.conns[ci].open {
            self.servers[s].streams.remove(&conn_id);
            return;
        }
        let now = engine.now();
        let dir = self.conns[ci].dir_from(node);
        {
            let ServerState { streams, outbufs } = &mut self.servers[s];
            let pipe = self.conns[ci].pipe_mut(dir);
            let outbuf = outbufs.entry(conn_id).or_default();
            loop {
                if !pipe.tcp.writable() {
                    break;
                }
                // Flush residue before making more cells.
                if !outbuf.is_empty() {
                    flush_residue(outbuf, pipe, now, &mut self.metrics);
                    continue;
                }
                let Some(stream) = streams.get_mut(&conn_id) else {
                    break;
                };
                if stream.bytes_left == 0 {
                    streams.remove(&conn_id);
                    break;
                }
                let payload_len = CELL_PAYLOAD.min(stream.bytes_left) as u16;
                stream.bytes_left -= u64::from(payload_len);
                let last = stream.bytes_left == 0;
                let cell = Cell {
                    id: CellId(self.next_cell_id),
                    circuit: stream.circuit,
                    download: stream.download,
                    kind: CellKind::Payload { payload_len, last },
                    trace: CellTrace {
                        enqueued_to_circuit: now,
                        written_to_outbuf: now,
                        ..CellTrace::default()
                    },
                };
                self.next_cell_id += 1;
                self.metrics.counters.cells_created += 1;
                outbuf.push(cell);
            }
        }
        self.pump(engine, conn_id, dir);
    }
}

fn flush_residue(
    outbuf: &mut crate::relay::Outbuf,
    pipe: &mut crate::sim::PipeState,
    now: SimTime,
    metrics: &mut crate::metrics::Collector,
) {
    crate::sim::flush_outbuf_bytes(outbuf, pipe, u64::MAX, now, false, metrics);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::derive_rng;

    #[test]
    fn web_download_is_658_cells() {
        assert_eq!(cells_for_size(WEB_FILE_BYTES), 658);
    }

    #[test]
    fn zero_byte_download_needs_no_cells() {
        assert_eq!(cells_for_size(0), 0);
    }

    #[test]
    fn bulk_download_cell_count() {
        assert_eq!(cells_for_size(BULK_FILE_BYTES), 10_528);
    }

    #[test]
    fn model_parameters_match_the_behavior_table() {
        assert_eq!(ClientModel::Web.file_size(0), 320 * 1024);
        assert_eq!(ClientModel::Web.pause_range_s(), Some((1.0, 60.0)));
        assert!(!ClientModel::Web.fresh_circuit_per_download());

        assert_eq!(ClientModel::Bulk.file_size(7), 5 * 1024 * 1024);
        assert_eq!(ClientModel::Bulk.pause_range_s(), None);

        assert_eq!(ClientModel::ShadowPerf.pause_range_s(), Some((60.0, 120.0)));
        assert!(ClientModel::ShadowPerf.fresh_circuit_per_download());
    }

    #[test]
    fn shadowperf_cycles_sizes_in_order() {
        let m = ClientModel::ShadowPerf;
        let sizes: Vec<u64> = (0..7).map(|i| m.file_size(i)).collect();
        assert_eq!(
            sizes,
            vec![
                50 * 1024,
                1024 * 1024,
                5 * 1024 * 1024,
                50 * 1024,
                1024 * 1024,
                5 * 1024 * 1024,
                50 * 1024
            ]
        );
    }

    #[test]
    fn pick_relays_returns_distinct_relays() {
        let mut rng = derive_rng(3, "picks");
        let weights = vec![1u64; 10];
        for _ in 0..100 {
            let picks = pick_relays(&weights, 3, None, &mut rng).unwrap();
            assert_eq!(picks.len(), 3);
            let mut sorted = picks.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 3, "duplicate relays in {picks:?}");
        }
    }

    #[test]
    fn pick_relays_supports_six_hops() {
        let mut rng = derive_rng(3, "picks6");
        let weights = vec![1u64; 8];
        let picks = pick_relays(&weights, 6, None, &mut rng).unwrap();
        assert_eq!(picks.len(), 6);
    }

    #[test]
    fn pick_relays_errors_with_too_few_relays() {
        let mut rng = derive_rng(3, "few");
        assert!(pick_relays(&[1, 1], 3, None, &mut rng).is_err());
    }

    #[test]
    fn pinned_exit_is_always_the_last_hop() {
        let mut rng = derive_rng(3, "pinned");
        let weights = vec![1u64; 6];
        for _ in 0..50 {
            let picks = pick_relays(&weights, 3, Some(4), &mut rng).unwrap();
            assert_eq!(*picks.last().unwrap(), 4);
            assert!(!picks[..2].contains(&4));
        }
    }

    #[test]
    fn capacity_weighting_biases_selection() {
        let mut rng = derive_rng(3, "weighted");
        let weights = vec![1u64, 1, 8];
        let mut hits = [0usize; 3];
        for _ in 0..5000 {
            hits[pick_weighted(&weights, &mut rng)] += 1;
        }
        assert!(hits[2] > hits[0] * 4, "{hits:?}");
        assert!(hits[2] > hits[1] * 4, "{hits:?}");
    }
}
