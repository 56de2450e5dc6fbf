//! Behavioral checks of the two socket scheduling policies on hand-built
//! relay scenarios: per-socket limits, cross-socket priority, the deferred
//! outbuf flush, backpressure, and AMAP's drain-it-all semantics.

use kistsim::engine::{derive_rng, Engine, NodeId, SimTime};
use kistsim::netgraph::{Graph, LatencyLaw, LossModel};
use kistsim::relay::{Cell, CellId, CellKind, CellTrace, CircuitId, ConnId, DownloadId, TravelDir, CELL_LEN};
use kistsim::sched::PolicyConfig;
use kistsim::sim::{Ev, Sim, SimParams};

fn cell(id: u64, circuit: u64) -> Cell {
    Cell {
        id: CellId(id),
        circuit: CircuitId(circuit),
        download: DownloadId(0),
        kind: CellKind::Payload { payload_len: 498, last: false },
        trace: CellTrace::default(),
    }
}

/// A relay under test wired to `peers` neighbor relays, one conn each.
struct Rig {
    sim: Sim,
    engine: Engine<Ev>,
    relay: NodeId,
    conns: Vec<ConnId>,
}

fn rig(peers: u32, params: SimParams) -> Rig {
    let mut rng = derive_rng(3, "sched-rig");
    let graph = Graph::build(
        peers + 2,
        LatencyLaw::Uniform { lo: SimTime::from_millis(10), hi: SimTime::from_millis(10) },
        LossModel::None,
        &mut rng,
    )
    .unwrap();
    let mut sim = Sim::new(graph, params);
    let relay = sim.add_relay(10 * 1024 * 1024);
    let client_side = sim.add_relay(10 * 1024 * 1024);
    let mut conns = Vec::new();
    let client_conn = sim.create_conn(client_side, relay);
    for _ in 0..peers {
        let peer = sim.add_relay(10 * 1024 * 1024);
        conns.push(sim.create_conn(relay, peer));
    }
    // one circuit per peer conn, entering from the shared client-side conn
    for (i, &c) in conns.iter().enumerate() {
        sim.relays[0].attach_circuit(CircuitId(i as u64), client_conn, c);
    }
    let engine = Engine::new(3);
    Rig { sim, engine, relay, conns }
}

fn enqueue(rig: &mut Rig, circuit: u64, n: u64, first_id: u64) {
    let now = rig.engine.now();
    for i in 0..n {
        rig.sim.relays[0]
            .enqueue_cell(CircuitId(circuit), TravelDir::ToServer, cell(first_id + i, circuit), now)
            .unwrap();
    }
}

#[test]
fn kist_writes_at_most_the_per_socket_limit_and_leaves_the_rest_queued() {
    // mss 256, cwnd 3, nothing outstanding: limit = 2*3*256 = 1536 = 3 cells.
    let mut params = SimParams::default();
    params.tcp.mss = 256;
    params.tcp.init_cwnd = 3;
    let mut r = rig(1, params);
    enqueue(&mut r, 0, 10, 0);
    r.sim.kist_tick(&mut r.engine, r.relay);

    let conn = r.sim.conn(r.conns[0]);
    let pipe = conn.pipe(conn.dir_from(r.relay));
    assert_eq!(pipe.tcp.bytes_written(), 1536, "exactly floor(limit/512)*512 bytes");
    // remainder stays in the circuit queue, not the outbuf
    assert!(r.sim.relays[0].scheds[&r.conns[0]].outbuf.is_empty());
    let leg = &r.sim.relays[0].legs[&CircuitId(0)];
    assert_eq!(leg.to_server.cells.len(), 7);
    assert_eq!(r.sim.metrics.counters.limit_violations, 0);
}

#[test]
fn kist_disabled_limit_drains_everything_writable() {
    let mut params = SimParams::default();
    params.tcp.mss = 256;
    params.tcp.init_cwnd = 3;
    params.policy.per_socket_limit_enabled = false;
    let mut r = rig(1, params);
    enqueue(&mut r, 0, 10, 0);
    r.sim.kist_tick(&mut r.engine, r.relay);
    let conn = r.sim.conn(r.conns[0]);
    let pipe = conn.pipe(conn.dir_from(r.relay));
    assert_eq!(pipe.tcp.bytes_written(), 10 * CELL_LEN, "ablation: no per-socket cap");
}

#[test]
fn kist_prioritizes_the_low_ewma_socket_first() {
    // Web circuit (ewma ~1) on X, bulk (ewma 90) on Y: the first kernel write
    // of the tick comes from X.
    let mut r = rig(2, SimParams::default());
    let now = SimTime::ZERO;
    enqueue(&mut r, 0, 5, 0); // becomes the web conn
    enqueue(&mut r, 1, 5, 100); // bulk conn
    r.sim.relays[0]
        .legs
        .get_mut(&CircuitId(0))
        .unwrap()
        .to_server
        .ewma
        .update(now, 1);
    r.sim.relays[0]
        .legs
        .get_mut(&CircuitId(1))
        .unwrap()
        .to_server
        .ewma
        .update(now, 90);
    r.sim.kist_tick(&mut r.engine, r.relay);
    let nic = r.sim.hosts[r.relay.0 as usize].nic_segments();
    assert!(!nic.is_empty());
    assert_eq!(nic[0].0, r.conns[0], "web socket must reach the kernel first: {nic:?}");
}

#[test]
fn kist_accumulates_consecutive_same_socket_cells_into_one_flush() {
    // A's two cells beat B's key twice in a row, so they ride one kernel
    // write: the NIC sees one 1024-byte segment from A, then B's 512.
    let mut r = rig(2, SimParams::default());
    enqueue(&mut r, 0, 2, 0);
    enqueue(&mut r, 1, 1, 100);
    r.sim.relays[0]
        .legs
        .get_mut(&CircuitId(1))
        .unwrap()
        .to_server
        .ewma
        .update(SimTime::ZERO, 50);
    r.sim.kist_tick(&mut r.engine, r.relay);
    let nic = r.sim.hosts[r.relay.0 as usize].nic_segments();
    assert_eq!(nic, vec![(r.conns[0], 1024), (r.conns[1], 512)]);
}

#[test]
fn kernel_backpressure_excludes_a_socket_from_the_pending_set() {
    let mut params = SimParams::default();
    params.tcp.init_buffer = 2048;
    params.tcp.max_buffer = 2048;
    let mut r = rig(2, params);
    enqueue(&mut r, 0, 2, 0);
    enqueue(&mut r, 1, 2, 100);
    // Fill conn 0's kernel buffer directly: writable drops.
    {
        let conn = r.sim.conn_mut(r.conns[0]);
        let dir = conn.dir_from(r.relay);
        conn.pipe_mut(dir).tcp.write(2048, SimTime::ZERO);
        assert!(!conn.pipe(dir).tcp.writable());
    }
    let calls_before = r.sim.metrics.counters.tcpinfo_calls;
    let set = r.sim.get_pending_sockets(r.relay, SimTime::ZERO);
    assert_eq!(set.len(), 1, "full socket excluded this tick");
    assert_eq!(r.sim.metrics.counters.tcpinfo_calls - calls_before, 1);
}

#[test]
fn pending_set_counts_only_write_pending_sockets() {
    // 8 open connections, cells pending on 3: snapshots = |set| = 3.
    let mut r = rig(8, SimParams::default());
    enqueue(&mut r, 1, 1, 0);
    enqueue(&mut r, 4, 2, 10);
    enqueue(&mut r, 6, 3, 20);
    let calls_before = r.sim.metrics.counters.tcpinfo_calls;
    let set = r.sim.get_pending_sockets(r.relay, SimTime::ZERO);
    assert_eq!(set.len(), 3);
    assert_eq!(r.sim.metrics.counters.tcpinfo_calls - calls_before, 3);
}

#[test]
fn empty_pending_set_makes_the_tick_a_no_op() {
    let mut r = rig(2, SimParams::default());
    r.sim.kist_tick(&mut r.engine, r.relay);
    assert_eq!(r.sim.metrics.counters.tcpinfo_calls, 0);
    for &c in &r.conns {
        let conn = r.sim.conn(c);
        assert_eq!(conn.pipe(conn.dir_from(r.relay)).tcp.bytes_written(), 0);
    }
}

#[test]
fn amap_writes_everything_on_one_trigger_when_the_kernel_has_room() {
    // 100 KiB pending, kernel free far larger: all of it is written now.
    let mut params = SimParams::default();
    params.policy = PolicyConfig::amap();
    params.tcp.init_buffer = 1024 * 1024;
    let mut r = rig(1, params);
    enqueue(&mut r, 0, 200, 0); // 200 cells = 102400 B
    r.sim.amap_run(&mut r.engine, r.relay, r.conns[0]);
    let conn = r.sim.conn(r.conns[0]);
    let pipe = conn.pipe(conn.dir_from(r.relay));
    assert_eq!(pipe.tcp.bytes_written(), 102_400);
    assert!(!r.sim.relays[0].wants_write(r.conns[0]));
}

#[test]
fn amap_stops_at_kernel_backpressure_and_waits_for_writable() {
    // Kernel accepts 10 KiB, then pushes back; the rest waits.
    let mut params = SimParams::default();
    params.policy = PolicyConfig::amap();
    params.tcp.init_buffer = 10 * 1024;
    params.tcp.max_buffer = 10 * 1024;
    // keep everything buffered: no sending
    params.tcp.init_cwnd = 0;
    let mut r = rig(1, params);
    enqueue(&mut r, 0, 200, 0);
    r.sim.amap_run(&mut r.engine, r.relay, r.conns[0]);
    let conn = r.sim.conn(r.conns[0]);
    let pipe = conn.pipe(conn.dir_from(r.relay));
    assert_eq!(pipe.tcp.bytes_written(), 10 * 1024);
    assert!(!pipe.tcp.writable());
    assert!(r.sim.relays[0].wants_write(r.conns[0]), "rest waits for the writable event");
}

#[test]
fn amap_drains_triggers_in_arrival_order() {
    // Cells on two sockets, triggers in order A then B: A is fully drained
    // into the kernel before B is considered.
    let mut params = SimParams::default();
    params.policy = PolicyConfig::amap();
    let mut r = rig(2, params);
    enqueue(&mut r, 0, 4, 0);
    enqueue(&mut r, 1, 4, 100);
    r.sim.amap_run(&mut r.engine, r.relay, r.conns[0]);
    r.sim.amap_run(&mut r.engine, r.relay, r.conns[1]);
    let nic = r.sim.hosts[r.relay.0 as usize].nic_segments();
    let first_b = nic.iter().position(|(c, _)| *c == r.conns[1]).unwrap();
    assert!(
        nic[..first_b].iter().all(|(c, _)| *c == r.conns[0]),
        "bulk backlog drains before the second socket: {nic:?}"
    );
    let a_bytes: u64 = nic.iter().filter(|(c, _)| *c == r.conns[0]).map(|(_, b)| b).sum();
    assert_eq!(a_bytes, 4 * CELL_LEN);
}

#[test]
fn kist_tick_applies_decay_lazily_at_the_comparison() {
    // After one half-life the idle circuit's 100 decays to 50 and beats the
    // active circuit's 62.
    let mut r = rig(2, SimParams::default());
    let hl = SimTime::from_secs(30);
    r.sim.relays[0]
        .legs
        .get_mut(&CircuitId(0))
        .unwrap()
        .to_server
        .ewma
        .update(SimTime::ZERO, 100);
    {
        let e = &mut r.sim.relays[0].legs.get_mut(&CircuitId(1)).unwrap().to_server.ewma;
        e.update(SimTime::ZERO, 2);
        e.update(hl, 61); // 2*0.5 + 61 = 62
    }
    // enqueue at t=hl so decay matters
    r.engine.schedule(hl, r.relay, Ev::KistTick);
    let relay_node = r.relay;
    let conns = r.conns.clone();
    let mut enqueued = false;
    r.engine
        .run_until(hl, &mut r.sim, |eng, sim, ev| {
            if !enqueued {
                enqueued = true;
                let now = eng.now();
                sim.relays[0]
                    .enqueue_cell(CircuitId(0), TravelDir::ToServer, cell(0, 0), now)
                    .unwrap();
                sim.relays[0]
                    .enqueue_cell(CircuitId(1), TravelDir::ToServer, cell(1, 1), now)
                    .unwrap();
            }
            sim.handle(eng, ev)
        })
        .unwrap();
    let nic = r.sim.hosts[relay_node.0 as usize].nic_segments();
    assert_eq!(nic[0].0, conns[0], "decayed 50 beats active 62: {nic:?}");
}
