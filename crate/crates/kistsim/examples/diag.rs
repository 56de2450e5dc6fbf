//! Diagnostic: step a spec through time and dump where cells are parked,
//! split by client model and hop position.

use kistsim::engine::SimTime;
use kistsim::experiment::{self, ExperimentSpec};
use kistsim::sim::Role;
use kistsim::traffic::ClientModel;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let spec_path = args.get(1).expect("usage: diag <spec> [duration_s]");
    let mut spec = ExperimentSpec::parse_file(std::path::Path::new(spec_path)).unwrap();
    if let Some(d) = args.get(2) {
        spec.duration_s = d.parse().unwrap();
    }
    let (mut sim, mut engine) = experiment::build(&spec).unwrap();
    let step = SimTime::from_secs(30);
    let end = SimTime::from_secs(spec.duration_s);
    let mut t = SimTime::ZERO;
    while t < end {
        t = (t + step).min(end);
        engine
            .run_until(t, &mut sim, |eng, sim, ev| sim.handle(eng, ev))
            .unwrap();

        // occupancy by (model, hop index)
        let mut by_model_hop = std::collections::BTreeMap::new();
        let mut outbuf_cells = 0u64;
        for relay in &sim.relays {
            for (cid, leg) in &relay.legs {
                let meta = &sim.circuits[cid.0 as usize];
                let model = match sim.role(meta.client) {
                    Role::Client(i) => sim.clients[i].model,
                    _ => ClientModel::Web,
                };
                // hop index of this relay on the circuit
                let hop = meta
                    .relays
                    .iter()
                    .position(|_| false)
                    .unwrap_or_else(|| {
                        // find by comparing conns
                        meta.conns
                            .iter()
                            .position(|c| *c == leg.conn_to_client)
                            .unwrap_or(99)
                    });
                let n = (leg.to_server.cells.len() + leg.to_client.cells.len()) as u64;
                if n > 0 {
                    *by_model_hop.entry((format!("{model:?}"), hop)).or_insert(0u64) += n;
                }
            }
            for sched in relay.scheds.values() {
                outbuf_cells += sched.outbuf.cell_count() as u64;
            }
        }
        let transit: u64 = sim
            .conns
            .iter()
            .map(|c| (c.ab.in_transit.len() + c.ba.in_transit.len()) as u64)
            .sum();
        println!(
            "t={:>4}s queued_by(model,hop)={:?} outbufs={} transit={}",
            t.as_nanos() / 1_000_000_000,
            by_model_hop,
            outbuf_cells,
            transit
        );
    }
    // top parked legs at the end with downstream-conn context
    let mut worst: Vec<(usize, String, usize, u64, u32, String)> = Vec::new();
    for (r, relay) in sim.relays.iter().enumerate() {
        let relay_node = kistsim::engine::NodeId(r as u32); // relays are added first
        for (cid, leg) in &relay.legs {
            let (to_client, to_server) = (leg.to_client.cells.len(), leg.to_server.cells.len());
            let n = to_client + to_server;
            if n > 200 {
                let meta = &sim.circuits[cid.0 as usize];
                let model = match sim.role(meta.client) {
                    Role::Client(i) => format!("{:?}", sim.clients[i].model),
                    _ => "?".into(),
                };
                let hop = meta.conns.iter().position(|c| *c == leg.conn_to_client).unwrap_or(99);
                // downloads flow toward the client
                let down_conn = if to_client >= to_server { leg.conn_to_client } else { leg.conn_to_server };
                let conn = sim.conn(down_conn);
                let pipe = conn.pipe(conn.dir_from(relay_node));
                let ctx = format!(
                    "down cwnd={} writable={} notsent={} flight={}",
                    pipe.tcp.cwnd(),
                    pipe.tcp.writable(),
                    pipe.tcp.notsent(),
                    pipe.tcp.flight_segments()
                );
                worst.push((n, model, hop, cid.0, r as u32, ctx));
            }
        }
    }
    worst.sort_unstable();
    worst.reverse();
    println!("worst legs (cells, model, hop, circuit, relay, downstream):");
    for w in worst.iter().take(12) {
        println!("  {w:?}");
    }
}
