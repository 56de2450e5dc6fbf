//! Experiment front-end: the flat key=value spec format, world construction,
//! single runs, the load/loss sweep matrix, and run comparison.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::engine::{derive_rng, Engine, RunSummary, SimTime};
use crate::metrics::{self, CompareReport, MetricsError};
use crate::netgraph::{Graph, LatencyLaw, LossModel};
use crate::sched::{Policy, PolicyConfig};
use crate::sim::{Ev, Sim, SimParams};
use crate::tcp::TcpConfig;
use crate::traffic::ClientModel;

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("spec line {line}: {key}: {message}")]
    Invalid { line: usize, key: String, message: String },
    #[error("spec: {0}")]
    Semantic(String),
    #[error("failed to read spec: {0}")]
    Io(#[from] std::io::Error),
    #[error("graph file: {0}")]
    Graph(#[from] crate::netgraph::GraphError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphSource {
    Synthetic,
    File(PathBuf),
}

/// Full description of one run. The flat key=value serialization is the
/// on-disk spec format and the reproducibility record in every manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub duration_s: u64,
    pub n_relays: u32,
    /// 0 means one server per ten clients (at least one).
    pub n_servers: u32,
    pub clients_web: u32,
    pub clients_bulk: u32,
    pub clients_perf: u32,
    pub hops: u32,
    pub policy: Policy,
    pub kist_interval_ms: u64,
    pub per_socket_limit: bool,
    pub loss_model: LossModel,
    pub load_factor: f64,
    pub graph: GraphSource,
    pub latency_law: String,
    pub latency_min_ms: u64,
    pub latency_max_ms: u64,
    pub relay_rate_mbit: f64,
    pub relay_rate_spread: Vec<f64>,
    pub client_rate_mbit: f64,
    pub server_rate_mbit: f64,
    pub ewma_halflife_s: u64,
    pub trace_sample: u64,
    pub pinned_exit: Option<u32>,
    pub client_start_spread_s: u64,
    pub slow_start_after_idle: bool,
}

impl Default for ExperimentSpec {
    /// The desk-scale base experiment: 20 relays, ~500 clients, 10 simulated
    /// minutes, KIST at 10ms, base loss.
    fn default() -> Self {
        ExperimentSpec {
            seed: 42,
            duration_s: 600,
            n_relays: 20,
            n_servers: 0,
            clients_web: 480,
            clients_bulk: 15,
            clients_perf: 3,
            hops: 3,
            policy: Policy::Kist,
            kist_interval_ms: 10,
            per_socket_limit: true,
            loss_model: LossModel::Base,
            load_factor: 1.0,
            graph: GraphSource::Synthetic,
            latency_law: "uniform".into(),
            latency_min_ms: 5,
            latency_max_ms: 150,
            relay_rate_mbit: 16.0,
            relay_rate_spread: vec![0.5, 1.0, 2.0],
            client_rate_mbit: 16.0,
            server_rate_mbit: 50.0,
            ewma_halflife_s: 30,
            trace_sample: 1,
            pinned_exit: None,
            client_start_spread_s: 10,
            slow_start_after_idle: false,
        }
    }
}

impl ExperimentSpec {
    pub fn desk_base() -> Self {
        ExperimentSpec::default()
    }

    pub fn parse_file(path: &Path) -> Result<ExperimentSpec, SpecError> {
        let text = std::fs::read_to_string(path)?;
        let mut spec = Self::parse(&text)?;
        // resolve a relative graph file against the spec's directory
        if let GraphSource::File(p) = &spec.graph {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    spec.graph = GraphSource::File(dir.join(p));
                }
            }
            spec.validate_graph_file()?;
        }
        Ok(spec)
    }

    pub fn parse(text: &str) -> Result<ExperimentSpec, SpecError> {
        let mut spec = ExperimentSpec::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(SpecError::Invalid {
                    line: lineno,
                    key: line.to_owned(),
                    message: "expected key=value".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(SpecError::Invalid {
                    line: lineno,
                    key: key.to_owned(),
                    message: "duplicate key".into(),
                });
            }
            seen.push(key.to_owned());
            let fail = |message: String| SpecError::Invalid {
                line: lineno,
                key: key.to_owned(),
                message,
            };
            macro_rules! parse_as {
                ($t:ty) => {
                    value.parse::<$t>().map_err(|e| fail(e.to_string()))?
                };
            }
            match key {
                "seed" => spec.seed = parse_as!(u64),
                "duration_s" => spec.duration_s = parse_as!(u64),
                "n_relays" => spec.n_relays = parse_as!(u32),
                "n_servers" => spec.n_servers = parse_as!(u32),
                "clients_web" => spec.clients_web = parse_as!(u32),
                "clients_bulk" => spec.clients_bulk = parse_as!(u32),
                "clients_perf" => spec.clients_perf = parse_as!(u32),
                "hops" => spec.hops = parse_as!(u32),
                "policy" => spec.policy = value.parse().map_err(fail)?,
                "kist_interval_ms" => spec.kist_interval_ms = parse_as!(u64),
                "per_socket_limit" => {
                    spec.per_socket_limit = match value {
                        "on" => true,
                        "off" => false,
                        _ => return Err(fail("expected on|off".into())),
                    }
                }
                "loss_model" => spec.loss_model = value.parse().map_err(fail)?,
                "load_factor" => spec.load_factor = parse_as!(f64),
                "graph" => {
                    if value != "synthetic" {
                        return Err(fail("expected `synthetic` (or use graph_file=...)".into()));
                    }
                    spec.graph = GraphSource::Synthetic;
                }
                "graph_file" => spec.graph = GraphSource::File(PathBuf::from(value)),
                "latency_law" => {
                    if value != "uniform" && value != "heavytail" {
                        return Err(fail("expected uniform|heavytail".into()));
                    }
                    spec.latency_law = value.to_owned();
                }
                "latency_min_ms" => spec.latency_min_ms = parse_as!(u64),
                "latency_max_ms" => spec.latency_max_ms = parse_as!(u64),
                "relay_rate_mbit" => spec.relay_rate_mbit = parse_as!(f64),
                "relay_rate_spread" => {
                    spec.relay_rate_spread = value
                        .split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<Result<Vec<f64>, _>>()
                        .map_err(|e| fail(e.to_string()))?;
                }
                "client_rate_mbit" => spec.client_rate_mbit = parse_as!(f64),
                "server_rate_mbit" => spec.server_rate_mbit = parse_as!(f64),
                "ewma_halflife_s" => spec.ewma_halflife_s = parse_as!(u64),
                "trace_sample" => spec.trace_sample = parse_as!(u64),
                "pinned_exit" => {
                    spec.pinned_exit = if value == "none" {
                        None
                    } else {
                        Some(parse_as!(u32))
                    }
                }
                "client_start_spread_s" => spec.client_start_spread_s = parse_as!(u64),
                "slow_start_after_idle" => {
                    spec.slow_start_after_idle = match value {
                        "on" => true,
                        "off" => false,
                        _ => return Err(fail("expected on|off".into())),
                    }
                }
                _ => return Err(fail("unknown key".into())),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let fail = |m: String| Err(SpecError::Semantic(m));
        if self.duration_s == 0 {
            return fail("duration_s must be positive".into());
        }
        if self.hops != 3 && self.hops != 6 {
            return fail(format!("hops must be 3 or 6, got {}", self.hops));
        }
        if self.n_relays < self.hops {
            return fail(format!("n_relays {} < hops {}", self.n_relays, self.hops));
        }
        if self.kist_interval_ms == 0 {
            return fail("kist_interval_ms must be positive".into());
        }
        if !(self.load_factor > 0.0) {
            return fail("load_factor must be positive".into());
        }
        if self.trace_sample == 0 {
            return fail("trace_sample must be >= 1".into());
        }
        if self.relay_rate_mbit <= 0.0 || self.client_rate_mbit <= 0.0 || self.server_rate_mbit <= 0.0 {
            return fail("rates must be positive".into());
        }
        if self.relay_rate_spread.is_empty() || self.relay_rate_spread.iter().any(|&s| s <= 0.0) {
            return fail("relay_rate_spread must be non-empty and positive".into());
        }
        if self.latency_min_ms == 0 || self.latency_min_ms > self.latency_max_ms || self.latency_max_ms > 300 {
            return fail("latency bounds must satisfy 0 < min <= max <= 300".into());
        }
        if self.ewma_halflife_s == 0 {
            return fail("ewma_halflife_s must be positive".into());
        }
        if let Some(p) = self.pinned_exit {
            if p >= self.n_relays {
                return fail(format!("pinned_exit {p} out of range (n_relays {})", self.n_relays));
            }
        }
        if self.effective_clients() == 0 {
            return fail("at least one client required".into());
        }
        Ok(())
    }

    fn validate_graph_file(&self) -> Result<(), SpecError> {
        if let GraphSource::File(p) = &self.graph {
            let g = Graph::load(p, self.loss_model)?;
            let needed = self.total_hosts();
            if g.n_vertices() < needed {
                return Err(SpecError::Semantic(format!(
                    "graph file has {} vertices, need {needed} (relays + clients + servers)",
                    g.n_vertices()
                )));
            }
        }
        Ok(())
    }

    /// Canonical serialization; parse(serialize(s)) == s.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "duration_s={}", self.duration_s);
        let _ = writeln!(s, "n_relays={}", self.n_relays);
        let _ = writeln!(s, "n_servers={}", self.n_servers);
        let _ = writeln!(s, "clients_web={}", self.clients_web);
        let _ = writeln!(s, "clients_bulk={}", self.clients_bulk);
        let _ = writeln!(s, "clients_perf={}", self.clients_perf);
        let _ = writeln!(s, "hops={}", self.hops);
        let _ = writeln!(s, "policy={}", self.policy);
        let _ = writeln!(s, "kist_interval_ms={}", self.kist_interval_ms);
        let _ = writeln!(s, "per_socket_limit={}", if self.per_socket_limit { "on" } else { "off" });
        let _ = writeln!(s, "loss_model={}", self.loss_model);
        let _ = writeln!(s, "load_factor={}", self.load_factor);
        match &self.graph {
            GraphSource::Synthetic => {
                let _ = writeln!(s, "graph=synthetic");
            }
            GraphSource::File(p) => {
                let _ = writeln!(s, "graph_file={}", p.display());
            }
        }
        let _ = writeln!(s, "latency_law={}", self.latency_law);
        let _ = writeln!(s, "latency_min_ms={}", self.latency_min_ms);
        let _ = writeln!(s, "latency_max_ms={}", self.latency_max_ms);
        let _ = writeln!(s, "relay_rate_mbit={}", self.relay_rate_mbit);
        let spread: Vec<String> = self.relay_rate_spread.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "relay_rate_spread={}", spread.join(","));
        let _ = writeln!(s, "client_rate_mbit={}", self.client_rate_mbit);
        let _ = writeln!(s, "server_rate_mbit={}", self.server_rate_mbit);
        let _ = writeln!(s, "ewma_halflife_s={}", self.ewma_halflife_s);
        let _ = writeln!(s, "trace_sample={}", self.trace_sample);
        match self.pinned_exit {
            None => {
                let _ = writeln!(s, "pinned_exit=none");
            }
            Some(p) => {
                let _ = writeln!(s, "pinned_exit={p}");
            }
        }
        let _ = writeln!(s, "client_start_spread_s={}", self.client_start_spread_s);
        let _ = writeln!(s, "slow_start_after_idle={}", if self.slow_start_after_idle { "on" } else { "off" });
        s
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.serialize().as_bytes());
        format!("{digest:x}")
    }

    /// Manifest entries recording the full spec plus its hash.
    pub fn manifest_entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .serialize()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (format!("spec.{k}"), v.to_owned()))
            .collect();
        out.push(("spec.hash".into(), self.hash()));
        out
    }

    fn scaled(&self, count: u32) -> u32 {
        (f64::from(count) * self.load_factor).round() as u32
    }

    pub fn effective_web(&self) -> u32 {
        self.scaled(self.clients_web)
    }
    pub fn effective_bulk(&self) -> u32 {
        self.scaled(self.clients_bulk)
    }
    pub fn effective_perf(&self) -> u32 {
        self.scaled(self.clients_perf)
    }
    pub fn effective_clients(&self) -> u32 {
        self.effective_web() + self.effective_bulk() + self.effective_perf()
    }
    /// Server pool size; defaults to one per ten configured clients. Load
    /// scaling leaves it alone, so added clients raise per-server pressure.
    pub fn effective_servers(&self) -> u32 {
        if self.n_servers > 0 {
            self.n_servers
        } else {
            ((self.clients_web + self.clients_bulk + self.clients_perf) / 10).max(1)
        }
    }
    pub fn total_hosts(&self) -> u32 {
        self.n_relays + self.effective_clients() + self.effective_servers()
    }

    fn latency_law(&self) -> LatencyLaw {
        let lo = SimTime::from_millis(self.latency_min_ms);
        let hi = SimTime::from_millis(self.latency_max_ms);
        if self.latency_law == "heavytail" {
            LatencyLaw::HeavyTail { lo, hi }
        } else {
            LatencyLaw::Uniform { lo, hi }
        }
    }

    fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            policy: self.policy,
            kist_interval: SimTime::from_millis(self.kist_interval_ms),
            per_socket_limit_enabled: self.per_socket_limit,
        }
    }

    fn sim_params(&self) -> SimParams {
        let mut tcp = TcpConfig::default();
        tcp.slow_start_after_idle = self.slow_start_after_idle;
        SimParams {
            seed: self.seed,
            policy: self.policy_config(),
            tcp,
            ewma_halflife: SimTime::from_secs(self.ewma_halflife_s),
            nic_cap_segments: 1000,
            trace_sample: self.trace_sample,
            hops: self.hops,
            pinned_exit: self.pinned_exit,
        }
    }
}

fn mbit_to_bytes_per_sec(mbit: f64) -> u64 {
    (mbit * 1e6 / 8.0) as u64
}

/// A finished run: the simulation (with its metrics) and the spec that
/// produced it.
pub struct ExecutedRun {
    pub spec: ExperimentSpec,
    pub sim: Sim,
    pub summary: RunSummary,
}

impl ExecutedRun {
    pub fn export(&self, dir: &Path) -> Result<(), MetricsError> {
        self.sim.metrics.export_csv(dir, &self.spec.manifest_entries())?;
        Ok(())
    }
}

/// Builds the world described by a spec: graph, relay mesh, clients with
/// staggered starts, servers, and the policy tick train.
pub fn build(spec: &ExperimentSpec) -> Result<(Sim, Engine<Ev>), SpecError> {
    spec.validate()?;
    let graph = match &spec.graph {
        GraphSource::Synthetic => {
            let mut rng = derive_rng(spec.seed, "netgraph");
            Graph::build(spec.total_hosts(), spec.latency_law(), spec.loss_model, &mut rng)?
        }
        GraphSource::File(p) => {
            let g = Graph::load(p, spec.loss_model)?;
            if g.n_vertices() < spec.total_hosts() {
                return Err(SpecError::Semantic(format!(
                    "graph file has {} vertices, need {}",
                    g.n_vertices(),
                    spec.total_hosts()
                )));
            }
            g
        }
    };
    let mut sim = Sim::new(graph, spec.sim_params());
    let mut engine: Engine<Ev> = Engine::new(spec.seed);

    let mut relay_nodes = Vec::new();
    for i in 0..spec.n_relays {
        let spread = spec.relay_rate_spread[i as usize % spec.relay_rate_spread.len()];
        let rate = mbit_to_bytes_per_sec(spec.relay_rate_mbit * spread);
        relay_nodes.push(sim.add_relay(rate.max(1)));
    }
    let client_rate = mbit_to_bytes_per_sec(spec.client_rate_mbit).max(1);
    let mut client_nodes = Vec::new();
    for _ in 0..spec.effective_web() {
        client_nodes.push(sim.add_client(client_rate, ClientModel::Web));
    }
    for _ in 0..spec.effective_bulk() {
        client_nodes.push(sim.add_client(client_rate, ClientModel::Bulk));
    }
    for _ in 0..spec.effective_perf() {
        client_nodes.push(sim.add_client(client_rate, ClientModel::ShadowPerf));
    }
    let server_rate = mbit_to_bytes_per_sec(spec.server_rate_mbit).max(1);
    for _ in 0..spec.effective_servers() {
        sim.add_server(server_rate);
    }
    // Long-lived relay mesh, as relays keep connections to each other open.
    for i in 0..relay_nodes.len() {
        for j in (i + 1)..relay_nodes.len() {
            sim.ensure_conn(relay_nodes[i], relay_nodes[j]);
        }
    }
    if spec.policy == Policy::Kist {
        let interval_ns = SimTime::from_millis(spec.kist_interval_ms).as_nanos();
        for (i, &node) in relay_nodes.iter().enumerate() {
            let phase = engine.rng_uniform_u64(&format!("relay-{i}/kist-phase"), 0, interval_ns - 1);
            engine.schedule(SimTime::from_nanos(phase), node, Ev::KistTick);
        }
    }
    let spread_ns = SimTime::from_secs(spec.client_start_spread_s).as_nanos();
    for (ordinal, &node) in client_nodes.iter().enumerate() {
        let start = if spread_ns == 0 {
            0
        } else {
            engine.rng_uniform_u64(&format!("client-{ordinal}/start"), 0, spread_ns)
        };
        engine.schedule(SimTime::from_nanos(start), node, Ev::ClientStart);
    }
    Ok((sim, engine))
}

/// Runs a spec to completion in memory.
pub fn execute(spec: &ExperimentSpec) -> Result<ExecutedRun, SpecError> {
    let (mut sim, mut engine) = build(spec)?;
    let end = SimTime::from_secs(spec.duration_s);
    let summary = sim
        .run(&mut engine, end)
        .map_err(|e| SpecError::Semantic(format!("run aborted: {e}")))?;
    Ok(ExecutedRun { spec: spec.clone(), sim, summary })
}

/// Runs a spec and exports its metrics; on an engine fault the partial
/// output collected so far is still written.
pub fn run_to_dir(spec: &ExperimentSpec, dir: &Path) -> Result<ExecutedRun, SpecError> {
    let (mut sim, mut engine) = build(spec)?;
    let end = SimTime::from_secs(spec.duration_s);
    match sim.run(&mut engine, end) {
        Ok(summary) => {
            let run = ExecutedRun { spec: spec.clone(), sim, summary };
            run.export(dir).map_err(|e| SpecError::Semantic(e.to_string()))?;
            Ok(run)
        }
        Err(e) => {
            // preserve partial output for postmortem
            let _ = sim.metrics.export_csv(dir, &spec.manifest_entries());
            Err(SpecError::Semantic(format!("run aborted (partial output in {}): {e}", dir.display())))
        }
    }
}

/// The five experiment cells mirrored from the evaluation matrix: base,
/// low/high load, no/high loss.
pub const SWEEP_CELLS: [(&str, f64, LossModel); 5] = [
    ("base", 1.0, LossModel::Base),
    ("low-load", 0.6, LossModel::Base),
    ("high-load", 1.4, LossModel::Base),
    ("no-loss", 1.0, LossModel::None),
    ("high-loss", 1.0, LossModel::High),
];

#[derive(Debug)]
pub struct SweepCellResult {
    pub cell: String,
    pub policy: Policy,
    pub dir: PathBuf,
    pub outcome: Result<(), String>,
}

#[derive(Debug)]
pub struct SweepReport {
    pub cells: Vec<SweepCellResult>,
    pub comparisons: Vec<(String, CompareReport)>,
}

impl SweepReport {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.outcome.is_ok())
    }

    pub fn render(&self) -> String {
        let mut s = String::from("sweep results\n");
        for c in &self.cells {
            let status = match &c.outcome {
                Ok(()) => "ok".to_owned(),
                Err(e) => format!("FAILED: {e}"),
            };
            let _ = writeln!(s, "  {:<10} {:<5} {} ({})", c.cell, c.policy.to_string(), status, c.dir.display());
        }
        for (cell, report) in &self.comparisons {
            let _ = writeln!(s, "\n[{cell}]");
            s.push_str(&report.render());
        }
        s
    }
}

/// Runs the full 10-run matrix (2 policies x 5 cells) and compares each
/// matched pair. Failed cells are reported; the rest complete.
pub fn sweep(base: &ExperimentSpec, out_root: &Path, jobs: usize) -> Result<SweepReport, SpecError> {
    let mut tasks: Vec<(String, ExperimentSpec, PathBuf)> = Vec::new();
    for (cell, load, loss) in SWEEP_CELLS {
        for policy in [Policy::Amap, Policy::Kist] {
            let mut spec = base.clone();
            spec.load_factor = load;
            spec.loss_model = loss;
            spec.policy = policy;
            let dir = out_root.join(format!("{cell}-{policy}"));
            tasks.push((cell.to_owned(), spec, dir));
        }
    }
    let jobs = jobs.max(1);
    let mut cells: Vec<SweepCellResult> = Vec::new();
    for chunk in tasks.chunks(jobs) {
        let outcomes: Vec<SweepCellResult> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(cell, spec, dir)| {
                    scope.spawn(move || {
                        let outcome = run_to_dir(spec, dir).map(|_| ()).map_err(|e| e.to_string());
                        SweepCellResult {
                            cell: cell.clone(),
                            policy: spec.policy,
                            dir: dir.clone(),
                            outcome,
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker")).collect()
        });
        cells.extend(outcomes);
    }
    let mut comparisons = Vec::new();
    for (cell, _, _) in SWEEP_CELLS {
        let find = |policy: Policy| {
            cells
                .iter()
                .find(|c| c.cell == cell && c.policy == policy && c.outcome.is_ok())
                .map(|c| c.dir.clone())
        };
        if let (Some(amap), Some(kist)) = (find(Policy::Amap), find(Policy::Kist)) {
            match metrics::compare(&amap, &kist) {
                Ok(report) => comparisons.push((cell.to_owned(), report)),
                Err(e) => {
                    cells.push(SweepCellResult {
                        cell: cell.to_owned(),
                        policy: Policy::Kist,
                        dir: kist,
                        outcome: Err(format!("compare failed: {e}")),
                    });
                }
            }
        }
    }
    let report = SweepReport { cells, comparisons };
    std::fs::create_dir_all(out_root)?;
    std::fs::write(out_root.join("report.txt"), report.render())?;
    Ok(report)
}
