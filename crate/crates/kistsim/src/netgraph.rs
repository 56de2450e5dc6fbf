//! Internet path model: a complete graph of per-edge latency and packet loss,
//! with the latency-derived loss function and its no-loss/base/high variants.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::engine::SimTime;

/// Hard cap on one-way edge latency.
pub const MAX_EDGE_LATENCY: SimTime = SimTime::from_millis(300);
/// Hard cap on edge packet loss (the high model's 3% ceiling).
pub const MAX_EDGE_LOSS: f64 = 0.03;

/// Router vertex; ids are contiguous from 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VertexId(pub u32);

/// One undirected edge: one-way latency plus a per-packet drop probability,
/// identical in both directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub latency: SimTime,
    pub loss: f64,
}

/// Packet loss model variants applied on top of an edge's base loss rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LossModel {
    None,
    #[default]
    Base,
    High,
}

impl fmt::Display for LossModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossModel::None => write!(f, "none"),
            LossModel::Base => write!(f, "base"),
            LossModel::High => write!(f, "high"),
        }
    }
}

impl std::str::FromStr for LossModel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(LossModel::None),
            "base" => Ok(LossModel::Base),
            "high" => Ok(LossModel::High),
            other => Err(format!("unknown loss model `{other}` (expected none|base|high)")),
        }
    }
}

/// Base loss rate for an edge as a linear function of its latency:
/// latency/300ms scaled to 1.5% at the 300ms maximum.
fn base_loss_rate(latency: SimTime) -> f64 {
    let latency_ms = latency.as_nanos() as f64 / 1e6;
    latency_ms / 300.0 * 0.015
}

fn apply_model(base: f64, model: LossModel) -> f64 {
    match model {
        LossModel::None => 0.0,
        LossModel::Base => base,
        LossModel::High => (2.0 * base).min(MAX_EDGE_LOSS),
    }
}

/// Per-packet loss probability for an edge of the given latency under a model.
///
/// Latency outside (0, 300ms] is a configuration fault.
pub fn loss_rate(latency: SimTime, model: LossModel) -> Result<f64, GraphError> {
    if latency == SimTime::ZERO || latency > MAX_EDGE_LATENCY {
        return Err(GraphError::LatencyOutOfRange { latency });
    }
    Ok(apply_model(base_loss_rate(latency), model))
}

/// Latency distribution for synthetic graphs.
///
/// The default is uniform on [5ms, 150ms]; the heavy-tailed variant sends a
/// tenth of the edges into the (hi, 300ms] tail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatencyLaw {
    Uniform { lo: SimTime, hi: SimTime },
    HeavyTail { lo: SimTime, hi: SimTime },
}

impl Default for LatencyLaw {
    fn default() -> Self {
        LatencyLaw::Uniform {
            lo: SimTime::from_millis(5),
            hi: SimTime::from_millis(150),
        }
    }
}

impl LatencyLaw {
    fn sample(&self, rng: &mut ChaCha12Rng) -> SimTime {
        // Integer-microsecond draws keep graph construction exactly
        // reproducible across platforms.
        match *self {
            LatencyLaw::Uniform { lo, hi } => {
                let us = rng.gen_range(lo.as_nanos() / 1_000..=hi.as_nanos() / 1_000);
                SimTime::from_micros(us)
            }
            LatencyLaw::HeavyTail { lo, hi } => {
                let tail = rng.gen_range(0u32..10) == 0;
                let (a, b) = if tail {
                    (hi.as_nanos() / 1_000 + 1, MAX_EDGE_LATENCY.as_nanos() / 1_000)
                } else {
                    (lo.as_nanos() / 1_000, hi.as_nanos() / 1_000)
                };
                SimTime::from_micros(rng.gen_range(a..=b))
            }
        }
    }
}

/// Outcome of pushing one packet onto an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransmitOutcome {
    Delivered { at: SimTime },
    Dropped,
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("edge latency {latency} outside (0, 300ms]")]
    LatencyOutOfRange { latency: SimTime },
    #[error("a graph needs at least 2 vertices, got {0}")]
    TooFewVertices(u32),
    #[error("graph file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("failed to read graph file: {0}")]
    Io(#[from] std::io::Error),
}

/// Complete graph over `n` vertices with per-edge latency and loss.
/// Immutable after build.
#[derive(Debug, Clone)]
pub struct Graph {
    n: u32,
    edges: Vec<Edge>,
}

impl Graph {
    /// Builds a synthetic complete graph: latencies drawn from `law`, loss set
    /// to `loss_rate(latency, model)` for every edge.
    pub fn build(
        n_vertices: u32,
        law: LatencyLaw,
        model: LossModel,
        rng: &mut ChaCha12Rng,
    ) -> Result<Graph, GraphError> {
        if n_vertices < 2 {
            return Err(GraphError::TooFewVertices(n_vertices));
        }
        let n_edges = (n_vertices as usize * (n_vertices as usize - 1)) / 2;
        let mut edges = Vec::with_capacity(n_edges);
        for _ in 0..n_edges {
            let latency = law.sample(rng);
            let loss = loss_rate(latency, model)?;
            edges.push(Edge { latency, loss });
        }
        Ok(Graph { n: n_vertices, edges })
    }

    /// Loads a graph from the text format (`vertices N` header, then one
    /// `u v latency_us loss_ppm` line per edge), applying the loss model to
    /// each edge's stored base loss. Strict: every unordered pair exactly
    /// once, no self-loops.
    pub fn load(path: &Path, model: LossModel) -> Result<Graph, GraphError> {
        let text = std::fs::read_to_string(path)?;
        Graph::parse(&text, model)
    }

    pub fn parse(text: &str, model: LossModel) -> Result<Graph, GraphError> {
        let fail = |line: usize, message: String| GraphError::Parse { line, message };
        let mut lines = text.lines().enumerate();
        let (hline, header) = lines
            .next()
            .ok_or_else(|| fail(1, "empty file".to_owned()))?;
        let n: u32 = match header.split_whitespace().collect::<Vec<_>>()[..] {
            ["vertices", count] => count
                .parse()
                .map_err(|e| fail(hline + 1, format!("bad vertex count: {e}")))?,
            _ => return Err(fail(hline + 1, "expected header `vertices N`".to_owned())),
        };
        if n < 2 {
            return Err(GraphError::TooFewVertices(n));
        }
        let n_edges = (n as usize * (n as usize - 1)) / 2;
        let mut edges: Vec<Option<Edge>> = vec![None; n_edges];
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(fail(lineno, format!("expected `u v latency_us loss_ppm`, got {} fields", parts.len())));
            }
            let u: u32 = parts[0].parse().map_err(|e| fail(lineno, format!("bad u: {e}")))?;
            let v: u32 = parts[1].parse().map_err(|e| fail(lineno, format!("bad v: {e}")))?;
            let latency_us: u64 = parts[2].parse().map_err(|e| fail(lineno, format!("bad latency_us: {e}")))?;
            let loss_ppm: u32 = parts[3].parse().map_err(|e| fail(lineno, format!("bad loss_ppm: {e}")))?;
            if u == v {
                return Err(fail(lineno, format!("self-loop on vertex {u}")));
            }
            if u >= n || v >= n {
                return Err(fail(lineno, format!("vertex out of range (n={n})")));
            }
            let latency = SimTime::from_micros(latency_us);
            if latency == SimTime::ZERO || latency > MAX_EDGE_LATENCY {
                return Err(fail(lineno, format!("latency {latency_us}us outside (0, 300ms]")));
            }
            if loss_ppm > 30_000 {
                return Err(fail(lineno, format!("loss {loss_ppm}ppm exceeds the 3% cap")));
            }
            let idx = Graph::index_for(n, VertexId(u), VertexId(v));
            if edges[idx].is_some() {
                return Err(fail(lineno, format!("duplicate edge {u} {v}")));
            }
            let base = loss_ppm as f64 / 1e6;
            edges[idx] = Some(Edge {
                latency,
                loss: apply_model(base, model),
            });
        }
        let mut out = Vec::with_capacity(n_edges);
        for (idx, e) in edges.into_iter().enumerate() {
            match e {
                Some(e) => out.push(e),
                None => {
                    return Err(GraphError::Parse {
                        line: 0,
                        message: format!("incomplete graph: edge index {idx} missing"),
                    })
                }
            }
        }
        Ok(Graph { n, edges: out })
    }

    /// Serializes in the load format, storing loss as parts-per-million of the
    /// edge's current (model-applied) loss.
    pub fn to_file_string(&self) -> String {
        let mut s = format!("vertices {}\n", self.n);
        for u in 0..self.n {
            for v in (u + 1)..self.n {
                let e = self.edge(VertexId(u), VertexId(v));
                let ppm = (e.loss * 1e6).round() as u64;
                s.push_str(&format!("{u} {v} {} {ppm}\n", e.latency.as_nanos() / 1_000));
            }
        }
        s
    }

    pub fn n_vertices(&self) -> u32 {
        self.n
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    fn index_for(n: u32, a: VertexId, b: VertexId) -> usize {
        assert_ne!(a, b, "no self-edges in a complete graph");
        let (u, v) = if a.0 < b.0 { (a.0 as usize, b.0 as usize) } else { (b.0 as usize, a.0 as usize) };
        let n = n as usize;
        // Upper-triangular row-major index.
        u * n - u * (u + 1) / 2 + (v - u - 1)
    }

    pub fn edge(&self, a: VertexId, b: VertexId) -> &Edge {
        &self.edges[Graph::index_for(self.n, a, b)]
    }

    /// Sends one packet across the edge: delivered at `now + latency` with
    /// probability `1 - loss`, otherwise dropped with no delivery event.
    pub fn transmit(&self, a: VertexId, b: VertexId, now: SimTime, rng: &mut ChaCha12Rng) -> TransmitOutcome {
        let edge = self.edge(a, b);
        if edge.loss > 0.0 && rng.gen::<f64>() < edge.loss {
            TransmitOutcome::Dropped
        } else {
            TransmitOutcome::Delivered { at: now + edge.latency }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::derive_rng;

    #[test]
    fn base_model_at_max_latency_is_one_and_a_half_percent() {
        assert_eq!(loss_rate(SimTime::from_millis(300), LossModel::Base).unwrap(), 0.015);
    }

    #[test]
    fn none_model_is_zero_everywhere() {
        for ms in [1u64, 50, 150, 300] {
            assert_eq!(loss_rate(SimTime::from_millis(ms), LossModel::None).unwrap(), 0.0);
        }
    }

    #[test]
    fn high_model_doubles_base_under_the_cap() {
        // 2 * (150/300) * 0.015 = 0.015, below the 3% cap.
        let expected = 2.0 * (150.0 / 300.0 * 0.015);
        assert_eq!(loss_rate(SimTime::from_millis(150), LossModel::High).unwrap(), expected);
        assert_eq!(expected, 0.015);
    }

    #[test]
    fn high_model_caps_at_three_percent() {
        // 2 * base(300ms) = 3% exactly; nothing may exceed it.
        assert_eq!(loss_rate(SimTime::from_millis(300), LossModel::High).unwrap(), 0.03);
        for ms in 1..=300u64 {
            let l = loss_rate(SimTime::from_millis(ms), LossModel::High).unwrap();
            assert!(l <= MAX_EDGE_LOSS, "{ms}ms -> {l}");
        }
    }

    #[test]
    fn loss_rate_rejects_latency_out_of_range() {
        assert!(loss_rate(SimTime::ZERO, LossModel::Base).is_err());
        assert!(loss_rate(SimTime::from_millis(301), LossModel::Base).is_err());
    }

    #[test]
    fn loss_rate_is_monotone_in_latency_per_model() {
        for model in [LossModel::None, LossModel::Base, LossModel::High] {
            let mut prev = -1.0;
            for us in (1_000..=300_000u64).step_by(997) {
                let l = loss_rate(SimTime::from_micros(us), model).unwrap();
                assert!(l >= prev);
                prev = l;
            }
        }
    }

    #[test]
    fn lossless_edge_always_delivers_at_now_plus_latency() {
        let mut rng = derive_rng(3, "t");
        let g = Graph::parse("vertices 2\n0 1 20000 0\n", LossModel::Base).unwrap();
        for _ in 0..50 {
            let out = g.transmit(VertexId(0), VertexId(1), SimTime::from_secs(1), &mut rng);
            assert_eq!(out, TransmitOutcome::Delivered { at: SimTime::from_secs(1) + SimTime::from_millis(20) });
        }
    }

    #[test]
    fn certain_loss_never_delivers() {
        let mut rng = derive_rng(3, "t");
        let mut g = Graph::parse("vertices 2\n0 1 20000 0\n", LossModel::Base).unwrap();
        g.edges[0].loss = 1.0;
        for _ in 0..50 {
            assert_eq!(g.transmit(VertexId(0), VertexId(1), SimTime::ZERO, &mut rng), TransmitOutcome::Dropped);
        }
    }

    #[test]
    fn drop_fraction_matches_bernoulli_mean() {
        // 1e5 transmissions at loss 0.015: drop fraction within ±0.002.
        let mut rng = derive_rng(11, "mc");
        let g = Graph::parse("vertices 2\n0 1 300000 15000\n", LossModel::Base).unwrap();
        assert_eq!(g.edge(VertexId(0), VertexId(1)).loss, 0.015);
        let n = 100_000;
        let dropped = (0..n)
            .filter(|_| g.transmit(VertexId(0), VertexId(1), SimTime::ZERO, &mut rng) == TransmitOutcome::Dropped)
            .count();
        let frac = dropped as f64 / n as f64;
        assert!((frac - 0.015).abs() < 0.002, "drop fraction {frac}");
    }

    #[test]
    fn complete_graph_edge_counts() {
        let mut rng = derive_rng(5, "g");
        let g2 = Graph::build(2, LatencyLaw::default(), LossModel::Base, &mut rng).unwrap();
        assert_eq!(g2.n_edges(), 1);
        let g10 = Graph::build(10, LatencyLaw::default(), LossModel::Base, &mut rng).unwrap();
        assert_eq!(g10.n_edges(), 45);
        for u in 0..10u32 {
            for v in (u + 1)..10 {
                let e = g10.edge(VertexId(u), VertexId(v));
                assert!(e.latency <= MAX_EDGE_LATENCY);
                assert!(e.latency > SimTime::ZERO);
            }
        }
    }

    #[test]
    fn build_rejects_fewer_than_two_vertices() {
        let mut rng = derive_rng(5, "g");
        assert!(Graph::build(1, LatencyLaw::default(), LossModel::Base, &mut rng).is_err());
    }

    #[test]
    fn synthetic_base_losses_match_the_formula_exactly() {
        // Recompute latency/300 * 1.5% per edge in one fixed order of
        // operations; equality must be exact.
        let mut rng = derive_rng(7, "g");
        let g = Graph::build(12, LatencyLaw::default(), LossModel::Base, &mut rng).unwrap();
        for u in 0..12u32 {
            for v in (u + 1)..12 {
                let e = g.edge(VertexId(u), VertexId(v));
                let latency_ms = e.latency.as_nanos() as f64 / 1e6;
                let expected = latency_ms / 300.0 * 0.015;
                assert_eq!(e.loss, expected);
            }
        }
    }

    #[test]
    fn heavy_tail_law_stays_within_the_latency_cap() {
        let mut rng = derive_rng(9, "g");
        let law = LatencyLaw::HeavyTail { lo: SimTime::from_millis(5), hi: SimTime::from_millis(150) };
        let g = Graph::build(30, law, LossModel::High, &mut rng).unwrap();
        let mut tail_seen = false;
        for u in 0..30u32 {
            for v in (u + 1)..30 {
                let e = g.edge(VertexId(u), VertexId(v));
                assert!(e.latency > SimTime::ZERO && e.latency <= MAX_EDGE_LATENCY);
                assert!(e.loss <= MAX_EDGE_LOSS);
                if e.latency > SimTime::from_millis(150) {
                    tail_seen = true;
                }
            }
        }
        assert!(tail_seen, "expected at least one tail edge among 435");
    }

    #[test]
    fn parse_rejects_self_loops_duplicates_and_gaps() {
        let self_loop = "vertices 2\n0 0 1000 0\n";
        assert!(matches!(Graph::parse(self_loop, LossModel::Base), Err(GraphError::Parse { line: 2, .. })));

        let dup = "vertices 2\n0 1 1000 0\n1 0 2000 0\n";
        assert!(matches!(Graph::parse(dup, LossModel::Base), Err(GraphError::Parse { line: 3, .. })));

        let missing = "vertices 3\n0 1 1000 0\n";
        assert!(Graph::parse(missing, LossModel::Base).is_err());

        let bad_loss = "vertices 2\n0 1 1000 40000\n";
        assert!(Graph::parse(bad_loss, LossModel::Base).is_err());
    }

    #[test]
    fn file_roundtrip_preserves_edges() {
        let mut rng = derive_rng(21, "g");
        let g = Graph::build(6, LatencyLaw::default(), LossModel::None, &mut rng).unwrap();
        let text = g.to_file_string();
        let g2 = Graph::parse(&text, LossModel::None).unwrap();
        for u in 0..6u32 {
            for v in (u + 1)..6 {
                assert_eq!(g.edge(VertexId(u), VertexId(v)).latency, g2.edge(VertexId(u), VertexId(v)).latency);
            }
        }
    }

    #[test]
    fn loaded_graph_applies_the_loss_model() {
        let text = "vertices 2\n0 1 150000 15000\n";
        let base = Graph::parse(text, LossModel::Base).unwrap();
        assert_eq!(base.edge(VertexId(0), VertexId(1)).loss, 0.015);
        let none = Graph::parse(text, LossModel::None).unwrap();
        assert_eq!(none.edge(VertexId(0), VertexId(1)).loss, 0.0);
        let high = Graph::parse(text, LossModel::High).unwrap();
        assert_eq!(high.edge(VertexId(0), VertexId(1)).loss, 0.03);
    }
}
