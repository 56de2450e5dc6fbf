//! Deterministic discrete-event core: virtual clock, time-ordered event queue,
//! and seeded named random streams shared by the rest of the simulator.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Virtual time in integer nanoseconds since simulation start.
///
/// Used for both instants and durations; integer arithmetic keeps event
/// ordering identical across platforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }
    pub const fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }
    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }
    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000_000)
    }
    pub const fn as_nanos(self) -> u64 {
        self.0
    }
    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }
    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl std::ops::Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Identifies a simulated node (host); index into the simulation's host table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Handle to a scheduled event, usable for cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventId(u64);

/// A scheduled event. `(fire_at, seq)` is a strict total order; `seq` breaks
/// same-time ties in FIFO insertion order.
#[derive(Debug)]
pub struct Event<P> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub target: NodeId,
    pub payload: P,
}

struct HeapEntry<P> {
    fire_at: SimTime,
    seq: u64,
    target: NodeId,
    payload: P,
}

impl<P> PartialEq for HeapEntry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}
impl<P> Eq for HeapEntry<P> {}
impl<P> PartialOrd for HeapEntry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for HeapEntry<P> {
    // Reversed: BinaryHeap is a max-heap, we want earliest (fire_at, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_at, other.seq).cmp(&(self.fire_at, self.seq))
    }
}

/// Summary of a completed `run_until`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSummary {
    pub events_processed: u64,
    pub clock: SimTime,
}

/// A handler fault, with the offending event identified.
#[derive(Debug, thiserror::Error)]
#[error("event handler fault at {at} (seq {seq}, target {target}): {message}")]
pub struct RunError {
    pub at: SimTime,
    pub seq: u64,
    pub target: NodeId,
    pub message: String,
}

/// Derives a stable 64-bit stream seed from the global seed and a label.
///
/// FNV-1a over the label bytes, mixed with the global seed; this is fixed
/// forever so that traces are reproducible across builds.
fn derive_seed(global_seed: u64, stream_id: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ global_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in stream_id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Creates a standalone generator for the given `(seed, label)` pair.
///
/// Same pair, same draw sequence, on every platform.
pub fn derive_rng(global_seed: u64, stream_id: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(global_seed, stream_id))
}

/// The discrete-event engine: clock, queue, and named RNG streams.
pub struct Engine<P> {
    clock: SimTime,
    next_seq: u64,
    queue: BinaryHeap<HeapEntry<P>>,
    cancelled: HashSet<u64>,
    seed: u64,
    streams: HashMap<String, ChaCha12Rng>,
}

impl<P> Engine<P> {
    pub fn new(seed: u64) -> Self {
        Engine {
            clock: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            seed,
            streams: HashMap::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    /// Enqueues an event at `now() + delay` with a fresh sequence number, so
    /// same-time events fire in insertion order.
    pub fn schedule(&mut self, delay: SimTime, target: NodeId, payload: P) -> EventId {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(HeapEntry {
            fire_at: self.clock + delay,
            seq,
            target,
            payload,
        });
        EventId(seq)
    }

    /// Marks a scheduled event so it is silently skipped when it comes due.
    pub fn cancel(&mut self, id: EventId) {
        self.cancelled.insert(id.0);
    }

    /// Pops the next non-cancelled event with `fire_at <= end`, advancing the
    /// clock to its fire time.
    pub fn pop_due(&mut self, end: SimTime) -> Option<Event<P>> {
        loop {
            let head_due = match self.queue.peek() {
                Some(head) if head.fire_at <= end => true,
                _ => false,
            };
            if !head_due {
                return None;
            }
            let entry = self.queue.pop().expect("peeked entry");
            if self.cancelled.remove(&entry.seq) {
                continue;
            }
            debug_assert!(entry.fire_at >= self.clock, "clock causality violated");
            self.clock = entry.fire_at;
            return Some(Event {
                fire_at: entry.fire_at,
                seq: entry.seq,
                target: entry.target,
                payload: entry.payload,
            });
        }
    }

    /// Processes all events with `fire_at <= end` in `(fire_at, seq)` order,
    /// leaving the clock at `end`. A handler error aborts the run with the
    /// offending event identified.
    pub fn run_until<W, F>(&mut self, end: SimTime, world: &mut W, mut handler: F) -> Result<RunSummary, RunError>
    where
        F: FnMut(&mut Self, &mut W, Event<P>) -> Result<(), String>,
    {
        let mut processed = 0u64;
        while let Some(event) = self.pop_due(end) {
            let (at, seq, target) = (event.fire_at, event.seq, event.target);
            handler(self, world, event).map_err(|message| RunError {
                at,
                seq,
                target,
                message,
            })?;
            processed += 1;
        }
        if end > self.clock {
            self.clock = end;
        }
        Ok(RunSummary {
            events_processed: processed,
            clock: self.clock,
        })
    }

    /// Mutable access to the named stream, creating it on first use from
    /// `(seed, stream_id)`.
    pub fn stream(&mut self, stream_id: &str) -> &mut ChaCha12Rng {
        let seed = self.seed;
        self.streams
            .entry(stream_id.to_owned())
            .or_insert_with(|| derive_rng(seed, stream_id))
    }

    /// Uniform draw in `[lo, hi)`; degenerate `lo == hi` yields `lo`.
    /// `lo > hi` is a configuration fault.
    pub fn rng_uniform(&mut self, stream_id: &str, lo: f64, hi: f64) -> f64 {
        assert!(lo <= hi, "rng_uniform: lo {lo} > hi {hi} on stream {stream_id}");
        if lo == hi {
            return lo;
        }
        self.stream(stream_id).gen_range(lo..hi)
    }

    /// Uniform integer draw in `[lo, hi]` inclusive.
    pub fn rng_uniform_u64(&mut self, stream_id: &str, lo: u64, hi: u64) -> u64 {
        assert!(lo <= hi, "rng_uniform_u64: lo {lo} > hi {hi} on stream {stream_id}");
        self.stream(stream_id).gen_range(lo..=hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq)]
    struct Tag(u32);

    fn drain(engine: &mut Engine<Tag>, end: SimTime) -> Vec<(SimTime, u32)> {
        let mut seen = Vec::new();
        engine
            .run_until(end, &mut seen, |_, seen, ev| {
                seen.push((ev.fire_at, ev.payload.0));
                Ok(())
            })
            .unwrap();
        seen
    }

    #[test]
    fn same_time_events_fire_in_fifo_order() {
        let mut engine = Engine::new(1);
        engine.schedule(SimTime::from_millis(5), NodeId(0), Tag(1)); // A
        engine.schedule(SimTime::from_millis(5), NodeId(0), Tag(2)); // B
        let seen = drain(&mut engine, SimTime::from_secs(1));
        assert_eq!(seen, vec![(SimTime::from_millis(5), 1), (SimTime::from_millis(5), 2)]);
    }

    #[test]
    fn zero_delay_fires_after_already_queued_same_time_events() {
        let mut engine = Engine::new(1);
        engine.schedule(SimTime::ZERO, NodeId(0), Tag(1));
        engine.schedule(SimTime::ZERO, NodeId(0), Tag(2));
        let seen = drain(&mut engine, SimTime::ZERO);
        assert_eq!(seen.iter().map(|s| s.1).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn delay_lands_exactly_at_now_plus_delay() {
        let mut engine = Engine::new(1);
        engine.schedule(SimTime::from_millis(10), NodeId(0), Tag(7));
        let seen = drain(&mut engine, SimTime::from_secs(1));
        assert_eq!(seen, vec![(SimTime::from_millis(10), 7)]);
    }

    #[test]
    fn empty_queue_run_reports_zero_events_and_final_clock() {
        let mut engine: Engine<Tag> = Engine::new(1);
        let summary = engine
            .run_until(SimTime::from_secs(1), &mut (), |_, _, _| Ok(()))
            .unwrap();
        assert_eq!(summary, RunSummary { events_processed: 0, clock: SimTime::from_secs(1) });
    }

    #[test]
    fn end_boundary_is_inclusive() {
        let mut engine = Engine::new(1);
        for ms in [1u64, 2, 3] {
            engine.schedule(SimTime::from_millis(ms), NodeId(0), Tag(ms as u32));
        }
        let seen = drain(&mut engine, SimTime::from_millis(2));
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn processing_order_matches_fire_at_seq_lexicographic_order() {
        // Schedule a shuffled batch, then check the processed order against an
        // independently sorted copy of the (fire_at, seq) pairs.
        let mut engine = Engine::new(99);
        let mut expected = Vec::new();
        let delays: Vec<u64> = (0..200).map(|i| (i * 37) % 50).collect();
        for (i, d) in delays.iter().enumerate() {
            let id = engine.schedule(SimTime::from_millis(*d), NodeId(0), Tag(i as u32));
            let _ = id;
            expected.push((SimTime::from_millis(*d), i as u64, i as u32));
        }
        expected.sort_by_key(|&(t, seq, _)| (t, seq));
        let seen = drain(&mut engine, SimTime::from_secs(1));
        let want: Vec<(SimTime, u32)> = expected.iter().map(|&(t, _, tag)| (t, tag)).collect();
        assert_eq!(seen, want);
    }

    #[test]
    fn cancelled_events_do_not_fire() {
        let mut engine = Engine::new(1);
        engine.schedule(SimTime::from_millis(1), NodeId(0), Tag(1));
        let id = engine.schedule(SimTime::from_millis(2), NodeId(0), Tag(2));
        engine.schedule(SimTime::from_millis(3), NodeId(0), Tag(3));
        engine.cancel(id);
        let seen = drain(&mut engine, SimTime::from_secs(1));
        assert_eq!(seen.iter().map(|s| s.1).collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn handler_fault_aborts_with_offending_event() {
        let mut engine = Engine::new(1);
        engine.schedule(SimTime::from_millis(4), NodeId(9), Tag(1));
        let err = engine
            .run_until(SimTime::from_secs(1), &mut (), |_, _, _| Err("boom".to_owned()))
            .unwrap_err();
        assert_eq!(err.at, SimTime::from_millis(4));
        assert_eq!(err.target, NodeId(9));
        assert!(err.to_string().contains("boom"));
    }

    #[test]
    fn handlers_can_schedule_followups() {
        let mut engine = Engine::new(1);
        engine.schedule(SimTime::from_millis(1), NodeId(0), Tag(0));
        let mut fired = Vec::new();
        engine
            .run_until(SimTime::from_millis(10), &mut fired, |eng, fired, ev| {
                fired.push(ev.payload.0);
                if ev.payload.0 < 3 {
                    eng.schedule(SimTime::from_millis(1), NodeId(0), Tag(ev.payload.0 + 1));
                }
                Ok(())
            })
            .unwrap();
        assert_eq!(fired, vec![0, 1, 2, 3]);
    }

    #[test]
    fn same_seed_and_stream_replays_identical_sequence() {
        let mut a: Engine<Tag> = Engine::new(7);
        let mut b: Engine<Tag> = Engine::new(7);
        let xs: Vec<f64> = (0..64).map(|_| a.rng_uniform("web-client-7", 0.0, 1.0)).collect();
        let ys: Vec<f64> = (0..64).map(|_| b.rng_uniform("web-client-7", 0.0, 1.0)).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn distinct_streams_are_independent_of_each_other() {
        // Adding draws on one stream must not perturb another.
        let mut a: Engine<Tag> = Engine::new(7);
        let mut b: Engine<Tag> = Engine::new(7);
        let _ = a.rng_uniform("noise", 0.0, 1.0);
        let xs: Vec<f64> = (0..16).map(|_| a.rng_uniform("signal", 0.0, 1.0)).collect();
        let ys: Vec<f64> = (0..16).map(|_| b.rng_uniform("signal", 0.0, 1.0)).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn degenerate_interval_returns_lo() {
        let mut engine: Engine<Tag> = Engine::new(7);
        assert_eq!(engine.rng_uniform("s", 5.0, 5.0), 5.0);
    }

    #[test]
    fn uniform_mean_close_to_analytic_value() {
        // 1e5 draws on [0,1): sample mean within 0.01 of the analytic 0.5.
        let mut engine: Engine<Tag> = Engine::new(13);
        let n = 100_000;
        let sum: f64 = (0..n).map(|_| engine.rng_uniform("stat", 0.0, 1.0)).sum();
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }
}
