//! Simplified per-connection TCP model: Reno-style congestion control, an
//! autotuned kernel send buffer, unacked/notsent tracking, and the
//! kernel-entry timestamps behind the kernel queue-time metric.
//!
//! One `TcpPipe` models one direction of a connection as a byte stream. It is
//! a pure state machine; packet transmission, timers, and the shared host
//! drain are wired up by the simulation layer.

use std::collections::{BTreeMap, VecDeque};

use crate::engine::SimTime;

/// Snapshot of the kernel-visible TCP state feeding the per-socket limit:
/// congestion window and unacked count in packets, plus bytes written to the
/// kernel that have not been transmitted yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcpInfo {
    pub cwnd: u32,
    pub una: u32,
    pub mss: u32,
    pub notsent: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CongState {
    SlowStart,
    CongestionAvoidance,
    Recovery,
}

#[derive(Debug, Clone, Copy)]
pub struct TcpConfig {
    pub mss: u32,
    pub init_cwnd: u32,
    /// Initial kernel send-buffer capacity; autotuning doubles it under
    /// pressure up to `max_buffer`.
    pub init_buffer: u64,
    pub max_buffer: u64,
    /// Fixed large receive window, in segments.
    pub rwnd_segments: u32,
    /// Free space needed before a full-to-writable transition fires (one cell).
    pub writable_threshold: u64,
    pub init_rto: SimTime,
    pub min_rto: SimTime,
    pub max_rto: SimTime,
    /// Collapse cwnd to the initial window when the sender has been idle
    /// longer than the RTO. Linux does this by default; classic simulated
    /// stacks keep connections warm, which matters for burst pacing.
    pub slow_start_after_idle: bool,
}

impl Default for TcpConfig {
    fn default() -> Self {
        TcpConfig {
            mss: 1448,
            init_cwnd: 10,
            init_buffer: 64 * 1024,
            max_buffer: 4 * 1024 * 1024,
            rwnd_segments: 256,
            writable_threshold: 512,
            init_rto: SimTime::from_millis(1000),
            min_rto: SimTime::from_millis(200),
            max_rto: SimTime::from_secs(60),
            slow_start_after_idle: false,
        }
    }
}

/// A transmitted, not-yet-acked segment.
#[derive(Debug, Clone)]
pub struct SegMeta {
    pub start: u64,
    pub end: u64,
    /// Kernel-entry time of the segment's oldest byte.
    pub entered_kernel: SimTime,
    /// Set once, at the first time the segment's bytes reach the wire.
    pub first_departed: Option<SimTime>,
    pub retransmitted: bool,
}

impl SegMeta {
    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    /// Time the segment's bytes spent in the kernel before first transmission.
    /// Errors if queried before the segment has been transmitted.
    pub fn kernel_queue_time(&self) -> Result<SimTime, TcpError> {
        match self.first_departed {
            Some(t) => Ok(t.saturating_sub(self.entered_kernel)),
            None => Err(TcpError::NotTransmitted),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TcpError {
    #[error("segment queried before first transmission")]
    NotTransmitted,
    #[error("write on closed connection")]
    Closed,
    #[error("ack for unsent data: ack_to {ack_to} > snd_nxt {snd_nxt}")]
    AckBeyondSent { ack_to: u64, snd_nxt: u64 },
}

/// Result of processing one cumulative ack.
#[derive(Debug, Default)]
pub struct AckOutcome {
    pub advanced: bool,
    pub newly_acked_segments: u32,
    pub rtt_sample: Option<SimTime>,
    /// Range to retransmit immediately (fast retransmit or recovery hole fill).
    pub retransmit: Option<(u64, u64)>,
    /// True exactly when the pipe transitioned from full to writable.
    pub became_writable: bool,
}

#[derive(Debug, Clone, Copy)]
struct UnsentSpan {
    end: u64,
    entered: SimTime,
}

/// One direction of a TCP connection.
#[derive(Debug)]
pub struct TcpPipe {
    pub cfg: TcpConfig,

    state: CongState,
    cwnd: u32,
    ssthresh: u32,
    ca_acc: u32,
    dup_acks: u32,
    /// Holes below this offset are retransmitted on partial acks.
    retx_until: u64,

    snd_una: u64,
    snd_nxt: u64,
    snd_written: u64,
    unsent_spans: VecDeque<UnsentSpan>,
    flight: VecDeque<SegMeta>,

    buffer_capacity: u64,
    writable: bool,

    srtt: Option<SimTime>,
    rttvar: SimTime,
    rto: SimTime,
    /// When the retransmission timer expires; `None` while nothing is in flight.
    pub rto_deadline: Option<SimTime>,
    /// True while the simulation has an outstanding timer-check event.
    pub rto_check_pending: bool,

    last_send: SimTime,

    rcv_next: u64,
    ooo: BTreeMap<u64, u64>,
}

impl TcpPipe {
    pub fn new(cfg: TcpConfig) -> TcpPipe {
        TcpPipe {
            cfg,
            state: CongState::SlowStart,
            cwnd: cfg.init_cwnd,
            ssthresh: u32::MAX / 2,
            ca_acc: 0,
            dup_acks: 0,
            retx_until: 0,
            snd_una: 0,
            snd_nxt: 0,
            snd_written: 0,
            unsent_spans: VecDeque::new(),
            flight: VecDeque::new(),
            buffer_capacity: cfg.init_buffer,
            writable: true,
            srtt: None,
            rttvar: SimTime::ZERO,
            rto: cfg.init_rto,
            rto_deadline: None,
            rto_check_pending: false,
            last_send: SimTime::ZERO,
            rcv_next: 0,
            ooo: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> CongState {
        self.state
    }
    pub fn cwnd(&self) -> u32 {
        self.cwnd
    }
    pub fn ssthresh(&self) -> u32 {
        self.ssthresh
    }
    pub fn writable(&self) -> bool {
        self.writable
    }
    /// Send-buffer occupancy: unacked plus unsent bytes.
    pub fn occupancy(&self) -> u64 {
        self.snd_written - self.snd_una
    }
    pub fn free_space(&self) -> u64 {
        self.buffer_capacity - self.occupancy()
    }
    pub fn buffer_capacity(&self) -> u64 {
        self.buffer_capacity
    }
    pub fn notsent(&self) -> u64 {
        self.snd_written - self.snd_nxt
    }
    pub fn bytes_written(&self) -> u64 {
        self.snd_written
    }
    pub fn bytes_in_flight(&self) -> u64 {
        self.snd_nxt - self.snd_una
    }
    pub fn flight_segments(&self) -> u32 {
        self.flight.len() as u32
    }
    pub fn delivered_contiguous(&self) -> u64 {
        self.rcv_next
    }
    pub fn rto(&self) -> SimTime {
        self.rto
    }

    /// Consistent kernel-state snapshot. The overhead counter lives with the
    /// caller; every snapshot taken through the scheduler is counted there.
    pub fn info(&self) -> TcpInfo {
        TcpInfo {
            cwnd: self.cwnd,
            una: self.flight.len() as u32,
            mss: self.cfg.mss,
            notsent: self.notsent(),
        }
    }

    /// Accepts up to the free buffer space, stamping the accepted bytes with
    /// their kernel-entry time. Returns the byte count accepted; the writable
    /// flag clears when less than one cell of space remains.
    pub fn write(&mut self, len: u64, now: SimTime) -> u64 {
        let accepted = len.min(self.free_space());
        if accepted > 0 {
            self.snd_written += accepted;
            self.unsent_spans.push_back(UnsentSpan {
                end: self.snd_written,
                entered: now,
            });
        }
        if self.occupancy() == self.buffer_capacity {
            self.autotune();
        }
        if self.free_space() < self.cfg.writable_threshold {
            self.writable = false;
        }
        accepted
    }

    /// Doubles the send-buffer capacity under pressure (occupancy at
    /// capacity), up to the configured maximum; never decreases.
    pub fn autotune(&mut self) -> u64 {
        if self.occupancy() == self.buffer_capacity && self.buffer_capacity < self.cfg.max_buffer {
            self.buffer_capacity = (self.buffer_capacity * 2).min(self.cfg.max_buffer);
        }
        self.buffer_capacity
    }

    fn effective_window(&self) -> u32 {
        self.cwnd.min(self.cfg.rwnd_segments).max(1)
    }

    /// True when congestion state and buffered data allow a new segment out.
    pub fn can_send(&self) -> bool {
        self.snd_nxt < self.snd_written && (self.flight.len() as u32) < self.effective_window()
    }

    /// Cuts the next segment (up to one MSS) from the unsent buffer and adds
    /// it to the flight. The caller puts it on the wire.
    pub fn next_segment(&mut self, now: SimTime) -> Option<SegMeta> {
        // Restart from slow start when resuming after an idle gap; ssthresh
        // is retained so the ramp back to the old rate is quick.
        if self.cfg.slow_start_after_idle
            && self.flight.is_empty()
            && self.snd_nxt > 0
            && now.saturating_sub(self.last_send) > self.rto
            && self.cwnd > self.cfg.init_cwnd
        {
            self.cwnd = self.cfg.init_cwnd;
            self.state = CongState::SlowStart;
            self.ca_acc = 0;
        }
        if !self.can_send() {
            return None;
        }
        self.last_send = now;
        let start = self.snd_nxt;
        let end = (start + u64::from(self.cfg.mss)).min(self.snd_written);
        let entered = self
            .unsent_spans
            .front()
            .map(|s| s.entered)
            .unwrap_or(now);
        while let Some(front) = self.unsent_spans.front() {
            if front.end <= end {
                self.unsent_spans.pop_front();
            } else {
                break;
            }
        }
        self.snd_nxt = end;
        let seg = SegMeta {
            start,
            end,
            entered_kernel: entered,
            first_departed: None,
            retransmitted: false,
        };
        self.flight.push_back(seg.clone());
        if self.rto_deadline.is_none() {
            self.rto_deadline = Some(now + self.rto);
        }
        Some(seg)
    }

    /// Records that the segment starting at `start` reached the wire. Returns
    /// the kernel queue time on the first transmission of that range.
    pub fn segment_departed(&mut self, start: u64, now: SimTime) -> Option<SimTime> {
        let seg = self.flight.iter_mut().find(|s| s.start == start)?;
        if seg.first_departed.is_none() {
            seg.first_departed = Some(now);
            Some(now.saturating_sub(seg.entered_kernel))
        } else {
            None
        }
    }

    /// Processes a cumulative ack up to byte `ack_to`.
    pub fn on_ack(&mut self, ack_to: u64, now: SimTime) -> Result<AckOutcome, TcpError> {
        if ack_to > self.snd_nxt {
            return Err(TcpError::AckBeyondSent { ack_to, snd_nxt: self.snd_nxt });
        }
        let mut out = AckOutcome::default();
        if ack_to > self.snd_una {
            out.advanced = true;
            let was_writable = self.writable;
            while let Some(front) = self.flight.front() {
                if front.end <= ack_to {
                    let seg = self.flight.pop_front().expect("front");
                    out.newly_acked_segments += 1;
                    if !seg.retransmitted {
                        if let Some(dep) = seg.first_departed {
                            out.rtt_sample = Some(now.saturating_sub(dep));
                        }
                    }
                } else {
                    break;
                }
            }
            self.snd_una = ack_to;
            self.dup_acks = 0;
            if let Some(rtt) = out.rtt_sample {
                self.update_rtt(rtt);
            }
            match self.state {
                CongState::SlowStart => {
                    self.cwnd = self.cwnd.saturating_add(out.newly_acked_segments);
                    if self.cwnd >= self.ssthresh {
                        self.state = CongState::CongestionAvoidance;
                        self.ca_acc = 0;
                    }
                }
                CongState::CongestionAvoidance => {
                    self.ca_acc += out.newly_acked_segments;
                    while self.ca_acc >= self.cwnd {
                        self.ca_acc -= self.cwnd;
                        self.cwnd = self.cwnd.saturating_add(1);
                    }
                }
                CongState::Recovery => {
                    if self.snd_una >= self.retx_until {
                        self.state = CongState::CongestionAvoidance;
                        self.ca_acc = 0;
                    }
                }
            }
            // Hole below the loss point: retransmit it without waiting for
            // three more dup acks.
            if self.snd_una < self.retx_until {
                out.retransmit = self.retransmit_front();
            }
            // Restart the retransmission timer on progress.
            self.rto_deadline = if self.flight.is_empty() {
                None
            } else {
                Some(now + self.rto)
            };
            if !was_writable && self.free_space() >= self.cfg.writable_threshold {
                self.writable = true;
                out.became_writable = true;
            }
        } else if ack_to == self.snd_una && !self.flight.is_empty() {
            self.dup_acks += 1;
            if self.dup_acks == 3 && self.state != CongState::Recovery {
                self.enter_recovery();
                out.retransmit = self.retransmit_front();
            }
        }
        Ok(out)
    }

    /// Loss signalled by three duplicate acks: halve, retransmit, recover.
    pub fn on_triple_dupack(&mut self) -> Option<(u64, u64)> {
        if self.state == CongState::Recovery {
            return None;
        }
        self.enter_recovery();
        self.retransmit_front()
    }

    fn enter_recovery(&mut self) {
        self.ssthresh = (self.cwnd / 2).max(1);
        self.cwnd = self.ssthresh;
        self.state = CongState::Recovery;
        self.retx_until = self.snd_nxt;
        self.ca_acc = 0;
    }

    /// Retransmission timeout: collapse to the initial window and slow start.
    /// Returns the range to retransmit, or `None` if nothing is in flight.
    pub fn on_timeout(&mut self, now: SimTime) -> Option<(u64, u64)> {
        if self.flight.is_empty() {
            self.rto_deadline = None;
            return None;
        }
        self.ssthresh = (self.cwnd / 2).max(1);
        self.cwnd = self.cfg.init_cwnd;
        self.state = CongState::SlowStart;
        self.ca_acc = 0;
        self.dup_acks = 0;
        self.retx_until = self.snd_nxt;
        self.rto = (self.rto + self.rto).min(self.cfg.max_rto);
        self.rto_deadline = Some(now + self.rto);
        self.retransmit_front()
    }

    fn retransmit_front(&mut self) -> Option<(u64, u64)> {
        let seg = self.flight.front_mut()?;
        seg.retransmitted = true;
        Some((seg.start, seg.end))
    }

    fn update_rtt(&mut self, rtt: SimTime) {
        match self.srtt {
            None => {
                self.srtt = Some(rtt);
                self.rttvar = SimTime(rtt.0 / 2);
            }
            Some(srtt) => {
                let err = srtt.0.abs_diff(rtt.0);
                self.rttvar = SimTime((3 * self.rttvar.0 + err) / 4);
                self.srtt = Some(SimTime((7 * srtt.0 + rtt.0) / 8));
            }
        }
        let rto = self.srtt.unwrap().0 + (4 * self.rttvar.0).max(1_000_000);
        self.rto = SimTime(rto).max(self.cfg.min_rto).min(self.cfg.max_rto);
    }

    /// Receiver path: merges an arrived byte range and returns the cumulative
    /// ack to send. `advanced` is false for duplicate acks.
    pub fn on_segment_arrived(&mut self, start: u64, end: u64) -> (u64, bool) {
        let before = self.rcv_next;
        if end > self.rcv_next {
            let s = start.max(self.rcv_next);
            // Merge [s, end) into the out-of-order set.
            let mut new_start = s;
            let mut new_end = end;
            let overlapping: Vec<u64> = self
                .ooo
                .range(..=new_end)
                .filter(|(_, &e)| e >= new_start)
                .map(|(&st, _)| st)
                .collect();
            for st in overlapping {
                let e = self.ooo.remove(&st).expect("present");
                new_start = new_start.min(st);
                new_end = new_end.max(e);
            }
            self.ooo.insert(new_start, new_end);
            // Drain whatever is now contiguous.
            while let Some((&st, &e)) = self.ooo.first_key_value() {
                if st <= self.rcv_next {
                    self.rcv_next = self.rcv_next.max(e);
                    self.ooo.remove(&st);
                } else {
                    break;
                }
            }
        }
        (self.rcv_next, self.rcv_next > before)
    }
}
