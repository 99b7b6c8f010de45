//! Traffic sources and sinks: a parametric first-person-shooter flow and an
//! AIMD (Reno-style) bulk TCP transfer standing in for the FTP download.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::radio::Direction;
use crate::sim::{Dist, RngStream, SimTime};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameFlowParams {
    pub uplink_rate_pps: f64,
    pub uplink_size: Dist,
    pub downlink_rate_pps: f64,
    pub downlink_size: Dist,
    /// Each inter-departure gap is scaled by `1 + U(-jitter_frac, jitter_frac)`.
    pub jitter_frac: f64,
}

impl Default for GameFlowParams {
    fn default() -> Self {
        Self {
            uplink_rate_pps: 60.0,
            uplink_size: Dist::Constant { value: 80.0 },
            downlink_rate_pps: 12.0,
            downlink_size: Dist::Uniform {
                low: 120.0,
                high: 320.0,
            },
            jitter_frac: 0.2,
        }
    }
}

impl GameFlowParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.uplink_rate_pps > 0.0 && self.downlink_rate_pps > 0.0) {
            return Err("game rates must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.jitter_frac) {
            return Err("game jitter_frac must be in [0, 1)".into());
        }
        for d in [&self.uplink_size, &self.downlink_size] {
            d.validate().map_err(|e| format!("game size: {e}"))?;
            let lowest = match *d {
                Dist::Uniform { low, .. } => low,
                Dist::Constant { value } => value,
                _ => return Err("game sizes must be constant or uniform".into()),
            };
            if !(lowest >= 1.0) {
                return Err("game sizes must be >= 1 byte".into());
            }
        }
        Ok(())
    }

    pub fn rate(&self, dir: Direction) -> f64 {
        match dir {
            Direction::Uplink => self.uplink_rate_pps,
            Direction::Downlink => self.downlink_rate_pps,
        }
    }
}

/// Gap until the next game packet in `dir` and that packet's size in bytes.
pub fn game_next_departure(
    params: &GameFlowParams,
    dir: Direction,
    rng: &mut RngStream,
) -> (SimTime, u32) {
    let base_us = 1e6 / params.rate(dir);
    let j = params.jitter_frac;
    let scale = if j > 0.0 {
        1.0 + rng.draw_unchecked(&Dist::Uniform { low: -j, high: j })
    } else {
        1.0
    };
    let size_dist = match dir {
        Direction::Uplink => &params.uplink_size,
        Direction::Downlink => &params.downlink_size,
    };
    let size = rng.draw_unchecked(size_dist).round().max(1.0) as u32;
    (SimTime::from_micros_f64(base_us * scale), size)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcpMode {
    SlowStart,
    CongestionAvoidance,
}

/// Congestion-window state, in packets.
#[derive(Clone, Debug, PartialEq)]
pub struct TcpState {
    pub cwnd_pkts: f64,
    pub ssthresh_pkts: f64,
    pub in_flight: u32,
    pub mss_bytes: u32,
    pub mode: TcpMode,
    pub next_seq: u64,
}

impl TcpState {
    pub fn new(mss_bytes: u32, initial_cwnd: f64, initial_ssthresh: f64) -> Self {
        let cwnd = initial_cwnd.max(1.0);
        Self {
            cwnd_pkts: cwnd,
            ssthresh_pkts: initial_ssthresh,
            in_flight: 0,
            mss_bytes,
            mode: if cwnd >= initial_ssthresh {
                TcpMode::CongestionAvoidance
            } else {
                TcpMode::SlowStart
            },
            next_seq: 0,
        }
    }

    /// Window growth for one acknowledged segment.
    pub fn on_ack(&mut self) {
        self.in_flight = self.in_flight.saturating_sub(1);
        match self.mode {
            TcpMode::SlowStart => {
                self.cwnd_pkts += 1.0;
                if self.cwnd_pkts >= self.ssthresh_pkts {
                    self.mode = TcpMode::CongestionAvoidance;
                }
            }
            TcpMode::CongestionAvoidance => self.cwnd_pkts += 1.0 / self.cwnd_pkts,
        }
    }

    /// Multiplicative decrease, floored at two packets.
    pub fn on_loss(&mut self) {
        self.ssthresh_pkts = (self.cwnd_pkts / 2.0).max(2.0);
        self.cwnd_pkts = self.ssthresh_pkts;
        self.mode = TcpMode::CongestionAvoidance;
    }

    /// Segments that may be sent now without exceeding `floor(cwnd)` in flight.
    pub fn sendable(&self) -> u32 {
        (self.cwnd_pkts.floor() as u32).saturating_sub(self.in_flight)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcpParams {
    pub mss_bytes: u32,
    pub initial_cwnd: f64,
    pub initial_ssthresh: f64,
    pub ack_bytes: u32,
    pub ack_delay_us: f64,
    pub acks_every: u32,
    /// Lower bound for the retransmission timeout.
    pub min_rto_ms: f64,
}

impl Default for TcpParams {
    fn default() -> Self {
        Self {
            mss_bytes: 1460,
            initial_cwnd: 2.0,
            initial_ssthresh: 64.0,
            ack_bytes: 40,
            ack_delay_us: 0.0,
            acks_every: 1,
            min_rto_ms: 1_000.0,
        }
    }
}

impl TcpParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.mss_bytes == 0 || self.ack_bytes == 0 {
            return Err("tcp mss_bytes and ack_bytes must be > 0".into());
        }
        if !(self.initial_cwnd >= 1.0) || !(self.initial_ssthresh >= 2.0) {
            return Err("tcp initial_cwnd must be >= 1 and initial_ssthresh >= 2".into());
        }
        if self.acks_every == 0 {
            return Err("tcp acks_every must be >= 1".into());
        }
        if !(self.ack_delay_us >= 0.0) || !(self.min_rto_ms > 0.0) {
            return Err("tcp ack_delay_us must be >= 0 and min_rto_ms > 0".into());
        }
        Ok(())
    }
}

/// A data segment the sender wants transmitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub seq: u64,
    pub attempt: u32,
}

#[derive(Clone, Copy, Debug)]
struct Outstanding {
    sent_at: SimTime,
    attempt: u32,
}

/// One multiplicative decrease, for sawtooth analysis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reduction {
    pub t: SimTime,
    pub cwnd_before: f64,
    pub cwnd_after: f64,
}

/// Sender side of the bulk transfer. The source is unbounded.
///
/// Loss handling is simplified fast retransmit: the network reports each lost
/// segment one smoothed RTT after the drop. Losses of segments sent before
/// the most recent reduction belong to the same congestion event and do not
/// reduce the window again.
#[derive(Clone, Debug)]
pub struct TcpSender {
    state: TcpState,
    params: TcpParams,
    outstanding: BTreeMap<u64, Outstanding>,
    retransmit: BTreeSet<u64>,
    /// Attempt number of the last transmission reported lost, per sequence.
    lost_attempt: HashMap<u64, u32>,
    acked: u64,
    retransmissions: u64,
    unknown_acks: u64,
    srtt_us: Option<f64>,
    last_reduction: Option<SimTime>,
    last_progress: SimTime,
    cwnd_trace: Vec<(SimTime, f64)>,
    reductions: Vec<Reduction>,
}

impl TcpSender {
    pub fn new(params: TcpParams) -> Self {
        Self {
            state: TcpState::new(
                params.mss_bytes,
                params.initial_cwnd,
                params.initial_ssthresh,
            ),
            params,
            outstanding: BTreeMap::new(),
            retransmit: BTreeSet::new(),
            lost_attempt: HashMap::new(),
            acked: 0,
            retransmissions: 0,
            unknown_acks: 0,
            srtt_us: None,
            last_reduction: None,
            last_progress: SimTime::ZERO,
            cwnd_trace: Vec::new(),
            reductions: Vec::new(),
        }
    }

    pub fn state(&self) -> &TcpState {
        &self.state
    }

    pub fn params(&self) -> &TcpParams {
        &self.params
    }

    /// Segments ever created (each sequence number counted once).
    pub fn created(&self) -> u64 {
        self.state.next_seq
    }

    pub fn acked(&self) -> u64 {
        self.acked
    }

    pub fn awaiting_retransmit(&self) -> u64 {
        self.retransmit.len() as u64
    }

    pub fn retransmissions(&self) -> u64 {
        self.retransmissions
    }

    pub fn unknown_acks(&self) -> u64 {
        self.unknown_acks
    }

    /// `created == acked + in_flight + awaiting_retransmit`.
    pub fn conserves(&self) -> bool {
        self.state.in_flight as usize == self.outstanding.len()
            && self.created()
                == self.acked + self.outstanding.len() as u64 + self.retransmit.len() as u64
    }

    pub fn cwnd_trace(&self) -> &[(SimTime, f64)] {
        &self.cwnd_trace
    }

    pub fn reductions(&self) -> &[Reduction] {
        &self.reductions
    }

    /// Smoothed RTT, or the minimum RTO before the first sample.
    pub fn srtt(&self) -> SimTime {
        match self.srtt_us {
            Some(us) => SimTime::from_micros_f64(us),
            None => SimTime::from_millis_f64(self.params.min_rto_ms),
        }
    }

    pub fn rto(&self) -> SimTime {
        let floor = SimTime::from_millis_f64(self.params.min_rto_ms);
        match self.srtt_us {
            Some(us) => SimTime::from_micros_f64(4.0 * us).max(floor),
            None => floor,
        }
    }

    fn record_cwnd(&mut self, now: SimTime) {
        self.cwnd_trace.push((now, self.state.cwnd_pkts));
    }

    /// Fills the window: retransmissions first, then new data.
    pub fn pull(&mut self, now: SimTime) -> Vec<Segment> {
        let mut out = Vec::new();
        while self.state.sendable() > 0 {
            let seg = if let Some(seq) = self.retransmit.pop_first() {
                self.retransmissions += 1;
                let attempt = self.outstanding_attempts(seq) + 1;
                Segment { seq, attempt }
            } else {
                let seq = self.state.next_seq;
                self.state.next_seq += 1;
                Segment { seq, attempt: 0 }
            };
            self.outstanding.insert(
                seg.seq,
                Outstanding {
                    sent_at: now,
                    attempt: seg.attempt,
                },
            );
            self.state.in_flight += 1;
            out.push(seg);
        }
        if self.outstanding.len() == out.len() && !out.is_empty() {
            self.last_progress = now;
        }
        out
    }

    fn outstanding_attempts(&self, seq: u64) -> u32 {
        self.lost_attempt.get(&seq).copied().unwrap_or(0)
    }

    /// Processes an acknowledgement of `seq` that also covers everything below `cumulative`.
    pub fn on_ack(&mut self, seq: u64, cumulative: u64, now: SimTime) -> Vec<Segment> {
        let mut newly = 0;
        if let Some(o) = self.outstanding.remove(&seq) {
            if o.attempt == 0 {
                let sample = (now - o.sent_at).as_micros() as f64;
                self.srtt_us = Some(match self.srtt_us {
                    None => sample,
                    Some(s) => 0.875 * s + 0.125 * sample,
                });
            }
            newly += 1;
        } else if self.retransmit.remove(&seq) {
            // declared lost, but it got through after all
            self.acked += 1;
        } else {
            self.unknown_acks += 1;
        }
        let covered: Vec<u64> = self
            .outstanding
            .range(..cumulative)
            .map(|(s, _)| *s)
            .collect();
        for s in covered {
            self.outstanding.remove(&s);
            newly += 1;
        }
        let late: Vec<u64> = self.retransmit.range(..cumulative).copied().collect();
        for s in late {
            self.retransmit.remove(&s);
            self.acked += 1;
        }
        for _ in 0..newly {
            self.state.on_ack();
            self.acked += 1;
        }
        if newly > 0 {
            self.last_progress = now;
            self.record_cwnd(now);
        }
        self.pull(now)
    }

    /// Reports that transmission `attempt` of `seq` was dropped from a queue
    /// (overflow, handoff flush or gap). Triggers the multiplicative decrease.
    pub fn on_loss(&mut self, seq: u64, attempt: u32, now: SimTime) -> Vec<Segment> {
        self.declare_lost(seq, attempt, now, true)
    }

    /// Reports a transmission corrupted on the air. The segment is resent but
    /// the window is left alone.
    pub fn on_corruption(&mut self, seq: u64, attempt: u32, now: SimTime) -> Vec<Segment> {
        self.declare_lost(seq, attempt, now, false)
    }

    fn declare_lost(
        &mut self,
        seq: u64,
        attempt: u32,
        now: SimTime,
        congestion: bool,
    ) -> Vec<Segment> {
        match self.outstanding.get(&seq) {
            Some(o) if o.attempt == attempt => {
                let sent_at = o.sent_at;
                self.outstanding.remove(&seq);
                self.state.in_flight -= 1;
                self.retransmit.insert(seq);
                self.lost_attempt.insert(seq, attempt);
                if congestion && self.last_reduction.is_none_or(|r| sent_at >= r) {
                    let before = self.state.cwnd_pkts;
                    self.state.on_loss();
                    self.last_reduction = Some(now);
                    self.reductions.push(Reduction {
                        t: now,
                        cwnd_before: before,
                        cwnd_after: self.state.cwnd_pkts,
                    });
                    self.record_cwnd(now);
                }
                self.pull(now)
            }
            _ => Vec::new(),
        }
    }

    /// Retransmission timeout: declares the oldest outstanding segment lost when
    /// nothing has been acknowledged for one RTO.
    pub fn on_timer(&mut self, now: SimTime) -> Vec<Segment> {
        if self.outstanding.is_empty() || now.saturating_sub(self.last_progress) < self.rto() {
            return Vec::new();
        }
        let (&seq, o) = self
            .outstanding
            .iter()
            .min_by_key(|(_, o)| o.sent_at)
            .expect("non-empty");
        let attempt = o.attempt;
        self.last_progress = now;
        self.on_loss(seq, attempt, now)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SinkConfig {
    pub ack_delay_us: f64,
    pub acks_every: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AckInfo {
    pub seq: u64,
    pub cumulative: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SinkOutcome {
    pub duplicate: bool,
    pub ack: Option<AckInfo>,
}

/// Receiver for one flow direction. Game sinks only record; TCP sinks acknowledge.
#[derive(Clone, Debug)]
pub struct Sink {
    tcp: Option<SinkConfig>,
    /// seq -> attempts seen
    seen: HashMap<u64, BTreeSet<u32>>,
    rcv_next: u64,
    since_ack: u32,
}

impl Sink {
    pub fn game() -> Self {
        Self {
            tcp: None,
            seen: HashMap::new(),
            rcv_next: 0,
            since_ack: 0,
        }
    }

    pub fn tcp(cfg: SinkConfig) -> Self {
        Self {
            tcp: Some(cfg),
            ..Self::game()
        }
    }

    pub fn ack_delay(&self) -> SimTime {
        SimTime::from_micros_f64(self.tcp.as_ref().map_or(0.0, |c| c.ack_delay_us))
    }

    /// Records a delivery. Replicas of one transmission are acknowledged at most
    /// once; a retransmission of already-received data is acknowledged again.
    pub fn receive(&mut self, seq: u64, attempt: u32) -> SinkOutcome {
        let attempts = self.seen.entry(seq).or_default();
        let duplicate = !attempts.is_empty();
        let replica = !attempts.insert(attempt);
        let Some(cfg) = &self.tcp else {
            return SinkOutcome {
                duplicate,
                ack: None,
            };
        };
        if replica {
            return SinkOutcome {
                duplicate,
                ack: None,
            };
        }
        while self.seen.contains_key(&self.rcv_next) {
            self.rcv_next += 1;
        }
        self.since_ack += 1;
        let ack = if duplicate || self.since_ack >= cfg.acks_every {
            self.since_ack = 0;
            Some(AckInfo {
                seq,
                cumulative: self.rcv_next,
            })
        } else {
            None
        };
        SinkOutcome { duplicate, ack }
    }
}
