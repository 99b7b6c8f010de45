//! Radio abstraction: node positions, log-distance RSSI, drop-tail transmit
//! queues and a single co-channel medium shared round-robin by all queues.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{Dist, RngStream, SimTime};

/// Index of an AP or station inside one simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

#[derive(Debug, Error, PartialEq)]
pub enum RadioError {
    #[error("unknown node {0:?}")]
    UnknownNode(NodeId),
    #[error("invalid trajectory: {0}")]
    BadTrajectory(String),
    #[error("invalid parameter: {0}")]
    BadParam(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Piecewise-linear path through timed waypoints, clamped at both ends.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    waypoints: Vec<(SimTime, Position)>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<(SimTime, Position)>) -> Result<Self, RadioError> {
        if waypoints.is_empty() {
            return Err(RadioError::BadTrajectory("no waypoints".into()));
        }
        if waypoints.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(RadioError::BadTrajectory(
                "waypoint times must strictly increase".into(),
            ));
        }
        if waypoints
            .iter()
            .any(|(_, p)| !(p.x.is_finite() && p.y.is_finite()))
        {
            return Err(RadioError::BadTrajectory("non-finite position".into()));
        }
        Ok(Self { waypoints })
    }

    pub fn fixed(at: Position) -> Self {
        Self {
            waypoints: vec![(SimTime::ZERO, at)],
        }
    }

    pub fn waypoints(&self) -> &[(SimTime, Position)] {
        &self.waypoints
    }

    pub fn position_at(&self, t: SimTime) -> Position {
        let wps = &self.waypoints;
        let i = wps.partition_point(|(wt, _)| *wt <= t);
        if i == 0 {
            return wps[0].1;
        }
        if i == wps.len() {
            return wps[wps.len() - 1].1;
        }
        let (t0, p0) = wps[i - 1];
        let (t1, p1) = wps[i];
        let f = (t - t0).as_micros() as f64 / (t1 - t0).as_micros() as f64;
        Position::new(p0.x + f * (p1.x - p0.x), p0.y + f * (p1.y - p0.y))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathLossParams {
    pub tx_power_dbm: f64,
    pub pl0_db: f64,
    pub ref_dist_m: f64,
    pub exponent: f64,
    pub shadow_sigma_db: f64,
}

impl Default for PathLossParams {
    fn default() -> Self {
        Self {
            tx_power_dbm: 20.0,
            pl0_db: 40.0,
            ref_dist_m: 1.0,
            exponent: 3.0,
            shadow_sigma_db: 2.0,
        }
    }
}

impl PathLossParams {
    pub fn validate(&self) -> Result<(), RadioError> {
        if !(self.ref_dist_m > 0.0) {
            return Err(RadioError::BadParam(
                "channel.ref_dist_m must be > 0".into(),
            ));
        }
        if !(self.exponent > 0.0) {
            return Err(RadioError::BadParam("channel.exponent must be > 0".into()));
        }
        if !(self.shadow_sigma_db >= 0.0) {
            return Err(RadioError::BadParam(
                "channel.shadow_sigma_db must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Received power without shadowing. Distances below the reference are floored.
    pub fn mean_rssi_dbm(&self, distance_m: f64) -> f64 {
        let d = distance_m.max(self.ref_dist_m);
        self.tx_power_dbm - self.pl0_db - 10.0 * self.exponent * (d / self.ref_dist_m).log10()
    }

    /// Received power with a fresh shadowing draw from `shadowing`.
    pub fn rssi_dbm(&self, distance_m: f64, shadowing: &mut RngStream) -> f64 {
        let shadow = shadowing.draw_unchecked(&Dist::Normal {
            mean: 0.0,
            sigma: self.shadow_sigma_db,
        });
        self.mean_rssi_dbm(distance_m) - shadow
    }
}

/// Positions of every radio node, queried by the controller's RSSI sampling.
#[derive(Clone, Debug, Default)]
pub struct RadioMap {
    aps: BTreeMap<NodeId, Position>,
    stations: BTreeMap<NodeId, Trajectory>,
}

impl RadioMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_ap(&mut self, id: NodeId, at: Position) {
        self.aps.insert(id, at);
    }

    pub fn add_station(&mut self, id: NodeId, path: Trajectory) {
        self.stations.insert(id, path);
    }

    pub fn station_position(&self, sta: NodeId, t: SimTime) -> Result<Position, RadioError> {
        self.stations
            .get(&sta)
            .map(|tr| tr.position_at(t))
            .ok_or(RadioError::UnknownNode(sta))
    }

    pub fn distance(&self, ap: NodeId, sta: NodeId, t: SimTime) -> Result<f64, RadioError> {
        let ap_pos = self.aps.get(&ap).ok_or(RadioError::UnknownNode(ap))?;
        Ok(ap_pos.distance(&self.station_position(sta, t)?))
    }

    pub fn rssi(
        &self,
        ap: NodeId,
        sta: NodeId,
        t: SimTime,
        channel: &PathLossParams,
        shadowing: &mut RngStream,
    ) -> Result<f64, RadioError> {
        Ok(channel.rssi_dbm(self.distance(ap, sta, t)?, shadowing))
    }
}

/// Index of a flow inside one simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Payload {
    Game,
    TcpData,
    /// Acknowledges `seq` and, cumulatively, everything below `cumulative`.
    TcpAck {
        seq: u64,
        cumulative: u64,
    },
}

/// One simulated packet. The station end is `client` regardless of direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub flow: FlowId,
    pub seq: u64,
    /// Retransmission counter; replicas made by the controller share it.
    pub attempt: u32,
    pub size_bytes: u32,
    pub direction: Direction,
    pub src: NodeId,
    pub dst: NodeId,
    pub client: NodeId,
    pub created_at: SimTime,
    pub enqueued_at: SimTime,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Enqueue {
    Accepted,
    DroppedTail(Frame),
}

/// FIFO with a frame-count limit; arrivals to a full queue are dropped.
#[derive(Clone, Debug)]
pub struct TxQueue {
    capacity: usize,
    frames: VecDeque<Frame>,
    tail_drops: u64,
}

impl TxQueue {
    pub fn new(capacity_frames: usize) -> Self {
        Self {
            capacity: capacity_frames,
            frames: VecDeque::with_capacity(capacity_frames.min(1024)),
            tail_drops: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn tail_drops(&self) -> u64 {
        self.tail_drops
    }

    pub fn enqueue(&mut self, mut frame: Frame, now: SimTime) -> Enqueue {
        if self.frames.len() >= self.capacity {
            self.tail_drops += 1;
            return Enqueue::DroppedTail(frame);
        }
        frame.enqueued_at = now;
        self.frames.push_back(frame);
        Enqueue::Accepted
    }

    pub fn dequeue(&mut self) -> Option<Frame> {
        self.frames.pop_front()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter()
    }

    /// Removes and returns every queued frame matching `pred`, preserving the order of the rest.
    pub fn flush_where(&mut self, mut pred: impl FnMut(&Frame) -> bool) -> Vec<Frame> {
        let mut kept = VecDeque::with_capacity(self.frames.len());
        let mut flushed = Vec::new();
        for f in self.frames.drain(..) {
            if pred(&f) {
                flushed.push(f);
            } else {
                kept.push_back(f);
            }
        }
        self.frames = kept;
        flushed
    }
}

/// Channel-access parameters. The extra access delay is exponential with
/// `contention_mean_us`, truncated at `contention_cap_us`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MediumParams {
    pub phy_rate_mbps: f64,
    pub per_frame_overhead_us: f64,
    pub contention_mean_us: f64,
    pub contention_cap_us: f64,
    pub p_loss: f64,
}

impl Default for MediumParams {
    fn default() -> Self {
        Self {
            phy_rate_mbps: 24.0,
            per_frame_overhead_us: 300.0,
            contention_mean_us: 3_000.0,
            contention_cap_us: 20_000.0,
            p_loss: 0.02,
        }
    }
}

impl MediumParams {
    pub fn validate(&self) -> Result<(), RadioError> {
        let bad = |m: &str| Err(RadioError::BadParam(m.into()));
        if !(self.phy_rate_mbps > 0.0 && self.phy_rate_mbps.is_finite()) {
            return bad("phy_rate_mbps must be > 0");
        }
        if !(self.per_frame_overhead_us >= 0.0) {
            return bad("per_frame_overhead_us must be >= 0");
        }
        if !(self.contention_mean_us >= 0.0) || !(self.contention_cap_us >= 0.0) {
            return bad("contention_mean_us and contention_cap_us must be >= 0");
        }
        if !(0.0..1.0).contains(&self.p_loss) {
            return bad("p_loss must be in [0, 1)");
        }
        Ok(())
    }

    /// Fixed part of the airtime: overhead plus serialization.
    pub fn base_airtime_us(&self, size_bytes: u32) -> f64 {
        self.per_frame_overhead_us + f64::from(size_bytes) * 8.0 / self.phy_rate_mbps
    }
}

/// Time a frame holds the medium, including a truncated-exponential access delay.
pub fn airtime(frame: &Frame, params: &MediumParams, contention: &mut RngStream) -> SimTime {
    let extra = contention
        .draw_unchecked(&Dist::Exponential {
            mean: params.contention_mean_us,
        })
        .min(params.contention_cap_us);
    SimTime::from_micros_f64(params.base_airtime_us(frame.size_bytes) + extra)
}

/// Index of a queue attached to a [`Medium`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QueueId(pub usize);

/// A frame occupying the medium.
#[derive(Clone, Debug, PartialEq)]
pub struct Transmission {
    pub queue: QueueId,
    pub frame: Frame,
    pub started_at: SimTime,
    pub ends_at: SimTime,
    /// Decided when the transmission ends, see [`Medium::finish`].
    pub lost: bool,
}

#[derive(Clone, Debug)]
struct Port {
    owner: NodeId,
    queue: TxQueue,
    params: MediumParams,
}

/// One shared channel. At most one frame is on the air; the next sender is
/// picked round-robin among non-empty queues.
#[derive(Clone, Debug, Default)]
pub struct Medium {
    ports: Vec<Port>,
    next_rr: usize,
    on_air: Option<Transmission>,
    busy_us: u64,
}

impl Medium {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn attach(&mut self, owner: NodeId, queue: TxQueue, params: MediumParams) -> QueueId {
        self.ports.push(Port {
            owner,
            queue,
            params,
        });
        QueueId(self.ports.len() - 1)
    }

    pub fn queue(&self, id: QueueId) -> &TxQueue {
        &self.ports[id.0].queue
    }

    pub fn queue_mut(&mut self, id: QueueId) -> &mut TxQueue {
        &mut self.ports[id.0].queue
    }

    pub fn owner(&self, id: QueueId) -> NodeId {
        self.ports[id.0].owner
    }

    pub fn params(&self, id: QueueId) -> &MediumParams {
        &self.ports[id.0].params
    }

    pub fn queue_ids(&self) -> impl Iterator<Item = QueueId> {
        (0..self.ports.len()).map(QueueId)
    }

    pub fn is_busy(&self) -> bool {
        self.on_air.is_some()
    }

    pub fn on_air(&self) -> Option<&Transmission> {
        self.on_air.as_ref()
    }

    /// Accumulated time the medium has been occupied by finished transmissions.
    pub fn busy_time(&self) -> SimTime {
        SimTime::from_micros(self.busy_us)
    }

    pub fn backlog(&self) -> usize {
        self.ports.iter().map(|p| p.queue.len()).sum()
    }

    /// Starts the next transmission if the medium is idle and any queue holds a frame.
    /// Returns the end time of the started transmission.
    pub fn try_start(&mut self, now: SimTime, contention: &mut RngStream) -> Option<SimTime> {
        if self.on_air.is_some() || self.ports.is_empty() {
            return None;
        }
        let n = self.ports.len();
        let idx = (0..n)
            .map(|k| (self.next_rr + k) % n)
            .find(|&i| !self.ports[i].queue.is_empty())?;
        self.next_rr = (idx + 1) % n;
        let port = &mut self.ports[idx];
        let frame = port.queue.dequeue().expect("non-empty");
        let dur = airtime(&frame, &port.params, contention);
        let ends_at = now + dur;
        self.on_air = Some(Transmission {
            queue: QueueId(idx),
            frame,
            started_at: now,
            ends_at,
            lost: false,
        });
        Some(ends_at)
    }

    /// Completes the transmission on the air, drawing its random loss.
    pub fn finish(&mut self, loss: &mut RngStream) -> Option<Transmission> {
        let mut tx = self.on_air.take()?;
        tx.lost = loss.bernoulli(self.ports[tx.queue.0].params.p_loss);
        self.busy_us += (tx.ends_at - tx.started_at).as_micros();
        Some(tx)
    }
}
