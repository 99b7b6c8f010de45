//! The simulated WLAN: APs and stations on one medium, the controller, the
//! wired side hosting game and bulk-transfer servers, and the event loop
//! binding them together.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::lvap::{
    Bssid, ClientView, Controller, ControllerConfig, HandoffOrdering, HandoffPolicy, HandoffRecord,
    LvapStep,
};
use crate::metrics::{DropCause, Recorder};
use crate::radio::{
    Direction, Enqueue, FlowId, Frame, Medium, NodeId, Payload, Position, QueueId, RadioMap,
    Trajectory, TxQueue,
};
use crate::scenario::{FlowConfig, ScenarioConfig};
use crate::sim::{RngStream, Scheduler, SimTime};
use crate::traffic::{
    game_next_departure, AckInfo, GameFlowParams, Segment, Sink, SinkConfig, TcpSender,
};

#[derive(Clone, Debug)]
enum Ev {
    GameDeparture {
        flow: usize,
        dir: Direction,
    },
    TcpStart {
        flow: usize,
    },
    TcpTimer {
        flow: usize,
    },
    /// Downlink frame reaches the wired side of the APs.
    WiredArrival(Frame),
    /// Uplink frame reaches its server.
    ServerArrival {
        frame: Frame,
        ap: NodeId,
    },
    TxComplete,
    AckReady {
        flow: usize,
        ack: AckInfo,
    },
    LossSignal {
        flow: usize,
        seq: u64,
        attempt: u32,
        congestion: bool,
    },
    PeriodicTick,
    SampleTick,
    Step(LvapStep),
}

impl Ev {
    fn tag(&self) -> u8 {
        match self {
            Ev::GameDeparture { .. } => 1,
            Ev::TcpStart { .. } => 2,
            Ev::TcpTimer { .. } => 3,
            Ev::WiredArrival(_) => 4,
            Ev::ServerArrival { .. } => 5,
            Ev::TxComplete => 6,
            Ev::AckReady { .. } => 7,
            Ev::LossSignal { .. } => 8,
            Ev::PeriodicTick => 9,
            Ev::SampleTick => 10,
            Ev::Step(_) => 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FlowKind {
    Game,
    Tcp,
}

/// One direction of a configured flow, as it appears in traces.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowInfo {
    pub id: FlowId,
    /// `<flow>/dl`, `<flow>/ul`, `<flow>/data` or `<flow>/ack`.
    pub name: String,
    pub parent: String,
    pub kind: FlowKind,
    pub direction: Direction,
    pub station: NodeId,
}

#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
enum Source {
    Game {
        params: GameFlowParams,
        rng: RngStream,
    },
    Tcp {
        sender: Box<TcpSender>,
        ack_bytes: u32,
        next_ack_seq: u64,
    },
}

#[derive(Debug)]
struct FlowRt {
    station: NodeId,
    server: NodeId,
    wired: SimTime,
    down: FlowId,
    up: FlowId,
    source: Source,
    /// Sink for the downlink direction (at the station).
    down_sink: Sink,
    /// Sink for the uplink direction (at the server).
    up_sink: Sink,
    next_seq: [u64; 2],
}

#[derive(Debug, Default, Clone, Copy)]
struct Copies {
    outstanding: u32,
    delivered: bool,
    cause: Option<DropCause>,
}

/// Final state of a run, consumed by the report builder.
#[derive(Debug)]
pub struct RunOutput {
    pub config: ScenarioConfig,
    pub node_names: BTreeMap<NodeId, String>,
    pub flows: Vec<FlowInfo>,
    pub records: Recorder,
    pub handoffs: Vec<HandoffRecord>,
    pub client_views: BTreeMap<NodeId, ClientView>,
    pub tcp: BTreeMap<String, TcpSender>,
    /// Violations found by the post-run invariant checks.
    pub violations: Vec<String>,
    pub events_fired: u64,
    /// FNV-1a digest over (time, kind) of every processed event.
    pub event_digest: u64,
    pub end_time: SimTime,
    pub medium_busy: SimTime,
    pub unknown_publishes: u64,
    pub publishes: u64,
    /// (enqueue time, queue length seen on arrival, queueing delay) of every
    /// accepted downlink frame that reached the head of its queue.
    pub queue_samples: Vec<(SimTime, usize, SimTime)>,
}

impl RunOutput {
    pub fn flow_by_name(&self, name: &str) -> Option<&FlowInfo> {
        self.flows.iter().find(|f| f.name == name)
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        self.node_names.get(&id).map(String::as_str).unwrap_or("?")
    }
}

pub struct Network {
    cfg: ScenarioConfig,
    sched: Scheduler<Ev>,
    medium: Medium,
    controller: Controller,
    radio: RadioMap,
    node_names: BTreeMap<NodeId, String>,
    aps: Vec<NodeId>,
    stations: Vec<NodeId>,
    queue_of: BTreeMap<NodeId, QueueId>,
    /// LVAP copies hosted by each AP: (ap, client) -> BSSID stamped on frames.
    hosted: BTreeMap<(NodeId, NodeId), Bssid>,
    on_air_bssid: Option<Bssid>,
    flows: Vec<FlowRt>,
    flow_info: Vec<FlowInfo>,
    records: Recorder,
    copies: HashMap<(FlowId, u64, u32), Copies>,
    views: BTreeMap<NodeId, ClientView>,
    contention: RngStream,
    loss: RngStream,
    shadowing: RngStream,
    stop_at: SimTime,
    digest: u64,
    queue_samples: Vec<(SimTime, usize, SimTime)>,
    arrival_len: HashMap<(FlowId, u64, u32, NodeId), usize>,
    step_violations: Vec<String>,
}

fn fnv_mix(h: u64, v: u64) -> u64 {
    let mut h = h;
    for b in v.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Network {
    /// Builds the network from a validated scenario.
    pub fn new(cfg: ScenarioConfig) -> Result<Self, crate::scenario::ConfigError> {
        cfg.validate()?;
        let seed = cfg.master_seed;
        let mut node_names = BTreeMap::new();
        let mut by_name = BTreeMap::new();
        let mut next_id = 0u32;
        let mut alloc = |name: &str, names: &mut BTreeMap<NodeId, String>| {
            let id = NodeId(next_id);
            next_id += 1;
            names.insert(id, name.to_owned());
            id
        };

        let ctrl_cfg = ControllerConfig {
            policy: cfg.handoff.policy.clone(),
            ordering: cfg.handoff.ordering,
            control_latency: SimTime::from_millis_f64(cfg.handoff.control_latency_ms),
            publish_threshold_dbm: cfg.handoff.publish_threshold_dbm,
        };
        let mut controller = Controller::new(ctrl_cfg);
        let mut radio = RadioMap::new();
        let mut medium = Medium::new();
        let mut queue_of = BTreeMap::new();
        let mut aps = Vec::new();
        for ap in &cfg.aps {
            let id = alloc(&ap.id, &mut node_names);
            by_name.insert(ap.id.clone(), id);
            radio.add_ap(id, ap.position);
            controller.register_ap(id);
            let params = ap
                .medium
                .as_ref()
                .map_or_else(|| cfg.medium.clone(), |o| o.apply(&cfg.medium));
            let cap = ap
                .queue_capacity_frames
                .unwrap_or(cfg.queue_capacity_frames);
            queue_of.insert(id, medium.attach(id, TxQueue::new(cap), params));
            aps.push(id);
        }
        let mut stations = Vec::new();
        for sta in &cfg.stations {
            let id = alloc(&sta.id, &mut node_names);
            by_name.insert(sta.id.clone(), id);
            let path = match (&sta.position, &sta.trajectory) {
                (Some(p), _) => Trajectory::fixed(*p),
                (None, Some(wps)) => Trajectory::new(
                    wps.iter()
                        .map(|w| (SimTime::from_secs_f64(w.t_s), Position::new(w.x, w.y)))
                        .collect(),
                )
                .map_err(|e| {
                    crate::scenario::ConfigError::Invalid(vec![format!(
                        "station `{}`: {e}",
                        sta.id
                    )])
                })?,
                (None, None) => unreachable!("validated"),
            };
            radio.add_station(id, path);
            queue_of.insert(
                id,
                medium.attach(
                    id,
                    TxQueue::new(cfg.queue_capacity_frames),
                    cfg.medium.clone(),
                ),
            );
            stations.push(id);
        }
        for (sta_cfg, &sta) in cfg.stations.iter().zip(&stations) {
            let ap = match &sta_cfg.initial_ap {
                Some(name) => by_name[name],
                None => *aps
                    .iter()
                    .max_by(|a, b| {
                        let da = radio.distance(**a, sta, SimTime::ZERO).expect("known");
                        let db = radio.distance(**b, sta, SimTime::ZERO).expect("known");
                        // nearer is stronger; ties keep the first AP
                        db.total_cmp(&da).then(b.cmp(a))
                    })
                    .expect("at least one AP"),
            };
            controller
                .create_lvap(sta, ap, SimTime::ZERO)
                .expect("registered AP");
        }
        if let Some(clients) = &cfg.handoff.clients {
            controller.set_mobile_clients(Some(
                clients.iter().map(|c| by_name[c]).collect::<BTreeSet<_>>(),
            ));
        }
        for &ap in &aps {
            controller
                .add_subscription(ap, SimTime::ZERO)
                .expect("registered AP");
        }

        let mut hosted = BTreeMap::new();
        for lvap in controller.lvaps() {
            for ap in &lvap.owner_aps {
                hosted.insert((*ap, lvap.client), lvap.virtual_bssid());
            }
        }

        let mut flows = Vec::new();
        let mut flow_info = Vec::new();
        for (i, fc) in cfg.flows.iter().enumerate() {
            let station = by_name[fc.station()];
            let server = alloc(&format!("{}-server", fc.id()), &mut node_names);
            let down = FlowId(2 * i as u32);
            let up = FlowId(2 * i as u32 + 1);
            let (kind, down_name, up_name, source, down_sink) = match fc {
                FlowConfig::Game { params, .. } => (
                    FlowKind::Game,
                    "dl",
                    "ul",
                    Source::Game {
                        params: params.clone(),
                        rng: RngStream::new(seed, &format!("game-src/{}", fc.id())),
                    },
                    Sink::game(),
                ),
                FlowConfig::Tcp { params, .. } => (
                    FlowKind::Tcp,
                    "data",
                    "ack",
                    Source::Tcp {
                        sender: Box::new(TcpSender::new(params.clone())),
                        ack_bytes: params.ack_bytes,
                        next_ack_seq: 0,
                    },
                    Sink::tcp(SinkConfig {
                        ack_delay_us: params.ack_delay_us,
                        acks_every: params.acks_every,
                    }),
                ),
            };
            for (id, suffix, dir) in [
                (down, down_name, Direction::Downlink),
                (up, up_name, Direction::Uplink),
            ] {
                flow_info.push(FlowInfo {
                    id,
                    name: format!("{}/{}", fc.id(), suffix),
                    parent: fc.id().to_owned(),
                    kind: kind.clone(),
                    direction: dir,
                    station,
                });
            }
            flows.push(FlowRt {
                station,
                server,
                wired: SimTime::from_millis_f64(fc.wired_latency_ms()),
                down,
                up,
                source,
                down_sink,
                up_sink: Sink::game(),
                next_seq: [0, 0],
            });
        }

        let views = stations
            .iter()
            .map(|s| (*s, ClientView::default()))
            .collect();
        let stop_at = SimTime::from_secs_f64(cfg.duration_s);
        let mut net = Network {
            sched: Scheduler::new(),
            medium,
            controller,
            radio,
            node_names,
            aps,
            stations,
            queue_of,
            hosted,
            on_air_bssid: None,
            flows,
            flow_info,
            records: Recorder::new(),
            copies: HashMap::new(),
            views,
            contention: RngStream::new(seed, "contention"),
            loss: RngStream::new(seed, "channel"),
            shadowing: RngStream::new(seed, "shadowing"),
            stop_at,
            digest: 0xcbf2_9ce4_8422_2325,
            queue_samples: Vec::new(),
            arrival_len: HashMap::new(),
            step_violations: Vec::new(),
            cfg,
        };
        net.prime();
        Ok(net)
    }

    fn prime(&mut self) {
        for i in 0..self.flows.len() {
            match &mut self.flows[i].source {
                Source::Game { params, rng } => {
                    for dir in [Direction::Uplink, Direction::Downlink] {
                        let (gap, _) = game_next_departure(params, dir, rng);
                        // first packet lands somewhere inside the first gap
                        let offset = SimTime::from_micros_f64(gap.as_micros() as f64 * rng.unit());
                        self.sched
                            .schedule(offset, Ev::GameDeparture { flow: i, dir })
                            .expect("future");
                    }
                }
                Source::Tcp { .. } => {
                    self.sched
                        .schedule(SimTime::ZERO, Ev::TcpStart { flow: i })
                        .expect("future");
                }
            }
        }
        match self.cfg.handoff.policy {
            HandoffPolicy::Periodic { interval_ms } => {
                self.sched
                    .schedule(SimTime::from_millis_f64(interval_ms), Ev::PeriodicTick)
                    .expect("future");
            }
            HandoffPolicy::ThresholdHysteresis { .. } => {
                self.sched
                    .schedule(SimTime::ZERO, Ev::SampleTick)
                    .expect("future");
            }
        }
    }

    /// Runs the scenario to completion, including the drain period.
    pub fn run(mut self) -> RunOutput {
        let end = self.stop_at + SimTime::from_secs_f64(self.cfg.drain_s);
        while let Some(ev) = self.sched.pop_until(end) {
            let now = ev.fire_at;
            self.digest = fnv_mix(
                fnv_mix(self.digest, now.as_micros()),
                u64::from(ev.action.tag()),
            );
            self.handle(now, ev.action);
        }
        self.sched
            .run_until(end, |_, _| unreachable!("queue drained up to end"))
            .expect("monotone");
        self.finish(end)
    }

    fn active(&self, now: SimTime) -> bool {
        now < self.stop_at
    }

    fn handle(&mut self, now: SimTime, ev: Ev) {
        match ev {
            Ev::GameDeparture { flow, dir } => self.on_game_departure(now, flow, dir),
            Ev::TcpStart { flow } => {
                let segs = self.sender(flow).pull(now);
                self.send_segments(now, flow, segs);
                self.sched
                    .schedule_in(SimTime::from_millis(50), Ev::TcpTimer { flow });
            }
            Ev::TcpTimer { flow } => {
                if self.active(now) {
                    let segs = self.sender(flow).on_timer(now);
                    self.send_segments(now, flow, segs);
                    self.sched
                        .schedule_in(SimTime::from_millis(50), Ev::TcpTimer { flow });
                }
            }
            Ev::WiredArrival(frame) => self.on_wired_arrival(now, frame),
            Ev::ServerArrival { frame, ap } => self.on_server_arrival(now, frame, ap),
            Ev::TxComplete => self.on_tx_complete(now),
            Ev::AckReady { flow, ack } => self.on_ack_ready(now, flow, ack),
            Ev::LossSignal {
                flow,
                seq,
                attempt,
                congestion,
            } => {
                if self.active(now) {
                    let sender = self.sender(flow);
                    let segs = if congestion {
                        sender.on_loss(seq, attempt, now)
                    } else {
                        sender.on_corruption(seq, attempt, now)
                    };
                    self.send_segments(now, flow, segs);
                }
            }
            Ev::PeriodicTick => {
                for d in self.controller.periodic_tick(now) {
                    self.start_handoff(d);
                }
                if let HandoffPolicy::Periodic { interval_ms } = self.cfg.handoff.policy {
                    let next = now + SimTime::from_millis_f64(interval_ms);
                    if next <= self.stop_at {
                        self.sched.schedule(next, Ev::PeriodicTick).expect("future");
                    }
                }
            }
            Ev::SampleTick => {
                self.on_sample(now);
                let next = now + SimTime::from_millis_f64(self.cfg.handoff.sample_period_ms);
                if next < self.stop_at {
                    self.sched.schedule(next, Ev::SampleTick).expect("future");
                }
            }
            Ev::Step(step) => self.on_step(now, step),
        }
    }

    fn sender(&mut self, flow: usize) -> &mut TcpSender {
        match &mut self.flows[flow].source {
            Source::Tcp { sender, .. } => sender,
            Source::Game { .. } => unreachable!("tcp event on game flow"),
        }
    }

    fn next_seq(&mut self, flow: usize, dir: Direction) -> u64 {
        let slot = &mut self.flows[flow].next_seq[usize::from(dir == Direction::Uplink)];
        let s = *slot;
        *slot += 1;
        s
    }

    fn on_game_departure(&mut self, now: SimTime, flow: usize, dir: Direction) {
        if !self.active(now) {
            return;
        }
        let (gap, size) = match &mut self.flows[flow].source {
            Source::Game { params, rng } => game_next_departure(params, dir, rng),
            Source::Tcp { .. } => unreachable!(),
        };
        let seq = self.next_seq(flow, dir);
        let f = &self.flows[flow];
        let (id, src, dst) = match dir {
            Direction::Downlink => (f.down, f.server, f.station),
            Direction::Uplink => (f.up, f.station, f.server),
        };
        let frame = Frame {
            flow: id,
            seq,
            attempt: 0,
            size_bytes: size,
            direction: dir,
            src,
            dst,
            client: f.station,
            created_at: now,
            enqueued_at: now,
            payload: Payload::Game,
        };
        self.records.on_send(id, seq, now);
        match dir {
            Direction::Downlink => {
                let wired = f.wired;
                self.sched.schedule_in(wired, Ev::WiredArrival(frame));
            }
            Direction::Uplink => self.enqueue_uplink(now, frame),
        }
        self.sched.schedule_in(gap, Ev::GameDeparture { flow, dir });
    }

    fn send_segments(&mut self, now: SimTime, flow: usize, segs: Vec<Segment>) {
        let f = &self.flows[flow];
        let mss = match &f.source {
            Source::Tcp { sender, .. } => sender.params().mss_bytes,
            Source::Game { .. } => unreachable!(),
        };
        let (id, server, station, wired) = (f.down, f.server, f.station, f.wired);
        for seg in segs {
            let frame = Frame {
                flow: id,
                seq: seg.seq,
                attempt: seg.attempt,
                size_bytes: mss,
                direction: Direction::Downlink,
                src: server,
                dst: station,
                client: station,
                created_at: now,
                enqueued_at: now,
                payload: Payload::TcpData,
            };
            self.records.on_send(id, seg.seq, now);
            self.sched.schedule_in(wired, Ev::WiredArrival(frame));
        }
    }

    fn flow_index(&self, id: FlowId) -> usize {
        (id.0 / 2) as usize
    }

    fn on_wired_arrival(&mut self, now: SimTime, frame: Frame) {
        let client = frame.client;
        let owners = self
            .controller
            .route_downlink(client)
            .expect("every station has an LVAP");
        let key = (frame.flow, frame.seq, frame.attempt);
        let mut copies = Copies::default();
        if owners.is_empty() {
            self.controller.note_gap_loss(client);
            copies.cause = Some(DropCause::GapLoss);
        }
        for ap in owners {
            let q = self.queue_of[&ap];
            let len = self.medium.queue(q).len();
            match self.medium.queue_mut(q).enqueue(frame.clone(), now) {
                Enqueue::Accepted => {
                    copies.outstanding += 1;
                    self.arrival_len
                        .insert((frame.flow, frame.seq, frame.attempt, ap), len);
                }
                Enqueue::DroppedTail(_) => copies.cause = Some(DropCause::QueueTail),
            }
        }
        if copies.outstanding == 0 {
            self.transmission_lost(&frame, copies.cause.expect("dropped copy has a cause"));
        } else {
            self.copies.insert(key, copies);
            self.kick(now);
        }
    }

    fn enqueue_uplink(&mut self, now: SimTime, frame: Frame) {
        let q = self.queue_of[&frame.client];
        match self.medium.queue_mut(q).enqueue(frame, now) {
            Enqueue::Accepted => self.kick(now),
            Enqueue::DroppedTail(f) => self.records.on_drop(f.flow, f.seq, DropCause::QueueTail),
        }
    }

    /// Starts a transmission if the medium is idle.
    fn kick(&mut self, now: SimTime) {
        if let Some(end) = self.medium.try_start(now, &mut self.contention) {
            let tx = self.medium.on_air().expect("just started");
            let sender = self.medium.owner(tx.queue);
            let frame = &tx.frame;
            self.on_air_bssid = Some(if sender == frame.client {
                // stations address their own virtual BSSID
                self.controller
                    .lvap(frame.client)
                    .expect("lvap")
                    .virtual_bssid()
            } else {
                self.hosted
                    .get(&(sender, frame.client))
                    .copied()
                    .unwrap_or(Bssid::physical(sender))
            });
            if frame.direction == Direction::Downlink {
                if let Some(len) =
                    self.arrival_len
                        .remove(&(frame.flow, frame.seq, frame.attempt, sender))
                {
                    self.queue_samples
                        .push((frame.enqueued_at, len, now - frame.enqueued_at));
                }
            }
            self.sched.schedule(end, Ev::TxComplete).expect("future");
        }
    }

    fn on_tx_complete(&mut self, now: SimTime) {
        let tx = self
            .medium
            .finish(&mut self.loss)
            .expect("a frame was on the air");
        let bssid = self.on_air_bssid.take().expect("stamped at start");
        let sender = self.medium.owner(tx.queue);
        let frame = tx.frame;
        match frame.direction {
            Direction::Downlink => {
                let key = (frame.flow, frame.seq, frame.attempt);
                let mut c = self.copies.remove(&key).expect("copy accounting");
                c.outstanding -= 1;
                if tx.lost {
                    c.cause = Some(DropCause::RandomLoss);
                } else {
                    let bicast_dup = c.delivered;
                    c.delivered = true;
                    self.deliver_downlink(now, &frame, sender, bssid, bicast_dup);
                }
                self.settle(key, c, &frame);
            }
            Direction::Uplink => {
                if tx.lost {
                    self.records
                        .on_drop(frame.flow, frame.seq, DropCause::RandomLoss);
                } else {
                    let lvap = self.controller.lvap(frame.client).expect("lvap");
                    match lvap.owner_aps.iter().next().copied() {
                        None => {
                            self.controller.note_gap_loss(frame.client);
                            self.records
                                .on_drop(frame.flow, frame.seq, DropCause::GapLoss);
                        }
                        Some(ap) => {
                            let wired = self.flows[self.flow_index(frame.flow)].wired;
                            self.sched
                                .schedule_in(wired, Ev::ServerArrival { frame, ap });
                        }
                    }
                }
            }
        }
        self.kick(now);
    }

    fn settle(&mut self, key: (FlowId, u64, u32), c: Copies, frame: &Frame) {
        if c.outstanding > 0 {
            self.copies.insert(key, c);
        } else if !c.delivered {
            self.transmission_lost(frame, c.cause.unwrap_or(DropCause::RandomLoss));
        }
    }

    /// Every copy of a downlink transmission is gone without delivery.
    fn transmission_lost(&mut self, frame: &Frame, cause: DropCause) {
        self.records.on_drop(frame.flow, frame.seq, cause);
        if frame.payload == Payload::TcpData {
            let flow = self.flow_index(frame.flow);
            let rtt = self.sender(flow).srtt();
            let congestion = cause != DropCause::RandomLoss;
            self.sched.schedule_in(
                rtt,
                Ev::LossSignal {
                    flow,
                    seq: frame.seq,
                    attempt: frame.attempt,
                    congestion,
                },
            );
        }
    }

    fn deliver_downlink(
        &mut self,
        now: SimTime,
        frame: &Frame,
        ap: NodeId,
        bssid: Bssid,
        bicast_dup: bool,
    ) {
        self.views
            .get_mut(&frame.client)
            .expect("station")
            .observe(bssid);
        self.records
            .on_deliver(frame.flow, frame.seq, now, Some(ap));
        if bicast_dup {
            self.controller.note_duplicate(frame.client);
        }
        let flow = self.flow_index(frame.flow);
        let out = self.flows[flow].down_sink.receive(frame.seq, frame.attempt);
        if let Some(ack) = out.ack {
            let delay = self.flows[flow].down_sink.ack_delay();
            self.sched.schedule_in(delay, Ev::AckReady { flow, ack });
        }
    }

    fn on_ack_ready(&mut self, now: SimTime, flow: usize, ack: AckInfo) {
        let f = &mut self.flows[flow];
        let Source::Tcp {
            ack_bytes,
            next_ack_seq,
            ..
        } = &mut f.source
        else {
            unreachable!()
        };
        let seq = *next_ack_seq;
        *next_ack_seq += 1;
        let frame = Frame {
            flow: f.up,
            seq,
            attempt: 0,
            size_bytes: *ack_bytes,
            direction: Direction::Uplink,
            src: f.station,
            dst: f.server,
            client: f.station,
            created_at: now,
            enqueued_at: now,
            payload: Payload::TcpAck {
                seq: ack.seq,
                cumulative: ack.cumulative,
            },
        };
        self.records.on_send(frame.flow, seq, now);
        self.enqueue_uplink(now, frame);
    }

    fn on_server_arrival(&mut self, now: SimTime, frame: Frame, ap: NodeId) {
        self.records
            .on_deliver(frame.flow, frame.seq, now, Some(ap));
        let flow = self.flow_index(frame.flow);
        self.flows[flow].up_sink.receive(frame.seq, frame.attempt);
        if let Payload::TcpAck { seq, cumulative } = frame.payload {
            if self.active(now) {
                let segs = self.sender(flow).on_ack(seq, cumulative, now);
                self.send_segments(now, flow, segs);
            }
        }
    }

    fn start_handoff(&mut self, decision: crate::lvap::HandoffDecision) {
        if let Ok(Some(plan)) = self.controller.execute_handoff(decision) {
            self.sched
                .schedule(plan.first.0, Ev::Step(plan.first.1))
                .expect("future");
            self.sched
                .schedule(plan.second.0, Ev::Step(plan.second.1))
                .expect("future");
        }
    }

    fn on_sample(&mut self, now: SimTime) {
        let clients: Vec<NodeId> = self.stations.clone();
        for client in clients {
            let owners = self
                .controller
                .lvap(client)
                .map(|l| l.owner_aps.clone())
                .unwrap_or_default();
            let mut samples = Vec::with_capacity(self.aps.len());
            for &ap in &self.aps {
                if !self.controller.is_subscribed(ap) {
                    continue;
                }
                let rssi = self
                    .radio
                    .rssi(ap, client, now, &self.cfg.channel, &mut self.shadowing)
                    .expect("known nodes");
                samples.push((ap, rssi));
            }
            // owners report first so publishes compare against this round's power
            samples.sort_by_key(|(ap, _)| !owners.contains(ap));
            for (ap, rssi) in samples {
                if let Some(ev) = self.controller.sample(ap, client, rssi, now) {
                    if let Some(d) = self.controller.on_publish(ev) {
                        self.start_handoff(d);
                    }
                }
            }
        }
    }

    fn on_step(&mut self, now: SimTime, step: LvapStep) {
        self.controller.apply_step(step, now);
        match step {
            LvapStep::Add { client, ap, .. } => {
                let bssid = self.controller.lvap(client).expect("lvap").virtual_bssid();
                self.hosted.insert((ap, client), bssid);
            }
            LvapStep::Remove {
                client,
                ap,
                handoff,
            } => {
                self.hosted.remove(&(ap, client));
                let q = self.queue_of[&ap];
                let flushed = self.medium.queue_mut(q).flush_where(|f| f.client == client);
                self.controller.note_flushed(handoff, flushed.len() as u64);
                for frame in flushed {
                    self.arrival_len
                        .remove(&(frame.flow, frame.seq, frame.attempt, ap));
                    let key = (frame.flow, frame.seq, frame.attempt);
                    let mut c = self.copies.remove(&key).expect("copy accounting");
                    c.outstanding -= 1;
                    c.cause = Some(DropCause::HandoffFlush);
                    self.settle(key, c, &frame);
                }
            }
        }
        self.check_liveness(step);
    }

    /// After the second step of a handoff the destination must be the sole owner.
    fn check_liveness(&mut self, step: LvapStep) {
        let (LvapStep::Add {
            client, handoff, ..
        }
        | LvapStep::Remove {
            client, handoff, ..
        }) = step;
        let rec = &self.controller.handoff_log()[handoff];
        let second = matches!(
            (step, rec.ordering),
            (LvapStep::Remove { .. }, HandoffOrdering::AddFirst { .. })
                | (LvapStep::Add { .. }, HandoffOrdering::RemoveFirst { .. })
        );
        if !second {
            return;
        }
        let owners = &self.controller.lvap(client).expect("lvap").owner_aps;
        if rec.completed_at.is_none() || owners.len() != 1 || !owners.contains(&rec.dst) {
            self.step_violations.push(format!(
                "handoff {handoff} at {} left owners {owners:?}",
                rec.t
            ));
        }
    }

    fn finish(self, end: SimTime) -> RunOutput {
        let mut violations = self.step_violations.clone();
        for info in &self.flow_info {
            let mut sent = 0u64;
            let mut recv = 0u64;
            let mut lost = 0u64;
            for r in self.records.flow(info.id) {
                sent += 1;
                match r.t_rx {
                    Some(rx) => {
                        recv += 1;
                        if rx < r.t_tx {
                            violations
                                .push(format!("{}: seq {} received before sent", info.name, r.seq));
                        }
                    }
                    None => lost += 1,
                }
            }
            if sent != recv + lost {
                violations.push(format!(
                    "{}: sent {sent} != received {recv} + lost {lost}",
                    info.name
                ));
            }
        }
        for rec in self.controller.handoff_log() {
            if rec.completed_at.is_none() && rec.t + SimTime::from_secs(1) < self.stop_at {
                violations.push(format!("handoff at {} never completed", rec.t));
            }
            if rec.duplicates > 0 && matches!(rec.ordering, HandoffOrdering::RemoveFirst { .. }) {
                violations.push(format!(
                    "remove-first handoff at {} produced duplicates",
                    rec.t
                ));
            }
            if rec.gap_losses > 0 && matches!(rec.ordering, HandoffOrdering::AddFirst { .. }) {
                violations.push(format!(
                    "add-first handoff at {} produced gap losses",
                    rec.t
                ));
            }
        }
        for (client, view) in &self.views {
            if view.bssid_changes > 0 || view.reassociations > 0 {
                violations.push(format!(
                    "client {} saw {} BSSID changes",
                    self.node_names[client], view.bssid_changes
                ));
            }
        }
        let mut tcp = BTreeMap::new();
        for (fc, f) in self.cfg.flows.iter().zip(self.flows) {
            if let Source::Tcp { sender, .. } = f.source {
                if !sender.conserves() {
                    violations.push(format!("{}: TCP segment conservation violated", fc.id()));
                }
                tcp.insert(fc.id().to_owned(), *sender);
            }
        }
        RunOutput {
            node_names: self.node_names,
            flows: self.flow_info,
            records: self.records,
            handoffs: self.controller.handoff_log().to_vec(),
            client_views: self.views,
            tcp,
            violations,
            events_fired: self.sched.fired(),
            event_digest: self.digest,
            end_time: end,
            medium_busy: self.medium.busy_time(),
            unknown_publishes: self.controller.unknown_publishes(),
            publishes: self.controller.publishes(),
            queue_samples: self.queue_samples,
            config: self.cfg,
        }
    }
}

/// Builds and runs a scenario in memory.
pub fn simulate(cfg: ScenarioConfig) -> Result<RunOutput, crate::scenario::ConfigError> {
    Ok(Network::new(cfg)?.run())
}
