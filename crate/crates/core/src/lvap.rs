//! Controller side of the virtual-AP scheme: the per-client LVAP table,
//! RSSI subscriptions and publishes, handoff policies, and the two-step
//! handoff execution (add-first or remove-first).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::radio::NodeId;
use crate::sim::SimTime;

/// Locally administered MAC address used as a client's private BSSID.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bssid(pub [u8; 6]);

impl Bssid {
    /// Derives the virtual BSSID for `client`. Distinct clients get distinct addresses.
    pub fn for_client(client: NodeId) -> Self {
        let c = client.0.to_be_bytes();
        Bssid([0x02, 0x1d, c[0], c[1], c[2], c[3]])
    }

    /// Physical BSSID of an AP radio (never handed to clients while an LVAP exists).
    pub fn physical(ap: NodeId) -> Self {
        let c = ap.0.to_be_bytes();
        Bssid([0x00, 0x1d, c[0], c[1], c[2], c[3]])
    }
}

impl fmt::Display for Bssid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lvap {
    pub client: NodeId,
    virtual_bssid: Bssid,
    pub owner_aps: BTreeSet<NodeId>,
    pub created_at: SimTime,
}

impl Lvap {
    pub fn virtual_bssid(&self) -> Bssid {
        self.virtual_bssid
    }

    /// The owner when exactly one AP holds the LVAP.
    pub fn sole_owner(&self) -> Option<NodeId> {
        if self.owner_aps.len() == 1 {
            self.owner_aps.iter().next().copied()
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RxPower,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subscription {
    pub ap: NodeId,
    pub metric: Metric,
    pub threshold_dbm: f64,
    pub registered_at: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PublishEvent {
    pub ap: NodeId,
    pub client: NodeId,
    pub rssi_dbm: f64,
    pub t: SimTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HandoffPolicy {
    Periodic {
        interval_ms: f64,
    },
    ThresholdHysteresis {
        hysteresis_db: f64,
        dwell_ms: f64,
        min_interval_ms: f64,
    },
}

impl Default for HandoffPolicy {
    fn default() -> Self {
        HandoffPolicy::Periodic {
            interval_ms: 3_000.0,
        }
    }
}

impl HandoffPolicy {
    pub fn threshold_defaults() -> Self {
        HandoffPolicy::ThresholdHysteresis {
            hysteresis_db: 3.0,
            dwell_ms: 500.0,
            min_interval_ms: 1_000.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            HandoffPolicy::Periodic { interval_ms } if !(interval_ms > 0.0) => Err(format!(
                "handoff.policy.interval_ms must be > 0 (got {interval_ms})"
            )),
            HandoffPolicy::ThresholdHysteresis {
                hysteresis_db,
                dwell_ms,
                min_interval_ms,
            } if !(hysteresis_db >= 0.0 && dwell_ms >= 0.0 && min_interval_ms >= 0.0) => Err(
                "handoff.policy hysteresis_db, dwell_ms and min_interval_ms must be >= 0".into(),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HandoffOrdering {
    AddFirst { overlap_ms: f64 },
    RemoveFirst { gap_ms: f64 },
}

impl Default for HandoffOrdering {
    fn default() -> Self {
        HandoffOrdering::AddFirst { overlap_ms: 10.0 }
    }
}

impl HandoffOrdering {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            HandoffOrdering::AddFirst { overlap_ms: w }
            | HandoffOrdering::RemoveFirst { gap_ms: w }
                if !(w >= 0.0) =>
            {
                Err(format!("handoff.ordering window must be >= 0 (got {w})"))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            HandoffOrdering::AddFirst { .. } => "add_first",
            HandoffOrdering::RemoveFirst { .. } => "remove_first",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HandoffDecision {
    pub client: NodeId,
    pub src: NodeId,
    pub dst: NodeId,
    pub t: SimTime,
}

/// One half of a handoff, applied by the network at its scheduled time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LvapStep {
    Add {
        client: NodeId,
        ap: NodeId,
        handoff: usize,
    },
    Remove {
        client: NodeId,
        ap: NodeId,
        handoff: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HandoffPlan {
    pub handoff: usize,
    pub first: (SimTime, LvapStep),
    pub second: (SimTime, LvapStep),
}

/// A row of the handoff log.
#[derive(Clone, Debug, PartialEq)]
pub struct HandoffRecord {
    pub t: SimTime,
    pub client: NodeId,
    pub src: NodeId,
    pub dst: NodeId,
    pub ordering: HandoffOrdering,
    pub duplicates: u64,
    pub gap_losses: u64,
    pub flushed_frames: u64,
    pub completed_at: Option<SimTime>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("AP {0:?} is not registered with the controller")]
    UnknownAp(NodeId),
    #[error("client {0:?} has no LVAP")]
    NoLvap(NodeId),
    #[error("client {0:?} already has an LVAP")]
    DuplicateLvap(NodeId),
    #[error("a handoff of client {0:?} is already in progress")]
    HandoffInProgress(NodeId),
}

/// Dwell/hysteresis bookkeeping for one client, independent of the rest of
/// the controller so it can be replayed over a recorded RSSI trace.
#[derive(Clone, Debug, Default)]
pub struct HysteresisTracker {
    owner_rssi: Option<f64>,
    /// Candidate AP -> time its advantage first reached the hysteresis margin.
    ahead_since: BTreeMap<NodeId, SimTime>,
}

impl HysteresisTracker {
    pub fn observe_owner(&mut self, rssi_dbm: f64) {
        self.owner_rssi = Some(rssi_dbm);
    }

    /// Feeds one publish; returns true when the candidate qualifies for a handoff.
    /// `rate_limited` reports whether `min_interval` still blocks the client.
    pub fn observe_candidate(
        &mut self,
        ap: NodeId,
        rssi_dbm: f64,
        t: SimTime,
        hysteresis_db: f64,
        dwell: SimTime,
        rate_limited: bool,
    ) -> bool {
        let Some(owner) = self.owner_rssi else {
            return false;
        };
        if rssi_dbm - owner >= hysteresis_db {
            let since = *self.ahead_since.entry(ap).or_insert(t);
            t.saturating_sub(since) >= dwell && !rate_limited
        } else {
            self.ahead_since.remove(&ap);
            false
        }
    }

    pub fn reset(&mut self) {
        self.owner_rssi = None;
        self.ahead_since.clear();
    }
}

#[derive(Clone, Debug)]
pub struct ControllerConfig {
    pub policy: HandoffPolicy,
    pub ordering: HandoffOrdering,
    pub control_latency: SimTime,
    /// Publish condition: sampled power of a non-owned client above this.
    pub publish_threshold_dbm: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            policy: HandoffPolicy::default(),
            ordering: HandoffOrdering::default(),
            control_latency: SimTime::from_millis(5),
            publish_threshold_dbm: -90.0,
        }
    }
}

/// Central controller state. Mutated only from the event loop.
#[derive(Clone, Debug)]
pub struct Controller {
    cfg: ControllerConfig,
    aps: Vec<NodeId>,
    lvaps: BTreeMap<NodeId, Lvap>,
    subscriptions: BTreeMap<NodeId, Subscription>,
    trackers: BTreeMap<NodeId, HysteresisTracker>,
    last_handoff: BTreeMap<NodeId, SimTime>,
    in_progress: BTreeMap<NodeId, usize>,
    mobile: Option<BTreeSet<NodeId>>,
    log: Vec<HandoffRecord>,
    unknown_publishes: u64,
    publishes: u64,
    orphan_gap_losses: u64,
}

impl Controller {
    pub fn new(cfg: ControllerConfig) -> Self {
        Self {
            cfg,
            aps: Vec::new(),
            lvaps: BTreeMap::new(),
            subscriptions: BTreeMap::new(),
            trackers: BTreeMap::new(),
            last_handoff: BTreeMap::new(),
            in_progress: BTreeMap::new(),
            mobile: None,
            log: Vec::new(),
            unknown_publishes: 0,
            publishes: 0,
            orphan_gap_losses: 0,
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn register_ap(&mut self, ap: NodeId) {
        if !self.aps.contains(&ap) {
            self.aps.push(ap);
        }
    }

    pub fn aps(&self) -> &[NodeId] {
        &self.aps
    }

    /// Restricts policy decisions to these clients; `None` means every client.
    pub fn set_mobile_clients(&mut self, clients: Option<BTreeSet<NodeId>>) {
        self.mobile = clients;
    }

    fn is_mobile(&self, client: NodeId) -> bool {
        self.mobile.as_ref().is_none_or(|m| m.contains(&client))
    }

    /// Creates the LVAP for a newly associated client, hosted at `ap`.
    pub fn create_lvap(
        &mut self,
        client: NodeId,
        ap: NodeId,
        now: SimTime,
    ) -> Result<&Lvap, ControlError> {
        if !self.aps.contains(&ap) {
            return Err(ControlError::UnknownAp(ap));
        }
        if self.lvaps.contains_key(&client) {
            return Err(ControlError::DuplicateLvap(client));
        }
        let lvap = Lvap {
            client,
            virtual_bssid: Bssid::for_client(client),
            owner_aps: BTreeSet::from([ap]),
            created_at: now,
        };
        Ok(self.lvaps.entry(client).or_insert(lvap))
    }

    pub fn lvap(&self, client: NodeId) -> Option<&Lvap> {
        self.lvaps.get(&client)
    }

    pub fn lvaps(&self) -> impl Iterator<Item = &Lvap> {
        self.lvaps.values()
    }

    /// Idempotent: a second subscription for the same AP returns the existing one.
    pub fn add_subscription(
        &mut self,
        ap: NodeId,
        now: SimTime,
    ) -> Result<&Subscription, ControlError> {
        if !self.aps.contains(&ap) {
            return Err(ControlError::UnknownAp(ap));
        }
        let threshold_dbm = self.cfg.publish_threshold_dbm;
        Ok(self.subscriptions.entry(ap).or_insert(Subscription {
            ap,
            metric: Metric::RxPower,
            threshold_dbm,
            registered_at: now,
        }))
    }

    pub fn subscriptions(&self) -> impl Iterator<Item = &Subscription> {
        self.subscriptions.values()
    }

    pub fn is_subscribed(&self, ap: NodeId) -> bool {
        self.subscriptions.contains_key(&ap)
    }

    /// AP-side sampling step. Owners report their client's power to the controller;
    /// other subscribed APs publish when the sample exceeds the subscription threshold.
    /// Returns the publish that was emitted, if any.
    pub fn sample(
        &mut self,
        ap: NodeId,
        client: NodeId,
        rssi_dbm: f64,
        t: SimTime,
    ) -> Option<PublishEvent> {
        let sub = self.subscriptions.get(&ap)?;
        let owned = self
            .lvaps
            .get(&client)
            .is_some_and(|l| l.owner_aps.contains(&ap));
        if owned {
            self.trackers
                .entry(client)
                .or_default()
                .observe_owner(rssi_dbm);
            None
        } else if rssi_dbm > sub.threshold_dbm {
            Some(PublishEvent {
                ap,
                client,
                rssi_dbm,
                t,
            })
        } else {
            None
        }
    }

    /// Handles a publish. Only the threshold policy reacts to publishes.
    pub fn on_publish(&mut self, ev: PublishEvent) -> Option<HandoffDecision> {
        self.publishes += 1;
        let Some(lvap) = self.lvaps.get(&ev.client) else {
            self.unknown_publishes += 1;
            return None;
        };
        let HandoffPolicy::ThresholdHysteresis {
            hysteresis_db,
            dwell_ms,
            min_interval_ms,
        } = self.cfg.policy
        else {
            return None;
        };
        if !self.is_mobile(ev.client) || self.in_progress.contains_key(&ev.client) {
            return None;
        }
        let src = lvap.sole_owner()?;
        if src == ev.ap {
            return None;
        }
        let rate_limited = self.last_handoff.get(&ev.client).is_some_and(|last| {
            ev.t.saturating_sub(*last) < SimTime::from_millis_f64(min_interval_ms)
        });
        let fire = self
            .trackers
            .entry(ev.client)
            .or_default()
            .observe_candidate(
                ev.ap,
                ev.rssi_dbm,
                ev.t,
                hysteresis_db,
                SimTime::from_millis_f64(dwell_ms),
                rate_limited,
            );
        fire.then_some(HandoffDecision {
            client: ev.client,
            src,
            dst: ev.ap,
            t: ev.t,
        })
    }

    /// Periodic policy tick: moves every mobile client to the next registered AP.
    pub fn periodic_tick(&mut self, t: SimTime) -> Vec<HandoffDecision> {
        if !matches!(self.cfg.policy, HandoffPolicy::Periodic { .. }) || self.aps.len() < 2 {
            return Vec::new();
        }
        let mut out = Vec::new();
        for lvap in self.lvaps.values() {
            if !self.is_mobile(lvap.client) || self.in_progress.contains_key(&lvap.client) {
                continue;
            }
            let Some(src) = lvap.sole_owner() else {
                continue;
            };
            let i = self
                .aps
                .iter()
                .position(|a| *a == src)
                .expect("owner is registered");
            let dst = self.aps[(i + 1) % self.aps.len()];
            out.push(HandoffDecision {
                client: lvap.client,
                src,
                dst,
                t,
            });
        }
        out
    }

    /// Plans the two LVAP steps of a handoff. `Ok(None)` when `dst` already owns the client.
    pub fn execute_handoff(
        &mut self,
        decision: HandoffDecision,
    ) -> Result<Option<HandoffPlan>, ControlError> {
        let client = decision.client;
        let lvap = self
            .lvaps
            .get(&client)
            .ok_or(ControlError::NoLvap(client))?;
        if !self.aps.contains(&decision.dst) {
            return Err(ControlError::UnknownAp(decision.dst));
        }
        if self.in_progress.contains_key(&client) {
            return Err(ControlError::HandoffInProgress(client));
        }
        let Some(src) = lvap.sole_owner() else {
            return Err(ControlError::HandoffInProgress(client));
        };
        if src == decision.dst {
            return Ok(None);
        }
        let idx = self.log.len();
        let ordering = self.cfg.ordering;
        self.log.push(HandoffRecord {
            t: decision.t,
            client,
            src,
            dst: decision.dst,
            ordering,
            duplicates: 0,
            gap_losses: 0,
            flushed_frames: 0,
            completed_at: None,
        });
        self.in_progress.insert(client, idx);
        self.last_handoff.insert(client, decision.t);
        if let Some(tr) = self.trackers.get_mut(&client) {
            tr.reset();
        }
        let t0 = decision.t + self.cfg.control_latency;
        let add = LvapStep::Add {
            client,
            ap: decision.dst,
            handoff: idx,
        };
        let remove = LvapStep::Remove {
            client,
            ap: src,
            handoff: idx,
        };
        let plan = match ordering {
            HandoffOrdering::AddFirst { overlap_ms } => HandoffPlan {
                handoff: idx,
                first: (t0, add),
                second: (t0 + SimTime::from_millis_f64(overlap_ms), remove),
            },
            HandoffOrdering::RemoveFirst { gap_ms } => HandoffPlan {
                handoff: idx,
                first: (t0, remove),
                second: (t0 + SimTime::from_millis_f64(gap_ms), add),
            },
        };
        Ok(Some(plan))
    }

    /// Applies one step to the LVAP table. The second step of a plan completes the handoff.
    pub fn apply_step(&mut self, step: LvapStep, now: SimTime) {
        let (client, handoff) = match step {
            LvapStep::Add {
                client,
                ap,
                handoff,
            } => {
                self.lvaps
                    .get_mut(&client)
                    .expect("lvap")
                    .owner_aps
                    .insert(ap);
                (client, handoff)
            }
            LvapStep::Remove {
                client,
                ap,
                handoff,
            } => {
                self.lvaps
                    .get_mut(&client)
                    .expect("lvap")
                    .owner_aps
                    .remove(&ap);
                (client, handoff)
            }
        };
        let rec = &self.log[handoff];
        let lvap = &self.lvaps[&client];
        if lvap.sole_owner() == Some(rec.dst) {
            self.log[handoff].completed_at = Some(now);
            self.in_progress.remove(&client);
        }
    }

    /// APs a downlink frame for `client` must be queued at. Empty inside a remove-first gap.
    pub fn route_downlink(&self, client: NodeId) -> Result<Vec<NodeId>, ControlError> {
        let lvap = self
            .lvaps
            .get(&client)
            .ok_or(ControlError::NoLvap(client))?;
        Ok(lvap.owner_aps.iter().copied().collect())
    }

    fn current_record(&mut self, client: NodeId) -> Option<&mut HandoffRecord> {
        let idx = match self.in_progress.get(&client) {
            Some(i) => *i,
            None => self.log.iter().rposition(|r| r.client == client)?,
        };
        self.log.get_mut(idx)
    }

    pub fn note_gap_loss(&mut self, client: NodeId) {
        match self.current_record(client) {
            Some(r) => r.gap_losses += 1,
            None => self.orphan_gap_losses += 1,
        }
    }

    /// Duplicates are charged to the client's latest handoff.
    pub fn note_duplicate(&mut self, client: NodeId) {
        if let Some(r) = self.current_record(client) {
            r.duplicates += 1;
        }
    }

    pub fn note_flushed(&mut self, handoff: usize, frames: u64) {
        self.log[handoff].flushed_frames += frames;
    }

    pub fn handoff_log(&self) -> &[HandoffRecord] {
        &self.log
    }

    pub fn unknown_publishes(&self) -> u64 {
        self.unknown_publishes
    }

    pub fn publishes(&self) -> u64 {
        self.publishes
    }

    pub fn in_progress(&self, client: NodeId) -> bool {
        self.in_progress.contains_key(&client)
    }
}

/// What a client's radio sees: the BSSID stamped on every frame it receives.
/// Any change would force a re-association.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClientView {
    pub bssid: Option<Bssid>,
    pub bssid_changes: u64,
    pub reassociations: u64,
    pub frames_seen: u64,
}

impl ClientView {
    pub fn observe(&mut self, bssid: Bssid) {
        self.frames_seen += 1;
        match self.bssid {
            None => self.bssid = Some(bssid),
            Some(b) if b != bssid => {
                self.bssid = Some(bssid);
                self.bssid_changes += 1;
                self.reassociations += 1;
            }
            Some(_) => {}
        }
    }
}

/// Replays the threshold policy over a per-AP RSSI trace for one client.
/// `trace[k]` holds the sample time and the power each AP measured. Returns the
/// number of handoffs, with each handoff completing instantly.
pub fn replay_threshold_policy(
    trace: &[(SimTime, Vec<f64>)],
    initial_owner: usize,
    hysteresis_db: f64,
    dwell: SimTime,
    min_interval: SimTime,
) -> usize {
    let mut owner = initial_owner;
    let mut tracker = HysteresisTracker::default();
    let mut last: Option<SimTime> = None;
    let mut handoffs = 0;
    for (t, rssi) in trace {
        tracker.observe_owner(rssi[owner]);
        let limited = last.is_some_and(|l| t.saturating_sub(l) < min_interval);
        for (ap, &r) in rssi.iter().enumerate() {
            if ap == owner {
                continue;
            }
            if tracker.observe_candidate(NodeId(ap as u32), r, *t, hysteresis_db, dwell, limited) {
                owner = ap;
                last = Some(*t);
                handoffs += 1;
                tracker.reset();
                break;
            }
        }
    }
    handoffs
}
