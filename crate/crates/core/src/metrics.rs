//! Per-packet bookkeeping and flow statistics: one-way delay, jitter
//! (population standard deviation of delay), loss, duplicates, and a MOS
//! estimator interpolating the calibration table of game quality vs RTT.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::radio::{FlowId, NodeId};
use crate::sim::SimTime;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty delay series")]
    EmptySeries,
    #[error("no packets sent")]
    NothingSent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropCause {
    QueueTail,
    RandomLoss,
    HandoffFlush,
    GapLoss,
}

impl DropCause {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropCause::QueueTail => "queue_tail",
            DropCause::RandomLoss => "random_loss",
            DropCause::HandoffFlush => "handoff_flush",
            DropCause::GapLoss => "gap_loss",
        }
    }
}

impl fmt::Display for DropCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PacketRecord {
    pub flow: FlowId,
    pub seq: u64,
    pub t_tx: SimTime,
    /// First delivery.
    pub t_rx: Option<SimTime>,
    pub dup_count: u32,
    pub serving_ap_at_rx: Option<NodeId>,
    /// Last drop suffered by a packet that was never delivered.
    pub drop_cause: Option<DropCause>,
}

impl PacketRecord {
    pub fn delay(&self) -> Option<SimTime> {
        self.t_rx.map(|rx| rx - self.t_tx)
    }
}

/// Collects packet records for every flow of one run.
#[derive(Clone, Debug, Default)]
pub struct Recorder {
    records: BTreeMap<(FlowId, u64), PacketRecord>,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a first transmission. Re-sends of a known sequence are ignored.
    pub fn on_send(&mut self, flow: FlowId, seq: u64, t: SimTime) {
        self.records.entry((flow, seq)).or_insert(PacketRecord {
            flow,
            seq,
            t_tx: t,
            t_rx: None,
            dup_count: 0,
            serving_ap_at_rx: None,
            drop_cause: None,
        });
    }

    /// Returns true when this delivery is a duplicate.
    pub fn on_deliver(&mut self, flow: FlowId, seq: u64, t: SimTime, ap: Option<NodeId>) -> bool {
        let rec = self
            .records
            .get_mut(&(flow, seq))
            .expect("delivered packet was sent");
        if rec.t_rx.is_some() {
            rec.dup_count += 1;
            true
        } else {
            rec.t_rx = Some(t);
            rec.serving_ap_at_rx = ap;
            rec.drop_cause = None;
            false
        }
    }

    pub fn on_drop(&mut self, flow: FlowId, seq: u64, cause: DropCause) {
        let rec = self
            .records
            .get_mut(&(flow, seq))
            .expect("dropped packet was sent");
        if rec.t_rx.is_none() {
            rec.drop_cause = Some(cause);
        }
    }

    pub fn get(&self, flow: FlowId, seq: u64) -> Option<&PacketRecord> {
        self.records.get(&(flow, seq))
    }

    /// All records ordered by (flow, seq).
    pub fn iter(&self) -> impl Iterator<Item = &PacketRecord> {
        self.records.values()
    }

    /// Records of one flow ordered by seq.
    pub fn flow(&self, flow: FlowId) -> impl Iterator<Item = &PacketRecord> {
        self.records
            .range((flow, 0)..=(flow, u64::MAX))
            .map(|(_, r)| r)
    }
}

/// Population standard deviation of one-way delays.
pub fn jitter(delays_ms: &[f64]) -> Result<f64, MetricsError> {
    if delays_ms.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    // Welford, single pass
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in delays_ms.iter().enumerate() {
        let d = x - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (x - mean);
    }
    Ok((m2 / delays_ms.len() as f64).max(0.0).sqrt())
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Linear-interpolated quantile, `q` in [0, 1].
pub fn quantile(xs: &[f64], q: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Loss-rate level above which players were reported not to notice loss any more.
pub const LOSS_NOTICE_THRESHOLD: f64 = 0.35;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub sent: u64,
    pub received_unique: u64,
    pub duplicates: u64,
    pub lost: u64,
    #[serde(skip)]
    pub delays_ms: Vec<f64>,
    pub jitter_ms: Option<f64>,
    pub loss_rate: f64,
    pub mos: Option<f64>,
}

impl FlowStats {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a PacketRecord>) -> Self {
        let mut s = FlowStats {
            sent: 0,
            received_unique: 0,
            duplicates: 0,
            lost: 0,
            delays_ms: Vec::new(),
            jitter_ms: None,
            loss_rate: 0.0,
            mos: None,
        };
        for r in records {
            s.sent += 1;
            s.duplicates += u64::from(r.dup_count);
            match r.delay() {
                Some(d) => {
                    s.received_unique += 1;
                    s.delays_ms.push(d.as_millis_f64());
                }
                None => s.lost += 1,
            }
        }
        s.loss_rate = loss_rate(&s).unwrap_or(0.0);
        s.jitter_ms = jitter(&s.delays_ms).ok();
        s
    }

    pub fn loss_flag(&self) -> bool {
        self.loss_rate > LOSS_NOTICE_THRESHOLD
    }

    pub fn mean_delay_ms(&self) -> Option<f64> {
        mean(&self.delays_ms)
    }

    pub fn p50_delay_ms(&self) -> Option<f64> {
        quantile(&self.delays_ms, 0.5)
    }

    pub fn p95_delay_ms(&self) -> Option<f64> {
        quantile(&self.delays_ms, 0.95)
    }
}

/// `lost / sent`. Duplicates never offset losses.
pub fn loss_rate(stats: &FlowStats) -> Result<f64, MetricsError> {
    if stats.sent == 0 {
        return Err(MetricsError::NothingSent);
    }
    Ok(stats.lost as f64 / stats.sent as f64)
}

/// Total deliveries beyond the first, over all records.
pub fn duplicates<'a>(records: impl IntoIterator<Item = &'a PacketRecord>) -> u64 {
    records.into_iter().map(|r| u64::from(r.dup_count)).sum()
}

/// Longest run of consecutive never-delivered sequence numbers.
pub fn longest_loss_burst<'a>(records: impl IntoIterator<Item = &'a PacketRecord>) -> usize {
    let mut best = 0;
    let mut run = 0;
    let mut prev: Option<u64> = None;
    for r in records {
        if prev.is_some_and(|p| r.seq != p + 1) {
            run = 0;
        }
        prev = Some(r.seq);
        if r.t_rx.is_none() {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best
}

/// Counts rise-and-fall cycles in which a local peak reaches at least `ratio`
/// times the trough before it and is followed by a fall to `peak / ratio`.
/// The series is first smoothed with a centred running median of `window` points.
pub fn sawtooth_cycles(series: &[f64], ratio: f64, window: usize) -> usize {
    let smooth = running_median(series, window.max(1));
    let mut cycles = 0;
    let mut trough = f64::INFINITY;
    let mut peak: Option<f64> = None;
    for &x in &smooth {
        match peak {
            None => {
                trough = trough.min(x);
                if x >= ratio * trough.max(f64::MIN_POSITIVE) {
                    peak = Some(x);
                }
            }
            Some(p) => {
                if x > p {
                    peak = Some(x);
                } else if x * ratio <= p {
                    cycles += 1;
                    peak = None;
                    trough = x;
                }
            }
        }
    }
    cycles
}

fn running_median(xs: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(xs.len());
            quantile(&xs[lo..hi], 0.5).expect("non-empty window")
        })
        .collect()
}

/// Quality bands on the 1-5 opinion scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityBand {
    /// >= 3.5
    Acceptable,
    /// >= 3.0
    CanBeGood,
    /// above 2.0
    Poor,
    /// <= 2.0: players move to another server
    SwitchServer,
}

impl QualityBand {
    pub fn of(mos: f64) -> Self {
        if mos >= 3.5 {
            QualityBand::Acceptable
        } else if mos >= 3.0 {
            QualityBand::CanBeGood
        } else if mos > 2.0 {
            QualityBand::Poor
        } else {
            QualityBand::SwitchServer
        }
    }

    pub fn acceptable(mos: f64) -> bool {
        mos >= 3.5
    }

    pub fn can_be_good(mos: f64) -> bool {
        mos >= 3.0
    }

    pub fn label(&self) -> &'static str {
        match self {
            QualityBand::Acceptable => "acceptable",
            QualityBand::CanBeGood => "can be good",
            QualityBand::Poor => "poor",
            QualityBand::SwitchServer => "switch server",
        }
    }
}

/// Calibration points: (RTT ms, MOS) at 5.5 ms jitter.
pub const MOS_CALIBRATION: [(f64, f64); 3] = [(5.0, 3.73), (20.0, 3.58), (80.0, 3.04)];
pub const MOS_JITTER_REF_MS: f64 = 5.5;

/// Quadratic MOS in effective delay X, exact at the calibration points.
///
/// The fitted parabola opens upwards (vertex near 387 ms), so beyond the last
/// calibration point it is continued along its tangent, which keeps the score
/// non-increasing in delay all the way down to the clamp at 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosModel {
    pub coeff_a: f64,
    pub coeff_b: f64,
    pub coeff_c: f64,
    pub jitter_ref_ms: f64,
    pub jitter_to_delay_ms_per_ms: f64,
    /// Effective delay beyond which the tangent extension applies.
    pub knee_ms: f64,
}

impl Default for MosModel {
    fn default() -> Self {
        calibrate_mos()
    }
}

impl MosModel {
    pub fn quadratic(&self, x: f64) -> f64 {
        self.coeff_a + self.coeff_b * x + self.coeff_c * x * x
    }

    /// Unclamped score at effective delay `x` ms.
    pub fn raw(&self, x: f64) -> f64 {
        if x <= self.knee_ms {
            self.quadratic(x)
        } else {
            let slope = self.coeff_b + 2.0 * self.coeff_c * self.knee_ms;
            self.quadratic(self.knee_ms) + slope * (x - self.knee_ms)
        }
    }

    pub fn effective_delay_ms(&self, rtt_ms: f64, jitter_ms: f64) -> f64 {
        (rtt_ms + self.jitter_to_delay_ms_per_ms * (jitter_ms - self.jitter_ref_ms)).max(0.0)
    }
}

/// Solves the 3x3 Vandermonde system through the calibration points.
pub fn calibrate_mos() -> MosModel {
    let mut m = [[0.0_f64; 4]; 3];
    for (row, (x, y)) in m.iter_mut().zip(MOS_CALIBRATION) {
        *row = [1.0, x, x * x, y];
    }
    let [a, b, c] = solve3(m);
    MosModel {
        coeff_a: a,
        coeff_b: b,
        coeff_c: c,
        jitter_ref_ms: MOS_JITTER_REF_MS,
        jitter_to_delay_ms_per_ms: 1.0,
        knee_ms: MOS_CALIBRATION.iter().map(|p| p.0).fold(f64::MIN, f64::max),
    }
}

/// Gaussian elimination with partial pivoting on an augmented 3x4 matrix.
fn solve3(mut m: [[f64; 4]; 3]) -> [f64; 3] {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .expect("rows");
        m.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            let pivot_row = m[col];
            for (k, v) in m[row].iter_mut().enumerate().skip(col) {
                *v -= f * pivot_row[k];
            }
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| m[row][k] * x[k]).sum();
        x[row] = (m[row][3] - s) / m[row][row];
    }
    x
}

/// Opinion score for a round-trip time and jitter, clamped to [1, 5].
pub fn estimate_mos(rtt_ms: f64, jitter_ms: f64, model: &MosModel) -> f64 {
    model
        .raw(model.effective_delay_ms(rtt_ms, jitter_ms))
        .clamp(1.0, 5.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Two-pass population standard deviation.
    fn two_pass_std(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
    }

    fn rec(seq: u64, tx: u64, rx: Option<u64>, dups: u32) -> PacketRecord {
        PacketRecord {
            flow: FlowId(0),
            seq,
            t_tx: SimTime::from_micros(tx),
            t_rx: rx.map(SimTime::from_micros),
            dup_count: dups,
            serving_ap_at_rx: None,
            drop_cause: None,
        }
    }

    #[test]
    fn jitter_basics() {
        assert_eq!(jitter(&[7.0; 20]).unwrap(), 0.0);
        assert!((jitter(&[10.0, 20.0]).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(jitter(&[]), Err(MetricsError::EmptySeries));
    }

    #[test]
    fn loss_rate_cases() {
        let mut recs: Vec<PacketRecord> = (0..400).map(|s| rec(s, 0, Some(10), 0)).collect();
        for r in recs.iter_mut().take(13) {
            r.t_rx = None;
        }
        let s = FlowStats::from_records(&recs);
        assert!((loss_rate(&s).unwrap() - 0.0325).abs() < 1e-12);

        let all: Vec<PacketRecord> = (0..10).map(|s| rec(s, 0, Some(1), 0)).collect();
        assert_eq!(loss_rate(&FlowStats::from_records(&all)).unwrap(), 0.0);

        let mut mixed: Vec<PacketRecord> = (0..100).map(|s| rec(s, 0, Some(5), 0)).collect();
        for r in mixed.iter_mut().skip(90) {
            r.t_rx = None;
        }
        for r in mixed.iter_mut().take(30) {
            r.dup_count = 1;
        }
        let s = FlowStats::from_records(&mixed);
        assert_eq!((s.received_unique, s.duplicates, s.lost), (90, 30, 10));
        assert!((s.loss_rate - 0.10).abs() < 1e-12);

        let empty = FlowStats::from_records(&[]);
        assert_eq!(loss_rate(&empty), Err(MetricsError::NothingSent));
    }

    #[test]
    fn loss_flag_above_threshold() {
        let mut recs: Vec<PacketRecord> = (0..100).map(|s| rec(s, 0, Some(1), 0)).collect();
        for r in recs.iter_mut().take(36) {
            r.t_rx = None;
        }
        assert!(FlowStats::from_records(&recs).loss_flag());
        recs[0].t_rx = Some(SimTime::from_micros(1));
        assert!(
            !FlowStats::from_records(&recs).loss_flag(),
            "exactly 35% is not flagged"
        );
    }

    #[test]
    fn calibration_matches_divided_differences() {
        // Newton divided differences through the three points, computed independently.
        let [(x0, y0), (x1, y1), (x2, y2)] = MOS_CALIBRATION;
        let d01 = (y1 - y0) / (x1 - x0);
        let d12 = (y2 - y1) / (x2 - x1);
        let c = (d12 - d01) / (x2 - x0);
        let b = d01 - c * (x0 + x1);
        let a = y0 - b * x0 - c * x0 * x0;
        let m = calibrate_mos();
        assert!((m.coeff_c - 1.0 / 75_000.0).abs() < 1e-15);
        assert!((m.coeff_c - c).abs() < 1e-15);
        assert!((m.coeff_b - b).abs() < 1e-12);
        assert!((m.coeff_a - a).abs() < 1e-12);
        assert!((m.coeff_b + 0.010_333_333).abs() < 1e-8);
        assert!((m.coeff_a - 3.781_333_33).abs() < 1e-7);
    }

    #[test]
    fn calibration_rows_reproduced() {
        let m = calibrate_mos();
        for (rtt, mos) in MOS_CALIBRATION {
            assert!((estimate_mos(rtt, 5.5, &m) - mos).abs() < 1e-9, "{rtt}");
        }
    }

    #[test]
    fn huge_delay_clamps_to_one() {
        assert_eq!(estimate_mos(10_000.0, 5.5, &calibrate_mos()), 1.0);
    }

    #[test]
    fn jitter_folds_into_delay() {
        let m = calibrate_mos();
        assert!((estimate_mos(15.0, 10.5, &m) - 3.58).abs() < 1e-9);
        // effective delay floored at zero
        assert_eq!(estimate_mos(0.0, 0.0, &m), estimate_mos(0.0, 5.5, &m));
    }

    #[test]
    fn mos_non_increasing_on_grid() {
        let m = calibrate_mos();
        let mut prev = f64::INFINITY;
        for i in 0..=3000 {
            let v = estimate_mos(i as f64 * 0.1, 5.5, &m);
            assert!(v <= prev + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn quality_bands() {
        assert_eq!(QualityBand::of(3.73), QualityBand::Acceptable);
        assert_eq!(QualityBand::of(3.04), QualityBand::CanBeGood);
        assert_eq!(QualityBand::of(2.0), QualityBand::SwitchServer);
        assert!(!QualityBand::acceptable(3.04) && QualityBand::can_be_good(3.04));
    }

    #[test]
    fn duplicates_sum() {
        let none: Vec<PacketRecord> = (0..5).map(|s| rec(s, 0, Some(1), 0)).collect();
        assert_eq!(duplicates(&none), 0);
        let mut one = none.clone();
        one[2].dup_count = 1;
        assert_eq!(duplicates(&one), 1);
    }

    #[test]
    fn loss_bursts() {
        let recs: Vec<PacketRecord> = [true, false, false, true, false, false, false, true]
            .iter()
            .enumerate()
            .map(|(i, ok)| rec(i as u64, 0, ok.then_some(1), 0))
            .collect();
        assert_eq!(longest_loss_burst(&recs), 3);
    }

    #[test]
    fn recorder_tracks_first_delivery_and_duplicates() {
        let mut r = Recorder::new();
        r.on_send(FlowId(1), 0, SimTime::from_micros(10));
        r.on_drop(FlowId(1), 0, DropCause::QueueTail);
        assert!(!r.on_deliver(FlowId(1), 0, SimTime::from_micros(50), Some(NodeId(2))));
        assert!(r.on_deliver(FlowId(1), 0, SimTime::from_micros(60), Some(NodeId(3))));
        r.on_drop(FlowId(1), 0, DropCause::RandomLoss);
        let p = r.get(FlowId(1), 0).unwrap();
        assert_eq!(p.delay(), Some(SimTime::from_micros(40)));
        assert_eq!(
            (p.dup_count, p.drop_cause, p.serving_ap_at_rx),
            (1, None, Some(NodeId(2)))
        );
    }

    #[test]
    fn sawtooth_counts_clean_teeth() {
        let mut s = vec![];
        for _ in 0..4 {
            s.extend((0..50).map(|i| 10.0 + 4.0 * i as f64));
        }
        s.extend([10.0; 5]);
        assert_eq!(sawtooth_cycles(&s, 3.0, 5), 4);
        assert_eq!(sawtooth_cycles(&[5.0; 100], 3.0, 5), 0);
    }

    #[test]
    fn quantiles() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&xs, 0.5), Some(3.0));
        assert_eq!(quantile(&xs, 0.95), Some(4.8));
        assert_eq!(quantile(&[], 0.5), None);
    }

    proptest! {
        #[test]
        fn jitter_matches_two_pass(xs in prop::collection::vec(0.0f64..500.0, 1..300)) {
            let a = jitter(&xs).unwrap();
            let b = two_pass_std(&xs);
            prop_assert!((a - b).abs() <= 1e-9 * b.max(1e-6));
        }

        #[test]
        fn accounting_closes(flags in prop::collection::vec((any::<bool>(), 0u32..3), 1..200)) {
            let recs: Vec<PacketRecord> = flags.iter().enumerate()
                .map(|(i, (ok, d))| rec(i as u64, 0, ok.then_some(3), if *ok { *d } else { 0 }))
                .collect();
            let s = FlowStats::from_records(&recs);
            prop_assert_eq!(s.sent, s.received_unique + s.lost);
        }
    }
}
