//! Discrete-event engine: integer microsecond clock, a (time, insertion)
//! ordered event queue and labelled random streams.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulation time (or a span of it) in whole microseconds.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    /// Rounds to the nearest microsecond; negative and NaN inputs map to zero.
    pub fn from_millis_f64(ms: f64) -> Self {
        Self::from_micros_f64(ms * 1e3)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        Self::from_micros_f64(s * 1e6)
    }

    pub fn from_micros_f64(us: f64) -> Self {
        if us.is_nan() || us <= 0.0 {
            SimTime(0)
        } else {
            SimTime(us.round() as u64)
        }
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("cannot schedule at {at}: clock is already at {now}")]
    InPast { at: SimTime, now: SimTime },
    #[error("run_until({target}) is behind the clock ({now})")]
    RunBackwards { target: SimTime, now: SimTime },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

/// Handle returned by [`Scheduler::schedule`]; equal to the event's insertion sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ticket(pub u64);

/// A scheduled action together with its firing time and tie-break sequence.
#[derive(Debug, Clone)]
pub struct Event<E> {
    pub fire_at: SimTime,
    pub insert_seq: u64,
    pub action: E,
}

impl<E> PartialEq for Event<E> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.insert_seq == other.insert_seq
    }
}

impl<E> Eq for Event<E> {}

impl<E> PartialOrd for Event<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Event<E> {
    // Reversed so the max-heap pops the earliest (fire_at, insert_seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_at, other.insert_seq).cmp(&(self.fire_at, self.insert_seq))
    }
}

/// Clock plus pending-event queue. Events at equal times fire in insertion order.
#[derive(Debug)]
pub struct Scheduler<E> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Event<E>>,
    fired: u64,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Self {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            fired: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Number of events popped so far.
    pub fn fired(&self) -> u64 {
        self.fired
    }

    pub fn schedule(&mut self, fire_at: SimTime, action: E) -> Result<Ticket, SimError> {
        if fire_at < self.now {
            return Err(SimError::InPast {
                at: fire_at,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Event {
            fire_at,
            insert_seq: seq,
            action,
        });
        Ok(Ticket(seq))
    }

    /// Schedules `delay` after the current clock. Never fails.
    pub fn schedule_in(&mut self, delay: SimTime, action: E) -> Ticket {
        let at = self.now + delay;
        self.schedule(at, action).expect("future event")
    }

    /// Pops the next event with `fire_at <= limit`, advancing the clock to it.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<Event<E>> {
        if self.queue.peek()?.fire_at > limit {
            return None;
        }
        let ev = self.queue.pop()?;
        self.now = ev.fire_at;
        self.fired += 1;
        Some(ev)
    }

    /// Processes every event due at or before `t_end` through `handler`, which may
    /// schedule further events. Leaves the clock at `t_end`.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> Result<SimTime, SimError>
    where
        F: FnMut(&mut Self, Event<E>),
    {
        if t_end < self.now {
            return Err(SimError::RunBackwards {
                target: t_end,
                now: self.now,
            });
        }
        while let Some(ev) = self.pop_until(t_end) {
            handler(self, ev);
        }
        self.now = t_end;
        Ok(self.now)
    }
}

/// Distribution descriptor for [`RngStream::draw`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dist {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    Exponential { mean: f64 },
    Normal { mean: f64, sigma: f64 },
    Bernoulli { p: f64 },
}

impl Dist {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidDistribution(m));
        match *self {
            Dist::Constant { value } if !value.is_finite() => {
                bad(format!("constant {value} is not finite"))
            }
            Dist::Uniform { low, high }
                if !(low.is_finite() && high.is_finite() && low <= high) =>
            {
                bad(format!("uniform bounds [{low}, {high}]"))
            }
            Dist::Exponential { mean } if !(mean.is_finite() && mean >= 0.0) => {
                bad(format!("exponential mean {mean} must be >= 0"))
            }
            Dist::Normal { mean, sigma }
                if !(mean.is_finite() && sigma.is_finite() && sigma >= 0.0) =>
            {
                bad(format!("normal(mean {mean}, sigma {sigma})"))
            }
            Dist::Bernoulli { p } if !(0.0..=1.0).contains(&p) => {
                bad(format!("bernoulli p {p} outside [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// Mean of the distribution; bernoulli maps to `p`.
    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Constant { value } => value,
            Dist::Uniform { low, high } => 0.5 * (low + high),
            Dist::Exponential { mean } | Dist::Normal { mean, .. } => mean,
            Dist::Bernoulli { p } => p,
        }
    }
}

/// 64-bit FNV-1a; stable across platforms and compiler versions.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A reproducible random stream identified by `(master_seed, label)`.
///
/// Streams with different labels are seeded independently, so adding a new
/// consumer never shifts the draws seen by existing ones.
#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    label: String,
    draws: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, label: &str) -> Self {
        let seed = splitmix64(master_seed ^ splitmix64(fnv1a(label.as_bytes())));
        Self {
            master_seed,
            label: label.to_owned(),
            draws: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of draws taken from this stream.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Uniform sample in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.draws += 1;
        self.rng.random::<f64>()
    }

    /// Draws a real number. Bernoulli yields 1.0 or 0.0.
    pub fn draw(&mut self, dist: &Dist) -> Result<f64, SimError> {
        dist.validate()?;
        Ok(self.draw_unchecked(dist))
    }

    /// Draws without validating; callers must have validated `dist` up front.
    pub fn draw_unchecked(&mut self, dist: &Dist) -> f64 {
        match *dist {
            Dist::Constant { value } => value,
            Dist::Uniform { low, high } => {
                let u = self.unit();
                low + (high - low) * u
            }
            Dist::Exponential { mean } => {
                if mean == 0.0 {
                    return 0.0;
                }
                self.draws += 1;
                Exp::new(1.0 / mean)
                    .expect("validated rate")
                    .sample(&mut self.rng)
            }
            Dist::Normal { mean, sigma } => {
                if sigma == 0.0 {
                    return mean;
                }
                self.draws += 1;
                Normal::new(mean, sigma)
                    .expect("validated sigma")
                    .sample(&mut self.rng)
            }
            Dist::Bernoulli { p } => {
                if self.bernoulli(p) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Bernoulli trial; `p <= 0` is always false and consumes no draw.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            return false;
        }
        self.unit() < p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn drain(s: &mut Scheduler<&'static str>, until: SimTime) -> Vec<(u64, &'static str)> {
        let mut out = vec![];
        s.run_until(until, |_, ev| out.push((ev.fire_at.as_micros(), ev.action)))
            .unwrap();
        out
    }

    #[test]
    fn equal_times_fire_in_insertion_order() {
        let mut s = Scheduler::new();
        s.schedule(SimTime::from_micros(100), "A").unwrap();
        s.schedule(SimTime::from_micros(100), "B").unwrap();
        assert_eq!(
            drain(&mut s, SimTime::from_micros(1_000)),
            vec![(100, "A"), (100, "B")]
        );
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut s: Scheduler<()> = Scheduler::new();
        s.run_until(SimTime::from_micros(100), |_, _| {}).unwrap();
        let err = s.schedule(SimTime::from_micros(50), ()).unwrap_err();
        assert_eq!(
            err,
            SimError::InPast {
                at: SimTime::from_micros(50),
                now: SimTime::from_micros(100)
            }
        );
    }

    #[test]
    fn later_insert_with_earlier_time_fires_first() {
        let mut s = Scheduler::new();
        s.schedule(SimTime::from_micros(200), "late").unwrap();
        s.schedule(SimTime::from_micros(100), "early").unwrap();
        assert_eq!(
            drain(&mut s, SimTime::from_secs(1)),
            vec![(100, "early"), (200, "late")]
        );
    }

    #[test]
    fn empty_run_advances_clock() {
        let mut s: Scheduler<()> = Scheduler::new();
        let end = s
            .run_until(SimTime::from_secs(24), |_, _| panic!("no events"))
            .unwrap();
        assert_eq!(end, SimTime::from_secs(24));
        assert_eq!(s.fired(), 0);
        assert!(s.run_until(SimTime::from_secs(1), |_, _| {}).is_err());
    }

    #[test]
    fn single_event_fires_once() {
        let mut s = Scheduler::new();
        s.schedule(SimTime::from_secs(3), "x").unwrap();
        assert_eq!(
            drain(&mut s, SimTime::from_secs(24)),
            vec![(3_000_000, "x")]
        );
    }

    #[test]
    fn periodic_three_second_ticks_fire_eight_times_in_24s() {
        let mut s = Scheduler::new();
        let period = SimTime::from_secs(3);
        s.schedule(period, ()).unwrap();
        let mut times = vec![];
        s.run_until(SimTime::from_secs(24), |s, ev| {
            times.push(ev.fire_at.as_secs_f64());
            s.schedule_in(period, ());
        })
        .unwrap();
        assert_eq!(times, vec![3.0, 6.0, 9.0, 12.0, 15.0, 18.0, 21.0, 24.0]);
    }

    #[test]
    fn degenerate_distributions() {
        let mut r = RngStream::new(1, "x");
        for _ in 0..100 {
            assert_eq!(r.draw(&Dist::Constant { value: 5.0 }).unwrap(), 5.0);
            assert_eq!(r.draw(&Dist::Bernoulli { p: 0.0 }).unwrap(), 0.0);
            assert_eq!(r.draw(&Dist::Bernoulli { p: 1.0 }).unwrap(), 1.0);
        }
    }

    #[test]
    fn invalid_parameters_are_errors() {
        let mut r = RngStream::new(1, "x");
        assert!(r.draw(&Dist::Exponential { mean: -1.0 }).is_err());
        assert!(r
            .draw(&Dist::Normal {
                mean: 0.0,
                sigma: -2.0
            })
            .is_err());
        assert!(r.draw(&Dist::Bernoulli { p: 1.5 }).is_err());
        assert!(r
            .draw(&Dist::Uniform {
                low: 3.0,
                high: 1.0
            })
            .is_err());
    }

    #[test]
    fn same_seed_and_label_reproduce() {
        let dists = [
            Dist::Uniform {
                low: -1.0,
                high: 4.0,
            },
            Dist::Exponential { mean: 3.0 },
            Dist::Normal {
                mean: 0.0,
                sigma: 2.0,
            },
            Dist::Bernoulli { p: 0.3 },
        ];
        let mut a = RngStream::new(42, "channel");
        let mut b = RngStream::new(42, "channel");
        for i in 0..1000 {
            let d = &dists[i % dists.len()];
            assert_eq!(a.draw(d).unwrap().to_bits(), b.draw(d).unwrap().to_bits());
        }
        let mut c = RngStream::new(42, "game-src");
        let mut a = RngStream::new(42, "channel");
        let same = (0..100).filter(|_| a.unit() == c.unit()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn exponential_mean_is_close() {
        let mut r = RngStream::new(9, "exp");
        let n = 200_000;
        let m: f64 = (0..n)
            .map(|_| r.draw(&Dist::Exponential { mean: 3.0 }).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((m - 3.0).abs() < 0.05, "{m}");
    }

    proptest! {
        #[test]
        fn pops_follow_time_then_insertion_order(times in prop::collection::vec(0u64..50, 1..200)) {
            let mut s = Scheduler::new();
            for (i, t) in times.iter().enumerate() {
                s.schedule(SimTime::from_micros(*t), i).unwrap();
            }
            let mut got = vec![];
            s.run_until(SimTime::from_micros(100), |_, ev| got.push((ev.fire_at.as_micros(), ev.action))).unwrap();
            let mut oracle: Vec<(u64, usize)> = times.iter().copied().enumerate().map(|(i, t)| (t, i)).collect();
            oracle.sort();
            prop_assert_eq!(got, oracle);
        }
    }
}
