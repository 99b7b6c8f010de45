//! The shared medium against a brute-force single-server replay.

use proptest::prelude::*;
use wlansim::radio::{Direction, FlowId, Frame, Medium, MediumParams, NodeId, Payload, TxQueue};
use wlansim::{RngStream, SimTime};

fn frame(queue: usize, seq: u64, size: u32) -> Frame {
    Frame {
        flow: FlowId(queue as u32),
        seq,
        attempt: 0,
        size_bytes: size,
        direction: Direction::Downlink,
        src: NodeId(queue as u32),
        dst: NodeId(99),
        client: NodeId(99),
        created_at: SimTime::ZERO,
        enqueued_at: SimTime::ZERO,
        payload: Payload::Game,
    }
}

struct Served {
    queue: usize,
    seq: u64,
    start: u64,
    end: u64,
}

/// Drives a medium through `arrivals` (time, queue, size) and returns the
/// service log plus the idle-with-backlog violations seen.
fn drive(n_queues: usize, arrivals: &[(u64, usize, u32)], seed: u64) -> (Vec<Served>, Vec<u64>) {
    let mut medium = Medium::new();
    let params = MediumParams::default();
    for q in 0..n_queues {
        medium.attach(NodeId(q as u32), TxQueue::new(usize::MAX), params.clone());
    }
    let mut contention = RngStream::new(seed, "contention");
    let mut loss = RngStream::new(seed, "loss");
    let mut log = Vec::new();
    let mut idle_violations = Vec::new();
    let mut next = 0;
    let mut seqs = vec![0u64; n_queues];
    let mut end: Option<SimTime> = None;
    loop {
        let t_arr = arrivals.get(next).map(|a| a.0);
        let now = match (end, t_arr) {
            (None, None) => break,
            (Some(e), Some(a)) if a < e.as_micros() => SimTime::from_micros(a),
            (Some(e), _) => e,
            (None, Some(a)) => SimTime::from_micros(a),
        };
        if end == Some(now) {
            let tx = medium.finish(&mut loss).unwrap();
            log.push(Served {
                queue: tx.queue.0,
                seq: tx.frame.seq,
                start: tx.started_at.as_micros(),
                end: tx.ends_at.as_micros(),
            });
            end = None;
        } else {
            let (_, q, size) = arrivals[next];
            next += 1;
            let id = medium.queue_ids().nth(q).unwrap();
            medium.queue_mut(id).enqueue(frame(q, seqs[q], size), now);
            seqs[q] += 1;
        }
        if end.is_none() {
            end = medium.try_start(now, &mut contention);
        }
        if !medium.is_busy() && medium.backlog() > 0 {
            idle_violations.push(now.as_micros());
        }
    }
    (log, idle_violations)
}

/// Single FIFO server fed by the merged arrival stream, with the k-th service
/// taking the k-th observed duration.
fn replay(arrivals: &[(u64, usize, u32)], durations: &[u64]) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut free_at = 0u64;
    for (k, d) in durations.iter().enumerate() {
        let start = free_at.max(arrivals[k].0);
        free_at = start + d;
        out.push((start, free_at));
    }
    out
}

fn workload() -> impl Strategy<Value = (usize, Vec<(u64, usize, u32)>, u64)> {
    (1usize..6).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec((0u64..200_000, 0..n, 40u32..1500), 1..120),
            any::<u64>(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn work_conserving_against_single_queue_replay((n, mut arrivals, seed) in workload()) {
        arrivals.sort_by_key(|a| a.0);
        let (log, idle) = drive(n, &arrivals, seed);
        prop_assert!(idle.is_empty(), "medium idle with backlog at {idle:?}");
        prop_assert_eq!(log.len(), arrivals.len());
        let durations: Vec<u64> = log.iter().map(|s| s.end - s.start).collect();
        let oracle = replay(&arrivals, &durations);
        for (s, (start, end)) in log.iter().zip(&oracle) {
            prop_assert_eq!((s.start, s.end), (*start, *end));
        }
    }

    #[test]
    fn per_queue_fifo((n, mut arrivals, seed) in workload()) {
        arrivals.sort_by_key(|a| a.0);
        let (log, _) = drive(n, &arrivals, seed);
        let mut last = vec![None::<u64>; n];
        for s in &log {
            if let Some(prev) = last[s.queue] {
                prop_assert!(s.seq > prev);
            }
            last[s.queue] = Some(s.seq);
        }
    }
}
