use proptest::prelude::*;
use wlansim::lvap::replay_threshold_policy;
use wlansim::SimTime;

/// Two-AP RSSI trace sampled every 100 ms, as a bounded random walk.
fn trace() -> impl Strategy<Value = Vec<(SimTime, Vec<f64>)>> {
    prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 10..300).prop_map(|steps| {
        let (mut a, mut b) = (-60.0, -62.0);
        steps
            .into_iter()
            .enumerate()
            .map(|(k, (da, db))| {
                a = f64::clamp(a + da, -95.0, -30.0);
                b = f64::clamp(b + db, -95.0, -30.0);
                (SimTime::from_millis(100 * k as u64), vec![a, b])
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn more_hysteresis_never_adds_handoffs(
        tr in trace(),
        h in 0.0f64..8.0,
        extra in 0.0f64..8.0,
        dwell_ticks in 0u64..6,
    ) {
        let dwell = SimTime::from_millis(100 * dwell_ticks);
        let narrow = replay_threshold_policy(&tr, 0, h, dwell, SimTime::ZERO);
        let wide = replay_threshold_policy(&tr, 0, h + extra, dwell, SimTime::ZERO);
        prop_assert!(wide <= narrow, "h {h} -> {narrow}, h {} -> {wide}", h + extra);
    }
}

#[test]
fn huge_hysteresis_pins_the_owner() {
    let tr: Vec<_> = (0..100)
        .map(|k| (SimTime::from_millis(100 * k), vec![-80.0, -40.0]))
        .collect();
    assert_eq!(
        replay_threshold_policy(&tr, 0, 100.0, SimTime::ZERO, SimTime::ZERO),
        0
    );
    assert_eq!(
        replay_threshold_policy(&tr, 0, 3.0, SimTime::ZERO, SimTime::ZERO),
        1
    );
}
