//! Browser bindings. Every export returns a JSON string so the page can stay
//! plain JavaScript.

use serde::Serialize;
use wasm_bindgen::prelude::*;
use wlansim::lvap::HandoffOrdering;
use wlansim::metrics::{estimate_mos, MosModel};
use wlansim::report::{self, RunReport};
use wlansim::scenario::{ScenarioConfig, EXP1_TOML, EXP2_TOML};

#[derive(Serialize)]
struct DelayTrace {
    /// (packet number, delay ms) of delivered downlink game packets.
    delivered: Vec<(u64, f64)>,
    /// Packet numbers that never arrived.
    lost: Vec<u64>,
    handoffs_s: Vec<f64>,
    summary: String,
    sawtooth_cycles: usize,
}

#[derive(Serialize)]
struct CwndTrace {
    points: Vec<(f64, f64)>,
    reductions_s: Vec<f64>,
    median_peak_trough: Option<f64>,
}

#[derive(Serialize)]
struct MosCurve {
    points: Vec<(f64, f64)>,
    table: Vec<report::Table1Row>,
}

fn scenario(
    name: &str,
    seed: u64,
    ordering: &str,
    window_ms: f64,
) -> Result<ScenarioConfig, String> {
    let src = match name {
        "exp1" => EXP1_TOML,
        "exp2" => EXP2_TOML,
        other => return Err(format!("unknown scenario `{other}`")),
    };
    let mut cfg = ScenarioConfig::from_toml_str(src).map_err(|e| e.to_string())?;
    cfg.master_seed = seed;
    cfg.handoff.ordering = match ordering {
        "add_first" => HandoffOrdering::AddFirst {
            overlap_ms: window_ms,
        },
        "remove_first" => HandoffOrdering::RemoveFirst { gap_ms: window_ms },
        other => return Err(format!("unknown ordering `{other}`")),
    };
    Ok(cfg)
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(|e| JsValue::from_str(&e.to_string()))
}

/// Runs `exp1` or `exp2` and returns the downlink game delay trace.
#[wasm_bindgen]
pub fn simulate(name: &str, seed: u64, ordering: &str, window_ms: f64) -> Result<String, JsValue> {
    let cfg = scenario(name, seed, ordering, window_ms).map_err(|e| JsValue::from_str(&e))?;
    let out = wlansim::simulate(cfg).map_err(|e| JsValue::from_str(&e.to_string()))?;
    let game = out
        .flows
        .iter()
        .find(|f| f.name == "game/dl")
        .ok_or_else(|| JsValue::from_str("scenario has no game flow"))?;
    let mut trace = DelayTrace {
        delivered: Vec::new(),
        lost: Vec::new(),
        handoffs_s: out.handoffs.iter().map(|h| h.t.as_secs_f64()).collect(),
        summary: RunReport::from_output(&out).brief(),
        sawtooth_cycles: report::game_sawtooth_cycles(&out),
    };
    for r in out.records.flow(game.id) {
        match r.delay() {
            Some(d) => trace.delivered.push((r.seq, d.as_millis_f64())),
            None => trace.lost.push(r.seq),
        }
    }
    to_json(&trace)
}

/// Opinion score against round-trip time at a fixed jitter, plus the three table rows.
#[wasm_bindgen]
pub fn mos_curve(jitter_ms: f64) -> Result<String, JsValue> {
    if jitter_ms.is_nan() || jitter_ms < 0.0 {
        return Err(JsValue::from_str("jitter must be >= 0"));
    }
    let model = MosModel::default();
    let points = (0..=300)
        .map(|rtt| {
            (
                f64::from(rtt),
                estimate_mos(f64::from(rtt), jitter_ms, &model),
            )
        })
        .collect();
    to_json(&MosCurve {
        points,
        table: report::table1(jitter_ms, &model),
    })
}

/// Congestion window of the bulk download in `exp2`.
#[wasm_bindgen]
pub fn cwnd_trace(seed: u64) -> Result<String, JsValue> {
    let cfg = scenario("exp2", seed, "add_first", 10.0).map_err(|e| JsValue::from_str(&e))?;
    let out = wlansim::simulate(cfg).map_err(|e| JsValue::from_str(&e.to_string()))?;
    let tcp = out
        .tcp
        .get("ftp")
        .ok_or_else(|| JsValue::from_str("no tcp flow"))?;
    let ratios = report::cwnd_cycle_ratios(tcp.reductions());
    to_json(&CwndTrace {
        points: tcp
            .cwnd_trace()
            .iter()
            .map(|(t, w)| (t.as_secs_f64(), *w))
            .collect(),
        reductions_s: tcp.reductions().iter().map(|r| r.t.as_secs_f64()).collect(),
        median_peak_trough: wlansim::metrics::quantile(&ratios, 0.5),
    })
}
