//! Scenario files (TOML), `key=value` overrides and validation.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lvap::{HandoffOrdering, HandoffPolicy};
use crate::radio::{MediumParams, PathLossParams, Position};
use crate::traffic::{GameFlowParams, TcpParams};

/// Canned scenario reproducing the handoff-only game experiment.
pub const EXP1_TOML: &str = include_str!("../../../configs/exp1.toml");
/// Canned scenario adding a saturating bulk download next to the game client.
pub const EXP2_TOML: &str = include_str!("../../../configs/exp2.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("bad override `{0}`: {1}")]
    Override(String, String),
    #[error("invalid scenario:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub duration_s: f64,
    #[serde(default)]
    pub master_seed: u64,
    /// Time after `duration_s` during which in-flight frames may still be
    /// delivered; sources and policies are stopped.
    #[serde(default = "default_drain_s")]
    pub drain_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default = "default_capacity")]
    pub queue_capacity_frames: usize,
    #[serde(default)]
    pub medium: MediumParams,
    #[serde(default)]
    pub channel: PathLossParams,
    pub aps: Vec<ApConfig>,
    pub stations: Vec<StationConfig>,
    #[serde(default)]
    pub flows: Vec<FlowConfig>,
    #[serde(default)]
    pub handoff: HandoffConfig,
}

fn default_name() -> String {
    "scenario".into()
}

fn default_drain_s() -> f64 {
    2.0
}

fn default_capacity() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApConfig {
    pub id: String,
    pub position: Position,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_capacity_frames: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub medium: Option<MediumOverrides>,
}

/// Per-AP replacements for fields of the scenario-wide [`MediumParams`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phy_rate_mbps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_frame_overhead_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contention_mean_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contention_cap_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_loss: Option<f64>,
}

impl MediumOverrides {
    pub fn apply(&self, base: &MediumParams) -> MediumParams {
        MediumParams {
            phy_rate_mbps: self.phy_rate_mbps.unwrap_or(base.phy_rate_mbps),
            per_frame_overhead_us: self
                .per_frame_overhead_us
                .unwrap_or(base.per_frame_overhead_us),
            contention_mean_us: self.contention_mean_us.unwrap_or(base.contention_mean_us),
            contention_cap_us: self.contention_cap_us.unwrap_or(base.contention_cap_us),
            p_loss: self.p_loss.unwrap_or(base.p_loss),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t_s: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationConfig {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<Position>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<Waypoint>>,
    /// AP hosting the station's LVAP at start; strongest mean RSSI when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_ap: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowConfig {
    Game {
        id: String,
        station: String,
        #[serde(default = "default_wired_ms")]
        wired_latency_ms: f64,
        #[serde(default)]
        params: GameFlowParams,
    },
    /// Unbounded bulk download towards the station.
    Tcp {
        id: String,
        station: String,
        #[serde(default = "default_wired_ms")]
        wired_latency_ms: f64,
        #[serde(default)]
        params: TcpParams,
    },
}

fn default_wired_ms() -> f64 {
    1.0
}

impl FlowConfig {
    pub fn id(&self) -> &str {
        match self {
            FlowConfig::Game { id, .. } | FlowConfig::Tcp { id, .. } => id,
        }
    }

    pub fn station(&self) -> &str {
        match self {
            FlowConfig::Game { station, .. } | FlowConfig::Tcp { station, .. } => station,
        }
    }

    pub fn wired_latency_ms(&self) -> f64 {
        match self {
            FlowConfig::Game {
                wired_latency_ms, ..
            }
            | FlowConfig::Tcp {
                wired_latency_ms, ..
            } => *wired_latency_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandoffConfig {
    #[serde(default)]
    pub policy: HandoffPolicy,
    #[serde(default)]
    pub ordering: HandoffOrdering,
    #[serde(default = "default_control_latency")]
    pub control_latency_ms: f64,
    #[serde(default = "default_sample_period")]
    pub sample_period_ms: f64,
    #[serde(default = "default_publish_threshold")]
    pub publish_threshold_dbm: f64,
    /// Stations the policy may move; all stations when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients: Option<Vec<String>>,
}

fn default_control_latency() -> f64 {
    5.0
}

fn default_sample_period() -> f64 {
    100.0
}

fn default_publish_threshold() -> f64 {
    -90.0
}

impl Default for HandoffConfig {
    fn default() -> Self {
        Self {
            policy: HandoffPolicy::default(),
            ordering: HandoffOrdering::default(),
            control_latency_ms: default_control_latency(),
            sample_period_ms: default_sample_period(),
            publish_threshold_dbm: default_publish_threshold(),
            clients: None,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(src: &str) -> Result<Self, ConfigError> {
        toml::from_str(src).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Parses `src`, applies `key=value` overrides, then validates.
    pub fn from_toml_with_overrides(src: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let table: toml::Table =
            toml::from_str(src).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut doc = toml::Value::Table(table);
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let cfg: ScenarioConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_with_overrides(&src, overrides)
    }

    pub fn exp1() -> Self {
        Self::from_toml_with_overrides(EXP1_TOML, &[]).expect("shipped exp1 config is valid")
    }

    pub fn exp2() -> Self {
        Self::from_toml_with_overrides(EXP2_TOML, &[]).expect("shipped exp2 config is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Checks every constraint and reports all violations at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            errs.push(format!("duration_s must be > 0 (got {})", self.duration_s));
        }
        if !(self.drain_s >= 0.0) {
            errs.push("drain_s must be >= 0".into());
        }
        if self.aps.is_empty() {
            errs.push("at least one AP is required".into());
        }
        if let Err(e) = self.medium.validate() {
            errs.push(format!("medium: {e}"));
        }
        if let Err(e) = self.channel.validate() {
            errs.push(e.to_string());
        }
        let mut ap_ids = BTreeSet::new();
        for ap in &self.aps {
            if !ap_ids.insert(ap.id.as_str()) {
                errs.push(format!("duplicate AP id `{}`", ap.id));
            }
            if !(ap.position.x.is_finite() && ap.position.y.is_finite()) {
                errs.push(format!("AP `{}` position must be finite", ap.id));
            }
            if let Some(ov) = &ap.medium {
                if let Err(e) = ov.apply(&self.medium).validate() {
                    errs.push(format!("AP `{}` medium: {e}", ap.id));
                }
            }
        }
        let mut sta_ids = BTreeSet::new();
        for sta in &self.stations {
            if !sta_ids.insert(sta.id.as_str()) || ap_ids.contains(sta.id.as_str()) {
                errs.push(format!("duplicate node id `{}`", sta.id));
            }
            match (&sta.position, &sta.trajectory) {
                (Some(_), Some(_)) => errs.push(format!(
                    "station `{}`: give position or trajectory, not both",
                    sta.id
                )),
                (None, None) => errs.push(format!(
                    "station `{}`: position or trajectory required",
                    sta.id
                )),
                (None, Some(wps)) => {
                    if wps.is_empty() {
                        errs.push(format!("station `{}`: empty trajectory", sta.id));
                    }
                    if wps.windows(2).any(|w| w[0].t_s >= w[1].t_s) {
                        errs.push(format!(
                            "station `{}`: waypoint times must strictly increase",
                            sta.id
                        ));
                    }
                    if wps
                        .iter()
                        .any(|w| !(w.t_s >= 0.0 && w.x.is_finite() && w.y.is_finite()))
                    {
                        errs.push(format!(
                            "station `{}`: waypoints must be finite with t_s >= 0",
                            sta.id
                        ));
                    }
                }
                (Some(p), None) => {
                    if !(p.x.is_finite() && p.y.is_finite()) {
                        errs.push(format!("station `{}` position must be finite", sta.id));
                    }
                }
            }
            if let Some(ap) = &sta.initial_ap {
                if !ap_ids.contains(ap.as_str()) {
                    errs.push(format!(
                        "station `{}`: initial_ap `{ap}` does not exist",
                        sta.id
                    ));
                }
            }
        }
        let mut flow_ids = BTreeSet::new();
        for flow in &self.flows {
            if !flow_ids.insert(flow.id()) {
                errs.push(format!("duplicate flow id `{}`", flow.id()));
            }
            if !sta_ids.contains(flow.station()) {
                errs.push(format!(
                    "flow `{}`: station `{}` does not exist",
                    flow.id(),
                    flow.station()
                ));
            }
            if !(flow.wired_latency_ms() >= 0.0) {
                errs.push(format!(
                    "flow `{}`: wired_latency_ms must be >= 0",
                    flow.id()
                ));
            }
            let r = match flow {
                FlowConfig::Game { params, .. } => params.validate(),
                FlowConfig::Tcp { params, .. } => params.validate(),
            };
            if let Err(e) = r {
                errs.push(format!("flow `{}`: {e}", flow.id()));
            }
        }
        if let Err(e) = self.handoff.policy.validate() {
            errs.push(e);
        }
        if let Err(e) = self.handoff.ordering.validate() {
            errs.push(e);
        }
        if !(self.handoff.control_latency_ms >= 0.0) {
            errs.push("handoff.control_latency_ms must be >= 0".into());
        }
        if !(self.handoff.sample_period_ms > 0.0) {
            errs.push("handoff.sample_period_ms must be > 0".into());
        }
        if let Some(clients) = &self.handoff.clients {
            for c in clients {
                if !sta_ids.contains(c.as_str()) {
                    errs.push(format!("handoff.clients: station `{c}` does not exist"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}

/// Sets a dotted path (`handoff.ordering.overlap_ms`, `aps.0.position.x`) to a
/// TOML literal; values that do not parse as TOML are taken as strings.
pub fn apply_override(doc: &mut toml::Value, assignment: &str) -> Result<(), ConfigError> {
    let err = |m: &str| ConfigError::Override(assignment.to_owned(), m.to_owned());
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| err("expected key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(err("empty key"));
    }
    let value = parse_literal(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = doc;
    for p in path {
        cur = match cur {
            toml::Value::Table(t) => t
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
            toml::Value::Array(a) => {
                let i: usize = p
                    .parse()
                    .map_err(|_| err("array segment must be an index"))?;
                a.get_mut(i)
                    .ok_or_else(|| err("array index out of range"))?
            }
            _ => return Err(err("path runs through a scalar")),
        };
    }
    match cur {
        toml::Value::Table(t) => {
            t.insert(last.to_string(), value);
        }
        toml::Value::Array(a) => {
            let i: usize = last
                .parse()
                .map_err(|_| err("array segment must be an index"))?;
            *a.get_mut(i)
                .ok_or_else(|| err("array index out of range"))? = value;
        }
        _ => return Err(err("path runs through a scalar")),
    }
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}
