//! Post-run summaries and the three per-run output files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::metrics::{estimate_mos, longest_loss_burst, FlowStats, MosModel, QualityBand};
use crate::network::{FlowKind, RunOutput};
use crate::radio::Direction;
use crate::scenario::ScenarioConfig;
use crate::traffic::Reduction;

pub const TRACE_HEADER: &str =
    "flow_id,seq,t_tx_us,t_rx_us,delay_us,dup_count,serving_ap,drop_cause";
pub const HANDOFF_HEADER: &str =
    "t_us,client,src_ap,dst_ap,ordering,duplicates,gap_losses,flushed_frames,completed_us";

/// Server placements used for opinion scores, as extra round-trip time on
/// top of the measured access delay: same LAN, same region, other region.
pub const SERVER_OFFSETS_MS: [(&str, f64); 3] = [("lan", 0.0), ("intra", 15.0), ("inter", 75.0)];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowReport {
    pub sent: u64,
    pub received: u64,
    pub duplicates: u64,
    pub lost: u64,
    pub loss_rate: f64,
    pub loss_flag: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_delay_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p50_delay_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p95_delay_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mos_lan: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mos_intra: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mos_inter: Option<f64>,
    pub longest_loss_burst: u64,
}

impl FlowReport {
    fn build(stats: &FlowStats, burst: usize, game: bool, model: &MosModel) -> Self {
        let mos = |offset: f64| match (game, stats.mean_delay_ms(), stats.jitter_ms) {
            (true, Some(d), Some(j)) => Some(round6(estimate_mos(d + offset, j, model))),
            _ => None,
        };
        FlowReport {
            sent: stats.sent,
            received: stats.received_unique,
            duplicates: stats.duplicates,
            lost: stats.lost,
            loss_rate: round6(stats.loss_rate),
            loss_flag: stats.loss_flag(),
            mean_delay_ms: stats.mean_delay_ms().map(round6),
            jitter_ms: stats.jitter_ms.map(round6),
            p50_delay_ms: stats.p50_delay_ms().map(round6),
            p95_delay_ms: stats.p95_delay_ms().map(round6),
            mos_lan: mos(SERVER_OFFSETS_MS[0].1),
            mos_intra: mos(SERVER_OFFSETS_MS[1].1),
            mos_inter: mos(SERVER_OFFSETS_MS[2].1),
            longest_loss_burst: burst as u64,
        }
    }

    pub fn mos(&self) -> [Option<f64>; 3] {
        [self.mos_lan, self.mos_intra, self.mos_inter]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HandoffSummary {
    pub count: u64,
    pub completed: u64,
    pub duplicates: u64,
    pub gap_losses: u64,
    pub flushed_frames: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientSummary {
    pub bssid: String,
    pub bssid_changes: u64,
    pub reassociations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TcpSummary {
    pub segments: u64,
    pub acked: u64,
    pub retransmissions: u64,
    pub reductions: u64,
    pub final_cwnd: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_peak_trough_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub events: u64,
    pub event_digest: String,
    pub accounting_ok: bool,
    pub violations: Vec<String>,
    pub handoffs: HandoffSummary,
    pub clients: BTreeMap<String, ClientSummary>,
    pub flows: BTreeMap<String, FlowReport>,
    pub tcp: BTreeMap<String, TcpSummary>,
    pub config: ScenarioConfig,
}

impl RunReport {
    pub fn from_output(out: &RunOutput) -> Self {
        let model = MosModel::default();
        let mut flows = BTreeMap::new();
        for info in &out.flows {
            let stats = FlowStats::from_records(out.records.flow(info.id));
            let burst = longest_loss_burst(out.records.flow(info.id));
            let game = info.kind == FlowKind::Game && info.direction == Direction::Downlink;
            flows.insert(
                info.name.clone(),
                FlowReport::build(&stats, burst, game, &model),
            );
        }
        let handoffs = HandoffSummary {
            count: out.handoffs.len() as u64,
            completed: out
                .handoffs
                .iter()
                .filter(|h| h.completed_at.is_some())
                .count() as u64,
            duplicates: out.handoffs.iter().map(|h| h.duplicates).sum(),
            gap_losses: out.handoffs.iter().map(|h| h.gap_losses).sum(),
            flushed_frames: out.handoffs.iter().map(|h| h.flushed_frames).sum(),
        };
        let clients = out
            .client_views
            .iter()
            .map(|(id, v)| {
                let bssid = v.bssid.map(|b| b.to_string()).unwrap_or_default();
                (
                    out.node_name(*id).to_owned(),
                    ClientSummary {
                        bssid,
                        bssid_changes: v.bssid_changes,
                        reassociations: v.reassociations,
                    },
                )
            })
            .collect();
        let tcp = out
            .tcp
            .iter()
            .map(|(name, s)| {
                let ratios = cwnd_cycle_ratios(s.reductions());
                (
                    name.clone(),
                    TcpSummary {
                        segments: s.created(),
                        acked: s.acked(),
                        retransmissions: s.retransmissions(),
                        reductions: s.reductions().len() as u64,
                        final_cwnd: round6(s.state().cwnd_pkts),
                        median_peak_trough_ratio: crate::metrics::quantile(&ratios, 0.5)
                            .map(round6),
                    },
                )
            })
            .collect();
        RunReport {
            name: out.config.name.clone(),
            seed: out.config.master_seed,
            events: out.events_fired,
            event_digest: format!("{:016x}", out.event_digest),
            accounting_ok: out.violations.is_empty(),
            violations: out.violations.clone(),
            handoffs,
            clients,
            flows,
            tcp,
            config: out.config.clone(),
        }
    }

    /// Downlink report of the first game flow.
    pub fn game(&self) -> Option<&FlowReport> {
        self.config.flows.iter().find_map(|f| match f {
            crate::scenario::FlowConfig::Game { id, .. } => self.flows.get(&format!("{id}/dl")),
            _ => None,
        })
    }

    /// The summary file contents: TOML with a full config echo.
    pub fn to_summary_text(&self) -> String {
        toml::to_string(self).expect("report is representable as TOML")
    }

    /// Short human-readable digest printed by the CLI.
    pub fn brief(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario {} seed {}", self.name, self.seed);
        let _ = writeln!(
            s,
            "handoffs {} (duplicates {}, gap losses {}, flushed {})",
            self.handoffs.count,
            self.handoffs.duplicates,
            self.handoffs.gap_losses,
            self.handoffs.flushed_frames
        );
        for (name, f) in &self.flows {
            let opt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |x| format!("{x:.3}"));
            let _ = writeln!(
                s,
                "{name:<12} sent {:>6} recv {:>6} lost {:>5} ({:.2}%) p50 {} p95 {} jitter {} ms burst {}",
                f.sent,
                f.received,
                f.lost,
                 100.0 * f.loss_rate,
                opt(f.p50_delay_ms),
                opt(f.p95_delay_ms),
                opt(f.jitter_ms),
                f.longest_loss_burst
            );
            if let [Some(l), Some(i), Some(e)] = f.mos() {
                let _ = writeln!(
                    s,
                    "{:<12} MOS lan {l:.2} ({}) intra {i:.2} ({}) inter {e:.2} ({})",
                    "",
                    QualityBand::of(l).label(),
                    QualityBand::of(i).label(),
                    QualityBand::of(e).label()
                );
            }
        }
        for (name, t) in &self.tcp {
            let _ = writeln!(
                s,
                "tcp {name}: {} segments, {} reductions, peak/trough {}",
                t.segments,
                t.reductions,
                t.median_peak_trough_ratio
                    .map_or_else(|| "-".into(), |r| format!("{r:.2}"))
            );
        }
        let _ = write!(
            s,
            "accounting {}",
            if self.accounting_ok { "ok" } else { "VIOLATED" }
        );
        s
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Reductions treated as warm-up: the slow-start peak and the first two
/// congestion-avoidance cycles, while the window is still converging.
pub const CWND_WARMUP_REDUCTIONS: usize = 3;

/// Ratio of each peak to the trough that started its cycle, for the cycles
/// after the warm-up.
pub fn cwnd_cycle_ratios(reductions: &[Reduction]) -> Vec<f64> {
    reductions
        .windows(2)
        .skip(CWND_WARMUP_REDUCTIONS - 1)
        .map(|w| w[1].cwnd_before / w[0].cwnd_after)
        .collect()
}

/// Delays in ms of the delivered packets of a flow, in sequence order.
pub fn delay_series(out: &RunOutput, flow_name: &str) -> Vec<f64> {
    let Some(info) = out.flow_by_name(flow_name) else {
        return Vec::new();
    };
    out.records
        .flow(info.id)
        .filter_map(|r| r.delay())
        .map(|d| d.as_millis_f64())
        .collect()
}

/// Peak-to-trough ratio a delay excursion must reach to count as a tooth.
pub const SAWTOOTH_RATIO: f64 = 3.0;
/// Running-median window applied to the delay series before counting teeth.
pub const SAWTOOTH_WINDOW: usize = 5;

/// Sawtooth cycles in the downlink delay of the first game flow.
pub fn game_sawtooth_cycles(out: &RunOutput) -> usize {
    let Some(info) = out
        .flows
        .iter()
        .find(|f| f.kind == FlowKind::Game && f.direction == Direction::Downlink)
    else {
        return 0;
    };
    let series = delay_series(out, &info.name);
    crate::metrics::sawtooth_cycles(&series, SAWTOOTH_RATIO, SAWTOOTH_WINDOW)
}

pub fn trace_csv(out: &RunOutput) -> String {
    let mut s = String::with_capacity(64 * 1024);
    s.push_str(TRACE_HEADER);
    s.push('\n');
    for info in &out.flows {
        for r in out.records.flow(info.id) {
            let rx = r
                .t_rx
                .map(|t| t.as_micros().to_string())
                .unwrap_or_default();
            let delay = r
                .delay()
                .map(|d| d.as_micros().to_string())
                .unwrap_or_default();
            let ap = r.serving_ap_at_rx.map(|a| out.node_name(a)).unwrap_or("");
            let cause = r.drop_cause.map(|c| c.as_str()).unwrap_or("");
            let _ = writeln!(
                s,
                "{},{},{},{rx},{delay},{},{ap},{cause}",
                info.name,
                r.seq,
                r.t_tx.as_micros(),
                r.dup_count
            );
        }
    }
    s
}

pub fn handoffs_csv(out: &RunOutput) -> String {
    let mut s = String::new();
    s.push_str(HANDOFF_HEADER);
    s.push('\n');
    for h in &out.handoffs {
        let done = h
            .completed_at
            .map(|t| t.as_micros().to_string())
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{done}",
            h.t.as_micros(),
            out.node_name(h.client),
            out.node_name(h.src),
            out.node_name(h.dst),
            h.ordering.label(),
            h.duplicates,
            h.gap_losses,
            h.flushed_frames
        );
    }
    s
}

/// Writes `trace.csv`, `handoffs.csv` and `summary.txt` into `dir`.
pub fn write_outputs(dir: &Path, out: &RunOutput, report: &RunReport) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("trace.csv"), trace_csv(out))?;
    std::fs::write(dir.join("handoffs.csv"), handoffs_csv(out))?;
    std::fs::write(dir.join("summary.txt"), report.to_summary_text())?;
    Ok(())
}

/// One row of the opinion-score table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table1Row {
    pub scenario: &'static str,
    pub rtt_ms: f64,
    pub mos: f64,
    pub acceptable: bool,
    pub can_be_good: bool,
}

pub fn table1(jitter_ms: f64, model: &MosModel) -> Vec<Table1Row> {
    [("LAN", 5.0), ("Intra-region", 20.0), ("Inter-region", 80.0)]
        .into_iter()
        .map(|(scenario, rtt_ms)| {
            let mos = estimate_mos(rtt_ms, jitter_ms, model);
            Table1Row {
                scenario,
                rtt_ms,
                mos,
                acceptable: QualityBand::acceptable(mos),
                can_be_good: QualityBand::can_be_good(mos),
            }
        })
        .collect()
}

pub fn format_table1(rows: &[Table1Row], jitter_ms: f64) -> String {
    let mut s = format!(
        "{:<14}{:>9}{:>11}{:>10}  {}\n",
        "Scenario", "RTT(ms)", "Jitter(ms)", "MOS", "Quality"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<14}{:>9.0}{:>11.1}{:>10.6}  {}",
            r.scenario,
            r.rtt_ms,
            jitter_ms,
            r.mos,
            QualityBand::of(r.mos).label()
        );
    }
    s
}
