//! Packet-level simulator of a multi-AP Wi-Fi WLAN in which every client is
//! served through its own light virtual access point (LVAP) that a central
//! controller moves between physical APs.
//!
//! The crate is organised bottom-up:
//!
//! * [`sim`]: integer-microsecond clock, event scheduler, seeded random streams
//! * [`radio`]: path loss, drop-tail queues and the shared medium
//! * [`lvap`]: the controller, its handoff policies and orderings
//! * [`traffic`]: game traffic and a Reno-style bulk transfer
//! * [`metrics`]: delay statistics, loss accounting and opinion scores
//! * [`scenario`], [`network`], [`report`]: configuration, the event loop and outputs
//!
//! ```
//! use wlansim::{scenario::ScenarioConfig, network::simulate, report::RunReport};
//!
//! let mut cfg = ScenarioConfig::exp1();
//! cfg.duration_s = 1.0;
//! let out = simulate(cfg).unwrap();
//! let report = RunReport::from_output(&out);
//! assert!(report.accounting_ok);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod lvap;
pub mod metrics;
pub mod network;
pub mod radio;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod traffic;

pub use network::{simulate, RunOutput};
pub use report::RunReport;
pub use scenario::ScenarioConfig;
pub use sim::{RngStream, Scheduler, SimTime};
