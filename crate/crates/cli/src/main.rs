use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wlansim::metrics::{mean, MosModel};
use wlansim::report::{self, RunReport};
use wlansim::scenario::{ConfigError, ScenarioConfig, EXP1_TOML, EXP2_TOML};
use wlansim::RunOutput;

#[derive(Parser)]
#[command(
    name = "wlansim",
    version,
    about = "Packet-level WLAN simulator with LVAP handoffs"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct RunOpts {
    /// Master seed; overrides the scenario's `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for trace.csv, handoffs.csv and summary.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scenario override such as `handoff.ordering.overlap_ms=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Game client moving between two APs, handoff every 3 s, no background traffic.
    Exp1 {
        #[command(flatten)]
        opts: RunOpts,
    },
    /// exp1 plus a second station running a saturating TCP download.
    Exp2 {
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Opinion score for LAN, intra-region and inter-region servers.
    Table1 {
        #[arg(long, default_value_t = 5.5)]
        jitter: f64,
    },
    /// Run one scenario under N consecutive seeds in parallel.
    Sweep {
        scenario: PathBuf,
        #[arg(long)]
        seeds: u64,
        #[command(flatten)]
        opts: RunOpts,
    },
}

#[derive(Debug)]
enum CliError {
    Config(ConfigError),
    Io(PathBuf, std::io::Error),
    Invariants(Vec<String>),
    Usage(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Io(p, e) => write!(f, "cannot write {}: {e}", p.display()),
            CliError::Invariants(v) => write!(
                f,
                "accounting invariants violated:\n  - {}",
                v.join("\n  - ")
            ),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Run { scenario, opts } => {
            let cfg = load(&scenario, &opts)?;
            let (out, report) = execute(cfg, opts.out.as_deref())?;
            println!("{}", report.brief());
            check(&out)
        }
        Cmd::Exp1 { opts } => {
            let cfg = canned(EXP1_TOML, &opts)?;
            let (out, report) = execute(cfg, opts.out.as_deref())?;
            println!("{}", report.brief());
            check(&out)
        }
        Cmd::Exp2 { opts } => {
            let cfg = canned(EXP2_TOML, &opts)?;
            let (out, report) = execute(cfg, opts.out.as_deref())?;
            println!("{}", report.brief());
            println!(
                "game delay sawtooth cycles: {}",
                report::game_sawtooth_cycles(&out)
            );
            check(&out)
        }
        Cmd::Table1 { jitter } => {
            if jitter.is_nan() || jitter < 0.0 {
                return Err(CliError::Usage(format!(
                    "jitter must be >= 0, got {jitter}"
                )));
            }
            let rows = report::table1(jitter, &MosModel::default());
            print!("{}", report::format_table1(&rows, jitter));
            Ok(())
        }
        Cmd::Sweep {
            scenario,
            seeds,
            opts,
        } => sweep(&scenario, seeds, &opts),
    }
}

fn with_seed(mut overrides: Vec<String>, seed: Option<u64>) -> Vec<String> {
    if let Some(s) = seed {
        overrides.push(format!("master_seed={s}"));
    }
    overrides
}

fn load(path: &Path, opts: &RunOpts) -> Result<ScenarioConfig, CliError> {
    Ok(ScenarioConfig::load(
        path,
        &with_seed(opts.set.clone(), opts.seed),
    )?)
}

fn canned(src: &str, opts: &RunOpts) -> Result<ScenarioConfig, CliError> {
    Ok(ScenarioConfig::from_toml_with_overrides(
        src,
        &with_seed(opts.set.clone(), opts.seed),
    )?)
}

fn default_dir(cfg: &ScenarioConfig) -> PathBuf {
    match &cfg.output_dir {
        Some(d) => PathBuf::from(d),
        None => PathBuf::from(format!("out/{}-seed{}", cfg.name, cfg.master_seed)),
    }
}

fn execute(
    cfg: ScenarioConfig,
    out_dir: Option<&Path>,
) -> Result<(RunOutput, RunReport), CliError> {
    let dir = out_dir.map_or_else(|| default_dir(&cfg), Path::to_path_buf);
    let out = wlansim::simulate(cfg)?;
    let report = RunReport::from_output(&out);
    report::write_outputs(&dir, &out, &report).map_err(|e| CliError::Io(dir.clone(), e))?;
    println!("wrote {}", dir.display());
    Ok((out, report))
}

fn check(out: &RunOutput) -> Result<(), CliError> {
    if out.violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariants(out.violations.clone()))
    }
}

fn sweep(path: &Path, seeds: u64, opts: &RunOpts) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let base = load(path, opts)?;
    let first = base.master_seed;
    let root = opts.out.clone().unwrap_or_else(|| default_dir(&base));
    let results: Vec<Result<RunReport, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..seeds)
            .map(|k| {
                let mut cfg = base.clone();
                cfg.master_seed = first + k;
                let dir = root.join(format!("seed-{}", cfg.master_seed));
                s.spawn(move || -> Result<RunReport, CliError> {
                    let out = wlansim::simulate(cfg)?;
                    let report = RunReport::from_output(&out);
                    report::write_outputs(&dir, &out, &report)
                        .map_err(|e| CliError::Io(dir.clone(), e))?;
                    Ok(report)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    let mut reports = Vec::new();
    for r in results {
        reports.push(r?);
    }

    println!(
        "{:>6} {:>9} {:>9} {:>9} {:>9} {:>8}",
        "seed", "handoffs", "p95_ms", "jitter", "loss_%", "ok"
    );
    for r in &reports {
        let g = r.game();
        println!(
            "{:>6} {:>9} {:>9.3} {:>9.3} {:>9.3} {:>8}",
            r.seed,
            r.handoffs.count,
            g.and_then(|g| g.p95_delay_ms).unwrap_or(f64::NAN),
            g.and_then(|g| g.jitter_ms).unwrap_or(f64::NAN),
            g.map_or(f64::NAN, |g| 100.0 * g.loss_rate),
            r.accounting_ok
        );
    }
    let col = |f: &dyn Fn(&RunReport) -> Option<f64>| {
        mean(&reports.iter().filter_map(f).collect::<Vec<_>>())
    };
    println!(
        "{:>6} {:>9.2} {:>9.3} {:>9.3} {:>9.3}",
        "mean",
        col(&|r| Some(r.handoffs.count as f64)).unwrap_or(f64::NAN),
        col(&|r| r.game().and_then(|g| g.p95_delay_ms)).unwrap_or(f64::NAN),
        col(&|r| r.game().and_then(|g| g.jitter_ms)).unwrap_or(f64::NAN),
        col(&|r| r.game().map(|g| 100.0 * g.loss_rate)).unwrap_or(f64::NAN),
    );
    println!("wrote {}", root.display());
    let bad: Vec<String> = reports
        .iter()
        .flat_map(|r| {
            r.violations
                .iter()
                .map(move |v| format!("seed {}: {v}", r.seed))
        })
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariants(bad))
    }
}
