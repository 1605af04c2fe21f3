//! Scenario configuration, ensemble execution and reporting.
//!
//! A scenario is a TOML file (or a built-in preset) describing the price
//! grid, the trader groups and the ensemble size. [`run_scenario`] writes a
//! bundle directory:
//!
//! | file               | contents                                              |
//! |--------------------|-------------------------------------------------------|
//! | `summary.csv`      | one row per run, [`SummaryRow`] columns               |
//! | `densities.csv`    | long-format per-run means of the key observables      |
//! | `metadata.toml`    | schema version, base seed, config hash, config echo   |
//! | `events.csv`       | every event (`record = "events"`)                     |
//! | `transactions.csv` | every print (`record = "events"`)                     |
//! | `depth.csv`        | nonzero depth after each event (`events` with depth)  |
//! | `heatmap.csv`      | depth of the last N steps, averaged over runs         |
//!
//! Absent observables are written as empty cells. Column order is fixed for
//! [`SCHEMA_VERSION`].

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::book::{empty_book, BookState, Side};
use crate::engine::{
    run_ensemble_map, simulate_run, EngineError, HeatmapFrame, RecordMode, RecordingConfig,
    StopCriterion, TrajectoryRecord,
};
use crate::observables::{ensemble_moment, ReturnMode, RunSummary, RunningStats};
use crate::oracle::{
    build_generator, compare_distributions, empirical_distribution, enumerate_states, evolve,
    tiny_setup, OracleError, ProbabilityVector, TinyModel, DEFAULT_STATE_BUDGET,
};
use crate::rates::{
    arrival_rates, event_table, AnchoringMode, DgxParams, EventKind, RateError, RateModel,
    TraderGroup,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_RUNS: u64 = 200;
pub const DEFAULT_EVENTS: u64 = 5_000;
pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_HEATMAP_STEPS: usize = 100;
pub const PRESETS: [&str; 2] = ["scenario1", "scenario2"];

/// Two-sided normal quantile for 95% intervals.
const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("unknown preset {0:?} (available: scenario1, scenario2)")]
    UnknownPreset(String),
    #[error("invalid config:{}", .0.iter().map(|e| format!("\n  - {e}")).collect::<String>())]
    Invalid(Vec<String>),
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {message}", .path.display())]
    Malformed { path: PathBuf, message: String },
    #[error("{} run(s) failed:{}", .0.len(), .0.iter().map(|(r, e)| format!("\n  run {r}: {e}")).collect::<String>())]
    RunsFailed(Vec<(u64, EngineError)>),
    #[error("bundles use different grids: {0} vs {1} levels")]
    GridMismatch(u32, u32),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Rate(#[from] RateError),
}

impl ScenarioError {
    /// Process exit status: 2 for configuration problems, 3 for I/O and
    /// anything else that stops a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Config(_)
            | ScenarioError::GridMismatch(..)
            | ScenarioError::Rate(RateError::InvalidModel(_)) => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    #[default]
    Summary,
    Events,
    Heatmap,
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecordKind::Summary => "summary",
            RecordKind::Events => "events",
            RecordKind::Heatmap => "heatmap",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingOptions {
    #[serde(default)]
    pub mode: RecordKind,
    /// Depth window for `heatmap` mode.
    #[serde(default = "default_heatmap_steps")]
    pub heatmap_steps: usize,
    /// Also write `depth.csv` in `events` mode.
    #[serde(default)]
    pub depth: bool,
    #[serde(default)]
    pub returns: ReturnMode,
}

impl Default for RecordingOptions {
    fn default() -> Self {
        RecordingOptions {
            mode: RecordKind::Summary,
            heatmap_steps: DEFAULT_HEATMAP_STEPS,
            depth: false,
            returns: ReturnMode::default(),
        }
    }
}

impl RecordingOptions {
    fn engine_config(&self) -> RecordingConfig {
        let mode = match self.mode {
            RecordKind::Summary => RecordMode::Summary,
            RecordKind::Events => RecordMode::Events { depth: self.depth },
            RecordKind::Heatmap => RecordMode::Heatmap {
                steps: self.heatmap_steps,
            },
        };
        RecordingConfig {
            mode,
            returns: self.returns,
        }
    }
}

/// One trader group. Both sides share the DGX shape; ranks count up from
/// `ask_anchor` on the ask side and down from `bid_anchor` on the bid side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub share: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Number of ranks in each side's support.
    pub support: u32,
    pub bid_anchor: u32,
    pub ask_anchor: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Number of price levels `K`.
    pub levels: u32,
    /// Quantity of every arriving order.
    #[serde(default = "default_quantity")]
    pub quantity: u32,
    /// Per-order cancellation rate `ω`.
    pub cancel_rate: f64,
    /// Total event intensity `λ`.
    pub intensity: f64,
    #[serde(default)]
    pub anchoring: AnchoringMode,
    #[serde(default = "default_runs")]
    pub runs: u64,
    #[serde(default = "default_events")]
    pub events: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub recording: RecordingOptions,
    pub groups: Vec<GroupConfig>,
}

fn default_quantity() -> u32 {
    1
}
fn default_runs() -> u64 {
    DEFAULT_RUNS
}
fn default_events() -> u64 {
    DEFAULT_EVENTS
}
fn default_seed() -> u64 {
    DEFAULT_SEED
}
fn default_heatmap_steps() -> usize {
    DEFAULT_HEATMAP_STEPS
}

impl ScenarioConfig {
    /// Built-in parametrizations on a 20-level grid.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let base = GroupConfig {
            share: 1.0,
            mu: 1.0,
            sigma: 3.0,
            support: 12,
            bid_anchor: 12,
            ask_anchor: 9,
        };
        let groups = match name {
            "scenario1" => vec![base],
            "scenario2" => vec![
                GroupConfig { share: 0.7, ..base },
                GroupConfig {
                    share: 0.3,
                    mu: 4.0,
                    sigma: 1.0,
                    support: 14,
                    bid_anchor: 14,
                    ask_anchor: 7,
                },
            ],
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        Ok(ScenarioConfig {
            name: name.to_string(),
            levels: 20,
            quantity: 1,
            cancel_rate: 0.1,
            intensity: 6.0,
            anchoring: AnchoringMode::StaticSupport,
            runs: DEFAULT_RUNS,
            events: DEFAULT_EVENTS,
            seed: DEFAULT_SEED,
            output: None,
            recording: RecordingOptions::default(),
            groups,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: ScenarioConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        let k = self.levels;
        if k == 0 {
            errors.push("levels must be >= 1".to_string());
        }
        if self.quantity == 0 {
            errors.push("quantity must be >= 1".to_string());
        }
        if !(self.cancel_rate.is_finite() && self.cancel_rate >= 0.0) {
            errors.push(format!(
                "cancel_rate must be finite and >= 0, got {}",
                self.cancel_rate
            ));
        }
        if !(self.intensity.is_finite() && self.intensity > 0.0) {
            errors.push(format!(
                "intensity must be finite and > 0, got {}",
                self.intensity
            ));
        }
        if self.runs == 0 {
            errors.push("runs must be >= 1".to_string());
        }
        if self.recording.mode == RecordKind::Heatmap && self.recording.heatmap_steps == 0 {
            errors.push("recording.heatmap_steps must be >= 1".to_string());
        }
        if self.groups.is_empty() {
            errors.push("at least one group is required".to_string());
        }
        for (i, g) in self.groups.iter().enumerate() {
            let at = format!("groups[{i}]");
            if !(g.share.is_finite() && g.share > 0.0) {
                errors.push(format!("{at}.share must be > 0, got {}", g.share));
            }
            if !g.mu.is_finite() {
                errors.push(format!("{at}.mu must be finite"));
            }
            if !(g.sigma.is_finite() && g.sigma > 0.0) {
                errors.push(format!("{at}.sigma must be > 0, got {}", g.sigma));
            }
            if g.support == 0 {
                errors.push(format!("{at}.support must be >= 1"));
                continue;
            }
            if g.bid_anchor == 0 || g.bid_anchor > k || g.bid_anchor < g.support {
                errors.push(format!(
                    "{at}: bid support {}..={} is outside the grid 1..={k}",
                    i64::from(g.bid_anchor) - i64::from(g.support) + 1,
                    g.bid_anchor
                ));
            }
            if g.ask_anchor == 0
                || u64::from(g.ask_anchor) + u64::from(g.support) - 1 > u64::from(k)
            {
                errors.push(format!(
                    "{at}: ask support {}..={} is outside the grid 1..={k}",
                    g.ask_anchor,
                    u64::from(g.ask_anchor) + u64::from(g.support) - 1
                ));
            }
        }
        let total: f64 = self.groups.iter().map(|g| g.share).sum();
        if !self.groups.is_empty() && (total - 1.0).abs() > 1e-9 {
            errors.push(format!("group shares must sum to 1, got {total}"));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    pub fn rate_model(&self) -> Result<RateModel, RateError> {
        let groups = self
            .groups
            .iter()
            .map(|g| {
                let dgx = DgxParams::new(g.mu, g.sigma, g.support)?;
                Ok(TraderGroup {
                    share: g.share,
                    ask: dgx,
                    bid: dgx,
                    ask_anchor: g.ask_anchor,
                    bid_anchor: g.bid_anchor,
                })
            })
            .collect::<Result<Vec<_>, RateError>>()?;
        RateModel::new(
            self.levels,
            groups,
            self.cancel_rate,
            self.intensity,
            self.anchoring,
        )?
        .with_unit_quantity(self.quantity)
    }

    /// SHA-256 of the canonical TOML rendering, output directory excluded.
    pub fn hash(&self) -> String {
        let canonical = ScenarioConfig {
            output: None,
            ..self.clone()
        };
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(ScenarioConfig::from_toml(&text)?)
}

/// One `summary.csv` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: u64,
    pub events: u64,
    pub elapsed: f64,
    pub transactions: u64,
    pub transaction_rate: f64,
    pub transactions_per_event: f64,
    pub mean_spread: Option<f64>,
    pub sd_spread: Option<f64>,
    pub mean_mid: Option<f64>,
    pub sd_mid: Option<f64>,
    pub mean_best_bid: Option<f64>,
    pub mean_best_ask: Option<f64>,
    pub mean_transaction_price: Option<f64>,
    pub sd_transaction_price: Option<f64>,
    pub mean_return: Option<f64>,
    pub return_volatility: Option<f64>,
    pub mean_xlm_ask: Option<f64>,
    pub mean_xlm_bid: Option<f64>,
    pub mean_xlm: Option<f64>,
    pub mean_resident_orders: Option<f64>,
    pub spread_coverage: u64,
    pub xlm_coverage: u64,
}

impl SummaryRow {
    pub fn new(run: u64, s: &RunSummary) -> Self {
        SummaryRow {
            run,
            events: s.events,
            elapsed: s.elapsed,
            transactions: s.transactions,
            transaction_rate: s.transaction_rate,
            transactions_per_event: s.transactions_per_event,
            mean_spread: s.mean_spread,
            sd_spread: s.sd_spread,
            mean_mid: s.mean_mid,
            sd_mid: s.sd_mid,
            mean_best_bid: s.mean_best_bid,
            mean_best_ask: s.mean_best_ask,
            mean_transaction_price: s.mean_transaction_price,
            sd_transaction_price: s.sd_transaction_price,
            mean_return: s.mean_return,
            return_volatility: s.return_volatility,
            mean_xlm_ask: s.mean_xlm_ask,
            mean_xlm_bid: s.mean_xlm_bid,
            mean_xlm: s.mean_xlm,
            mean_resident_orders: s.mean_resident_orders,
            spread_coverage: s.spread_coverage,
            xlm_coverage: s.xlm_coverage,
        }
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            events: self.events,
            elapsed: self.elapsed,
            transactions: self.transactions,
            transaction_rate: self.transaction_rate,
            transactions_per_event: self.transactions_per_event,
            mean_spread: self.mean_spread,
            sd_spread: self.sd_spread,
            mean_mid: self.mean_mid,
            sd_mid: self.sd_mid,
            mean_best_bid: self.mean_best_bid,
            mean_best_ask: self.mean_best_ask,
            mean_transaction_price: self.mean_transaction_price,
            sd_transaction_price: self.sd_transaction_price,
            mean_return: self.mean_return,
            return_volatility: self.return_volatility,
            mean_xlm_ask: self.mean_xlm_ask,
            mean_xlm_bid: self.mean_xlm_bid,
            mean_xlm: self.mean_xlm,
            mean_resident_orders: self.mean_resident_orders,
            spread_coverage: self.spread_coverage,
            xlm_coverage: self.xlm_coverage,
        }
    }
}

/// Per-run means compared across scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observable {
    Spread,
    ReturnVolatility,
    MeanReturn,
    TransactionRate,
    TransactionsPerEvent,
    TransactionPrice,
    BestBid,
    BestAsk,
    Xlm,
}

impl Observable {
    pub const ALL: [Observable; 9] = [
        Observable::Spread,
        Observable::ReturnVolatility,
        Observable::MeanReturn,
        Observable::TransactionRate,
        Observable::TransactionsPerEvent,
        Observable::TransactionPrice,
        Observable::BestBid,
        Observable::BestAsk,
        Observable::Xlm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Observable::Spread => "spread",
            Observable::ReturnVolatility => "return_volatility",
            Observable::MeanReturn => "return",
            Observable::TransactionRate => "transaction_rate",
            Observable::TransactionsPerEvent => "transactions_per_event",
            Observable::TransactionPrice => "transaction_price",
            Observable::BestBid => "best_bid",
            Observable::BestAsk => "best_ask",
            Observable::Xlm => "xlm",
        }
    }

    pub fn of(self, s: &RunSummary) -> Option<f64> {
        match self {
            Observable::Spread => s.mean_spread,
            Observable::ReturnVolatility => s.return_volatility,
            Observable::MeanReturn => s.mean_return,
            Observable::TransactionRate => (s.elapsed > 0.0).then_some(s.transaction_rate),
            Observable::TransactionsPerEvent => (s.events > 0).then_some(s.transactions_per_event),
            Observable::TransactionPrice => s.mean_transaction_price,
            Observable::BestBid => s.mean_best_bid,
            Observable::BestAsk => s.mean_best_ask,
            Observable::Xlm => s.mean_xlm,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct DensityRow {
    observable: &'static str,
    run: u64,
    value: f64,
}

#[derive(Debug, Clone, Serialize)]
struct EventRow {
    run: u64,
    event: usize,
    time: f64,
    kind: &'static str,
    side: &'static str,
    price_level: u32,
    quantity: u32,
    order_id: Option<u64>,
    traded_quantity: u64,
    best_bid: Option<u32>,
    best_ask: Option<u32>,
    spread: Option<u32>,
    mid: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct TransactionRow {
    run: u64,
    time: f64,
    price_level: u32,
    quantity: u32,
    aggressor: Option<&'static str>,
}

#[derive(Debug, Clone, Serialize)]
struct DepthRow {
    run: u64,
    event: usize,
    side: &'static str,
    price_level: u32,
    quantity: u64,
}

#[derive(Debug, Clone, Serialize)]
struct HeatmapRow {
    step: usize,
    price_level: u32,
    runs: u64,
    mean_ask_quantity: f64,
    mean_bid_quantity: f64,
    trade_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub runs: u64,
    pub events: u64,
    pub levels: u32,
    pub config: ScenarioConfig,
}

#[derive(Debug, Clone)]
struct RunOutput {
    summary: RunSummary,
    records: Vec<TrajectoryRecord>,
    heatmap: Vec<HeatmapFrame>,
}

/// Result of [`run_scenario`].
#[derive(Debug, Clone)]
pub struct OutputBundle {
    pub directory: PathBuf,
    pub metadata: Metadata,
    pub summaries: Vec<RunSummary>,
    pub files: Vec<PathBuf>,
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>, header: &[&str]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.serialize(row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

const SUMMARY_HEADER: [&str; 22] = [
    "run",
    "events",
    "elapsed",
    "transactions",
    "transaction_rate",
    "transactions_per_event",
    "mean_spread",
    "sd_spread",
    "mean_mid",
    "sd_mid",
    "mean_best_bid",
    "mean_best_ask",
    "mean_transaction_price",
    "sd_transaction_price",
    "mean_return",
    "return_volatility",
    "mean_xlm_ask",
    "mean_xlm_bid",
    "mean_xlm",
    "mean_resident_orders",
    "spread_coverage",
    "xlm_coverage",
];

fn write_file(
    dir: &Path,
    name: &str,
    bytes: &[u8],
    files: &mut Vec<PathBuf>,
) -> Result<(), ScenarioError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(io_err(&path))?;
    files.push(path);
    Ok(())
}

fn heatmap_rows(levels: u32, steps: usize, runs: &[RunOutput]) -> Vec<HeatmapRow> {
    let k = levels as usize;
    let mut count = vec![0u64; steps];
    let mut ask = vec![vec![0u64; k]; steps];
    let mut bid = vec![vec![0u64; k]; steps];
    let mut trades = vec![vec![0u64; k]; steps];
    for run in runs {
        // Align windows on their last step so short runs fill the tail.
        let offset = steps - run.heatmap.len();
        for (i, frame) in run.heatmap.iter().enumerate() {
            let s = offset + i;
            count[s] += 1;
            for level in 1..=levels {
                let l = level as usize - 1;
                ask[s][l] += frame.depth.quantity(Side::Ask, level);
                bid[s][l] += frame.depth.quantity(Side::Bid, level);
            }
            let mut traded = frame.traded_levels.clone();
            traded.sort_unstable();
            traded.dedup();
            for level in traded {
                trades[s][level as usize - 1] += 1;
            }
        }
    }
    let mut rows = Vec::with_capacity(steps * k);
    for s in 0..steps {
        let n = count[s];
        let mean = |x: u64| if n > 0 { x as f64 / n as f64 } else { 0.0 };
        for l in 0..k {
            rows.push(HeatmapRow {
                step: s,
                price_level: l as u32 + 1,
                runs: n,
                mean_ask_quantity: mean(ask[s][l]),
                mean_bid_quantity: mean(bid[s][l]),
                trade_frequency: mean(trades[s][l]),
            });
        }
    }
    rows
}

/// Runs the ensemble described by `config` from an empty book and writes
/// the bundle to `out`.
pub fn run_scenario(config: &ScenarioConfig, out: &Path) -> Result<OutputBundle, ScenarioError> {
    config.validate()?;
    let model = config.rate_model()?;
    let initial =
        empty_book(config.levels).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?;
    let recording = config.recording.engine_config();
    let stop = StopCriterion::Events(config.events);

    let results: Vec<Result<RunOutput, EngineError>> = (0..config.runs)
        .into_par_iter()
        .map(|run| {
            simulate_run(&model, initial.clone(), stop, config.seed, run, recording).map(|t| {
                RunOutput {
                    summary: t.summary(),
                    records: t.records,
                    heatmap: t.heatmap,
                }
            })
        })
        .collect();
    let mut outputs = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (run, result) in results.into_iter().enumerate() {
        match result {
            Ok(o) => outputs.push(o),
            Err(e) => failures.push((run as u64, e)),
        }
    }
    if !failures.is_empty() {
        return Err(ScenarioError::RunsFailed(failures));
    }

    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut files = Vec::new();

    let summary = csv_bytes(
        outputs
            .iter()
            .enumerate()
            .map(|(i, o)| SummaryRow::new(i as u64, &o.summary)),
        &SUMMARY_HEADER,
    );
    write_file(out, "summary.csv", &summary, &mut files)?;

    let mut densities = Vec::new();
    for obs in Observable::ALL {
        for (run, o) in outputs.iter().enumerate() {
            if let Some(value) = obs.of(&o.summary) {
                densities.push(DensityRow {
                    observable: obs.name(),
                    run: run as u64,
                    value,
                });
            }
        }
    }
    write_file(
        out,
        "densities.csv",
        &csv_bytes(densities, &["observable", "run", "value"]),
        &mut files,
    )?;

    let metadata = Metadata {
        schema_version: SCHEMA_VERSION,
        config_hash: config.hash(),
        seed: config.seed,
        runs: config.runs,
        events: config.events,
        levels: config.levels,
        config: ScenarioConfig {
            output: None,
            ..config.clone()
        },
    };
    let meta_text = toml::to_string(&metadata).expect("metadata serializes");
    write_file(out, "metadata.toml", meta_text.as_bytes(), &mut files)?;

    match config.recording.mode {
        RecordKind::Summary => {}
        RecordKind::Events => write_event_files(out, &outputs, config.recording.depth, &mut files)?,
        RecordKind::Heatmap => {
            let rows = heatmap_rows(config.levels, config.recording.heatmap_steps, &outputs);
            let header = [
                "step",
                "price_level",
                "runs",
                "mean_ask_quantity",
                "mean_bid_quantity",
                "trade_frequency",
            ];
            write_file(out, "heatmap.csv", &csv_bytes(rows, &header), &mut files)?;
        }
    }

    Ok(OutputBundle {
        directory: out.to_path_buf(),
        metadata,
        summaries: outputs.into_iter().map(|o| o.summary).collect(),
        files,
    })
}

fn write_event_files(
    out: &Path,
    outputs: &[RunOutput],
    with_depth: bool,
    files: &mut Vec<PathBuf>,
) -> Result<(), ScenarioError> {
    let mut events = Vec::new();
    let mut prints = Vec::new();
    let mut depth_rows = Vec::new();
    for (run, o) in outputs.iter().enumerate() {
        let run = run as u64;
        for (i, r) in o.records.iter().enumerate() {
            events.push(EventRow {
                run,
                event: i,
                time: r.time,
                kind: match r.event.kind() {
                    EventKind::Cancellation => "cancellation",
                    _ => "arrival",
                },
                side: r.event.side().as_str(),
                price_level: r.event.price_level(),
                quantity: r.event.quantity(),
                order_id: r.event.target_order().map(|id| id.0),
                traded_quantity: r.transactions.iter().map(|t| u64::from(t.quantity)).sum(),
                best_bid: r.quotes.best_bid,
                best_ask: r.quotes.best_ask,
                spread: r.quotes.spread,
                mid: r.quotes.mid,
            });
            for t in &r.transactions {
                prints.push(TransactionRow {
                    run,
                    time: t.time,
                    price_level: t.price_level,
                    quantity: t.quantity,
                    aggressor: t.aggressor_side.map(Side::as_str),
                });
            }
            if let Some(d) = &r.depth {
                for side in [Side::Bid, Side::Ask] {
                    for level in 1..=d.levels() {
                        let quantity = d.quantity(side, level);
                        if quantity > 0 {
                            depth_rows.push(DepthRow {
                                run,
                                event: i,
                                side: side.as_str(),
                                price_level: level,
                                quantity,
                            });
                        }
                    }
                }
            }
        }
    }
    let header = [
        "run",
        "event",
        "time",
        "kind",
        "side",
        "price_level",
        "quantity",
        "order_id",
        "traded_quantity",
        "best_bid",
        "best_ask",
        "spread",
        "mid",
    ];
    write_file(out, "events.csv", &csv_bytes(events, &header), files)?;
    let header = ["run", "time", "price_level", "quantity", "aggressor"];
    write_file(out, "transactions.csv", &csv_bytes(prints, &header), files)?;
    if with_depth {
        let header = ["run", "event", "side", "price_level", "quantity"];
        write_file(out, "depth.csv", &csv_bytes(depth_rows, &header), files)?;
    }
    Ok(())
}

/// A bundle read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedBundle {
    pub metadata: Metadata,
    pub summaries: Vec<RunSummary>,
}

pub fn load_bundle(dir: &Path) -> Result<LoadedBundle, ScenarioError> {
    let meta_path = dir.join("metadata.toml");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let metadata: Metadata = toml::from_str(&text).map_err(|e| ScenarioError::Malformed {
        path: meta_path.clone(),
        message: e.to_string(),
    })?;
    let path = dir.join("summary.csv");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let malformed = |e: csv::Error| ScenarioError::Malformed {
        path: path.clone(),
        message: e.to_string(),
    };
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let mut summaries = Vec::new();
    for row in reader.deserialize::<SummaryRow>() {
        summaries.push(row.map_err(malformed)?.summary());
    }
    Ok(LoadedBundle {
        metadata,
        summaries,
    })
}

/// Mean of per-run values with its standard error and normal 95% interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub samples: u64,
    pub mean: Option<f64>,
    pub std_error: Option<f64>,
}

impl Estimate {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let stats: RunningStats = values.into_iter().collect();
        Estimate {
            samples: stats.count(),
            mean: stats.mean(),
            std_error: stats.std_error(),
        }
    }

    pub fn interval(&self) -> Option<(f64, f64)> {
        let (m, se) = (self.mean?, self.std_error?);
        Some((m - Z_95 * se, m + Z_95 * se))
    }
}

/// Direction of the second bundle relative to the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Greater,
    Less,
    Indistinguishable,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Greater => "greater",
            Verdict::Less => "less",
            Verdict::Indistinguishable => "indistinguishable",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservableComparison {
    pub observable: Observable,
    pub a: Estimate,
    pub b: Estimate,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<ObservableComparison>,
}

impl ComparisonReport {
    pub fn get(&self, observable: Observable) -> Option<&ObservableComparison> {
        self.rows.iter().find(|r| r.observable == observable)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "observable,n_a,mean_a,se_a,ci_low_a,ci_high_a,n_b,mean_b,se_b,ci_low_b,ci_high_b,verdict\n",
        );
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let (la, ha) = r.a.interval().unzip();
            let (lb, hb) = r.b.interval().unzip();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.observable.name(),
                r.a.samples,
                opt(r.a.mean),
                opt(r.a.std_error),
                opt(la),
                opt(ha),
                r.b.samples,
                opt(r.b.mean),
                opt(r.b.std_error),
                opt(lb),
                opt(hb),
                r.verdict.as_str()
            ));
        }
        out
    }
}

/// Compares per-run means: `b` is greater (less) than `a` when its 95%
/// interval lies entirely above (below) that of `a`.
pub fn compare_summaries(a: &[RunSummary], b: &[RunSummary]) -> ComparisonReport {
    let rows = Observable::ALL
        .iter()
        .map(|&obs| {
            let ea = Estimate::from_values(a.iter().filter_map(|s| obs.of(s)));
            let eb = Estimate::from_values(b.iter().filter_map(|s| obs.of(s)));
            let verdict = match (ea.interval(), eb.interval()) {
                (Some((_, ha)), Some((lb, _))) if lb > ha => Verdict::Greater,
                (Some((la, _)), Some((_, hb))) if hb < la => Verdict::Less,
                _ => Verdict::Indistinguishable,
            };
            ObservableComparison {
                observable: obs,
                a: ea,
                b: eb,
                verdict,
            }
        })
        .collect();
    ComparisonReport { rows }
}

pub fn compare_scenarios(a_dir: &Path, b_dir: &Path) -> Result<ComparisonReport, ScenarioError> {
    let a = load_bundle(a_dir)?;
    let b = load_bundle(b_dir)?;
    if a.metadata.levels != b.metadata.levels {
        return Err(ScenarioError::GridMismatch(
            a.metadata.levels,
            b.metadata.levels,
        ));
    }
    Ok(compare_summaries(&a.summaries, &b.summaries))
}

/// Empty-book arrival rates per group, side and level, plus the mixture.
/// `rate` is the relative weight (each side's mixture sums to one over the
/// grid); `intensity` scales it by the empty book's normalization.
pub fn print_rates(config: &ScenarioConfig) -> Result<String, ScenarioError> {
    config.validate()?;
    let model = config.rate_model()?;
    let book = empty_book(config.levels).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?;
    let scale = event_table(&model, &book)?.normalization;
    let mut out = String::from("group,side,price_level,rank,rate,intensity\n");
    for (g, group) in model.groups().iter().enumerate() {
        for side in [Side::Bid, Side::Ask] {
            for (r, w) in model.group_pmf(g, side).iter().enumerate() {
                let level = match side {
                    Side::Ask => group.ask_anchor + r as u32,
                    Side::Bid => group.bid_anchor - r as u32,
                };
                let rate = group.share * w;
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    g + 1,
                    side.as_str(),
                    level,
                    r + 1,
                    rate,
                    rate * scale
                ));
            }
        }
    }
    let mix = arrival_rates(&model, &book)?;
    for side in [Side::Bid, Side::Ask] {
        for level in 1..=config.levels {
            let rate = mix.rate(side, level);
            out.push_str(&format!(
                "all,{},{level},,{rate},{}\n",
                side.as_str(),
                rate * scale
            ));
        }
    }
    Ok(out)
}

/// Thresholds and sample sizes for [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationOptions {
    pub runs: u64,
    pub times: Vec<f64>,
    pub tv_tolerance: f64,
    /// Allowed deviation of Monte Carlo moments, in standard errors.
    pub moment_sigmas: f64,
    pub column_sum_tolerance: f64,
    pub seed: u64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            runs: 100_000,
            times: vec![0.5, 1.0, 2.0],
            tv_tolerance: 0.02,
            moment_sigmas: 3.0,
            column_sum_tolerance: 1e-12,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvCheck {
    pub time: f64,
    pub distance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentCheck {
    pub time: f64,
    pub observable: &'static str,
    pub order: i32,
    pub exact: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub model: &'static str,
    pub states: usize,
    pub runs: u64,
    pub max_column_sum: f64,
    pub min_off_diagonal: f64,
    /// Largest gap between `-H_ii` and the engine's total rate in state `i`.
    pub max_diagonal_gap: f64,
    pub generator_passed: bool,
    pub tv: Vec<TvCheck>,
    pub moments: Vec<MomentCheck>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.generator_passed
            && self.tv.iter().all(|c| c.passed)
            && self.moments.iter().all(|c| c.passed)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
        writeln!(f, "model: {}", self.model)?;
        writeln!(f, "states: {}", self.states)?;
        writeln!(f, "runs: {}", self.runs)?;
        writeln!(
            f,
            "generator: max |column sum| = {:e}, min off-diagonal = {}, max |diag + rate| = {:e} [{}]",
            self.max_column_sum,
            self.min_off_diagonal,
            self.max_diagonal_gap,
            mark(self.generator_passed)
        )?;
        writeln!(f, "time,total_variation,status")?;
        for c in &self.tv {
            writeln!(f, "{},{},{}", c.time, c.distance, mark(c.passed))?;
        }
        writeln!(f, "time,observable,order,exact,estimate,std_error,status")?;
        for c in &self.moments {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                c.time,
                c.observable,
                c.order,
                c.exact,
                c.estimate,
                c.std_error,
                mark(c.passed)
            )?;
        }
        write!(f, "result: {}", if self.passed() { "pass" } else { "FAIL" })
    }
}

/// Compares a capped engine ensemble started from the vacuum against the
/// exact master-equation solution of a tiny model.
pub fn validate(
    variant: TinyModel,
    options: &ValidationOptions,
) -> Result<OracleReport, ScenarioError> {
    let setup = tiny_setup(variant);
    let index = enumerate_states(&setup.space, DEFAULT_STATE_BUDGET)?;
    let h = build_generator(&setup.model, &index)?;

    let max_column_sum = h.column_sums().iter().map(|s| s.abs()).fold(0.0, f64::max);
    let min_off_diagonal = h.min_off_diagonal();
    let mut max_diagonal_gap: f64 = 0.0;
    for i in 0..index.len() {
        let state = index.state(i).map_err(OracleError::from)?;
        let total = match event_table(&setup.model, &state) {
            Ok(t) => t.total(),
            Err(RateError::AbsorbingState) => 0.0,
            Err(e) => return Err(e.into()),
        };
        max_diagonal_gap = max_diagonal_gap.max((h.diagonal()[i] + total).abs());
    }
    let generator_passed = max_column_sum <= options.column_sum_tolerance
        && min_off_diagonal >= 0.0
        && max_diagonal_gap <= options.column_sum_tolerance;

    let vacuum = BookState::new(setup.space.levels).map_err(OracleError::from)?;
    let p0 = ProbabilityVector::point_mass(
        index.len(),
        index.position(&vacuum.key()).expect("vacuum is indexed"),
    );
    let order_counts = index
        .observable(|s| s.order_count() as f64)
        .map_err(OracleError::from)?;

    let mut tv = Vec::new();
    let mut moments = Vec::new();
    for &t in &options.times {
        let exact = evolve(&p0, &h, t)?;
        let finals = run_ensemble_map(
            &setup.model,
            &vacuum,
            options.runs,
            StopCriterion::Horizon(t),
            options.seed,
            RecordingConfig::summary(),
            |traj| traj.final_state,
        )?;
        let empirical = empirical_distribution(&index, &finals)?;
        let distance = compare_distributions(&empirical, &exact)?;
        tv.push(TvCheck {
            time: t,
            distance,
            passed: distance <= options.tv_tolerance,
        });
        let samples: Vec<f64> = finals.iter().map(|s| s.order_count() as f64).collect();
        for order in [1, 2] {
            let mc = ensemble_moment(&samples, order).map_err(|e| ScenarioError::Malformed {
                path: PathBuf::from("<ensemble>"),
                message: e.to_string(),
            })?;
            let exact_value = exact.expectation(&order_counts, order)?;
            moments.push(MomentCheck {
                time: t,
                observable: "orders",
                order,
                exact: exact_value,
                estimate: mc.value,
                std_error: mc.std_error,
                passed: (mc.value - exact_value).abs() <= options.moment_sigmas * mc.std_error,
            });
        }
    }

    Ok(OracleReport {
        model: variant.name(),
        states: index.len(),
        runs: options.runs,
        max_column_sum,
        min_off_diagonal,
        max_diagonal_gap,
        generator_passed,
        tv,
        moments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_table() {
        let s1 = ScenarioConfig::preset("scenario1").unwrap();
        assert_eq!(s1.groups.len(), 1);
        assert_eq!((s1.groups[0].mu, s1.groups[0].sigma), (1.0, 3.0));
        assert_eq!((s1.groups[0].bid_anchor, s1.groups[0].ask_anchor), (12, 9));
        assert_eq!((s1.cancel_rate, s1.intensity, s1.levels), (0.1, 6.0, 20));
        let s2 = ScenarioConfig::preset("scenario2").unwrap();
        assert_eq!(
            s2.groups.iter().map(|g| g.share).collect::<Vec<_>>(),
            [0.7, 0.3]
        );
        assert_eq!(
            (s2.groups[1].mu, s2.groups[1].sigma, s2.groups[1].support),
            (4.0, 1.0, 14)
        );
        assert!(matches!(
            ScenarioConfig::preset("scenario3"),
            Err(ConfigError::UnknownPreset(_))
        ));
        s1.rate_model().unwrap();
        s2.rate_model().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let s2 = ScenarioConfig::preset("scenario2").unwrap();
        let text = s2.to_toml();
        assert_eq!(ScenarioConfig::from_toml(&text).unwrap(), s2);
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let text = r#"
name = "mini"
levels = 5
cancel_rate = 0.2
intensity = 3.0

[[groups]]
share = 1.0
mu = 0.0
sigma = 1.0
support = 2
bid_anchor = 2
ask_anchor = 4
"#;
        let c = ScenarioConfig::from_toml(text).unwrap();
        assert_eq!(
            (c.runs, c.events, c.seed, c.quantity),
            (DEFAULT_RUNS, DEFAULT_EVENTS, DEFAULT_SEED, 1)
        );
        assert_eq!(c.recording, RecordingOptions::default());
        assert_eq!(c.recording.heatmap_steps, 100);
    }

    #[test]
    fn shares_must_sum_to_one() {
        let mut c = ScenarioConfig::preset("scenario2").unwrap();
        c.groups[1].share = 0.2;
        match c.validate() {
            Err(ConfigError::Invalid(errs)) => {
                assert_eq!(errs.len(), 1);
                assert!(errs[0].contains("sum to 1"), "{errs:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errors_are_itemized() {
        let mut c = ScenarioConfig::preset("scenario1").unwrap();
        c.runs = 0;
        c.intensity = -1.0;
        c.groups[0].ask_anchor = 15;
        c.groups[0].sigma = 0.0;
        let Err(ConfigError::Invalid(errs)) = c.validate() else {
            panic!("expected validation failure")
        };
        assert_eq!(errs.len(), 4, "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("ask support 15..=26")));
    }

    #[test]
    fn unknown_keys_and_bad_types_fail_to_parse() {
        let mut text = ScenarioConfig::preset("scenario1").unwrap().to_toml();
        text.insert_str(0, "colour = \"blue\"\n");
        assert!(matches!(
            ScenarioConfig::from_toml(&text),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            ScenarioConfig::from_toml("name = 3"),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn hash_ignores_output_and_tracks_content() {
        let a = ScenarioConfig::preset("scenario1").unwrap();
        let b = ScenarioConfig {
            output: Some("elsewhere".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = ScenarioConfig {
            seed: 2,
            ..a.clone()
        };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(
            ScenarioError::Config(ConfigError::Parse("x".into())).exit_code(),
            2
        );
        let io = ScenarioError::Io {
            path: "p".into(),
            source: io::Error::other("x"),
        };
        assert_eq!(io.exit_code(), 3);
        assert_eq!(ScenarioError::GridMismatch(20, 10).exit_code(), 2);
    }

    fn summary(spread: f64, rate: f64) -> RunSummary {
        RunSummary {
            events: 10,
            elapsed: 1.0,
            transactions: 1,
            transaction_rate: rate,
            transactions_per_event: 0.1,
            mean_spread: Some(spread),
            sd_spread: None,
            mean_mid: None,
            sd_mid: None,
            mean_best_bid: None,
            mean_best_ask: None,
            mean_transaction_price: None,
            sd_transaction_price: None,
            mean_return: None,
            return_volatility: None,
            mean_xlm_ask: None,
            mean_xlm_bid: None,
            mean_xlm: None,
            mean_resident_orders: None,
            spread_coverage: 10,
            xlm_coverage: 0,
        }
    }

    #[test]
    fn verdicts_are_antisymmetric() {
        let a: Vec<_> = (0..50)
            .map(|i| summary(2.0 + 0.01 * i as f64, 1.0 + 0.001 * i as f64))
            .collect();
        let b: Vec<_> = (0..50)
            .map(|i| summary(4.0 + 0.01 * i as f64, 1.0 + 0.001 * i as f64))
            .collect();
        let ab = compare_summaries(&a, &b);
        let ba = compare_summaries(&b, &a);
        assert_eq!(
            ab.get(Observable::Spread).unwrap().verdict,
            Verdict::Greater
        );
        assert_eq!(ba.get(Observable::Spread).unwrap().verdict, Verdict::Less);
        assert_eq!(
            ab.get(Observable::TransactionRate).unwrap().verdict,
            Verdict::Indistinguishable
        );
        assert_eq!(
            ab.get(Observable::Xlm).unwrap().verdict,
            Verdict::Indistinguishable
        );
        assert!(compare_summaries(&a, &a)
            .rows
            .iter()
            .all(|r| r.verdict == Verdict::Indistinguishable));
        let csv = ab.to_csv();
        assert_eq!(csv.lines().count(), Observable::ALL.len() + 1);
        assert!(csv.lines().nth(1).unwrap().ends_with(",greater"));
    }

    #[test]
    fn estimate_interval_is_two_sided() {
        let e = Estimate::from_values([1.0, 2.0, 3.0]);
        let (lo, hi) = e.interval().unwrap();
        assert!((e.mean.unwrap() - 2.0).abs() < 1e-15);
        let se = (1.0f64 / 3.0).sqrt();
        assert!((hi - 2.0 - 1.959_963_984_540_054 * se).abs() < 1e-12);
        assert!((2.0 - lo - (hi - 2.0)).abs() < 1e-12);
        assert_eq!(Estimate::from_values([5.0]).interval(), None);
    }

    #[test]
    fn print_rates_sums_to_one_per_side() {
        let text = print_rates(&ScenarioConfig::preset("scenario2").unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("group,side,price_level,rank,rate,intensity")
        );
        let mut bid = 0.0;
        let mut ask_intensity = 0.0;
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells[0] == "all" {
                let rate: f64 = cells[4].parse().unwrap();
                match cells[1] {
                    "bid" => bid += rate,
                    _ => ask_intensity += cells[5].parse::<f64>().unwrap(),
                }
            }
        }
        assert!((bid - 1.0).abs() < 1e-12);
        // Empty book: λ splits evenly between the two sides.
        assert!((ask_intensity - 3.0).abs() < 1e-12);
    }

    #[test]
    fn heatmap_aligns_short_runs_to_the_end() {
        use crate::observables::depth;
        let mut b = empty_book(3).unwrap();
        b.submit(Side::Bid, 1, 2, 0.0).unwrap();
        let frame = HeatmapFrame {
            time: 0.0,
            depth: depth(&b),
            traded_levels: vec![2, 2],
        };
        let run = RunOutput {
            summary: summary(1.0, 1.0),
            records: Vec::new(),
            heatmap: vec![frame],
        };
        let rows = heatmap_rows(
            3,
            2,
            &[
                run.clone(),
                RunOutput {
                    heatmap: Vec::new(),
                    ..run
                },
            ],
        );
        assert_eq!(rows.len(), 6);
        assert!(rows[..3]
            .iter()
            .all(|r| r.runs == 0 && r.mean_bid_quantity == 0.0));
        assert_eq!(rows[3].runs, 1);
        assert_eq!(rows[3].mean_bid_quantity, 2.0);
        assert_eq!(rows[4].trade_frequency, 1.0);
    }
}
