//! Observables of book states and trajectories.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::book::{BookState, PriceLevel, Side, Transaction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservableError {
    #[error("undefined liquidity: XLM needs both sides of the book populated")]
    UndefinedLiquidity,
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Per-level order counts and quantities on both sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthProfile {
    levels: PriceLevel,
    ask_count: Vec<u32>,
    ask_quantity: Vec<u64>,
    bid_count: Vec<u32>,
    bid_quantity: Vec<u64>,
}

impl DepthProfile {
    pub fn levels(&self) -> PriceLevel {
        self.levels
    }

    fn slot(level: PriceLevel) -> usize {
        level as usize - 1
    }

    /// Number of resident orders at `level`.
    pub fn count(&self, side: Side, level: PriceLevel) -> u32 {
        match side {
            Side::Ask => self.ask_count[Self::slot(level)],
            Side::Bid => self.bid_count[Self::slot(level)],
        }
    }

    pub fn quantity(&self, side: Side, level: PriceLevel) -> u64 {
        self.quantities(side)[Self::slot(level)]
    }

    /// `level * quantity(side, level)`.
    pub fn volume(&self, side: Side, level: PriceLevel) -> u64 {
        u64::from(level) * self.quantity(side, level)
    }

    /// Quantities by level, index `level - 1`.
    pub fn quantities(&self, side: Side) -> &[u64] {
        match side {
            Side::Ask => &self.ask_quantity,
            Side::Bid => &self.bid_quantity,
        }
    }

    pub fn total_quantity(&self, side: Side) -> u64 {
        self.quantities(side).iter().sum()
    }

    pub fn total_volume(&self, side: Side) -> u64 {
        (1..=self.levels).map(|k| self.volume(side, k)).sum()
    }

    pub fn total_count(&self, side: Side) -> u64 {
        let counts = match side {
            Side::Ask => &self.ask_count,
            Side::Bid => &self.bid_count,
        };
        counts.iter().map(|&c| u64::from(c)).sum()
    }

    /// Volume-weighted average price of one side, if populated.
    pub fn vwap(&self, side: Side) -> Option<f64> {
        let q = self.total_quantity(side);
        (q > 0).then(|| self.total_volume(side) as f64 / q as f64)
    }
}

pub fn depth(state: &BookState) -> DepthProfile {
    let n = state.levels() as usize;
    let mut profile = DepthProfile {
        levels: state.levels(),
        ask_count: vec![0; n],
        ask_quantity: vec![0; n],
        bid_count: vec![0; n],
        bid_quantity: vec![0; n],
    };
    for order in state.orders() {
        let i = DepthProfile::slot(order.price_level);
        let (count, quantity) = match order.side {
            Side::Ask => (&mut profile.ask_count, &mut profile.ask_quantity),
            Side::Bid => (&mut profile.bid_count, &mut profile.bid_quantity),
        };
        count[i] += 1;
        quantity[i] += u64::from(order.quantity);
    }
    profile
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuoteSnapshot {
    pub best_bid: Option<PriceLevel>,
    pub best_ask: Option<PriceLevel>,
    pub spread: Option<u32>,
    pub mid: Option<f64>,
}

pub fn quotes(state: &BookState) -> QuoteSnapshot {
    let best_bid = state.best_bid();
    let best_ask = state.best_ask();
    let (spread, mid) = match (best_bid, best_ask) {
        (Some(b), Some(a)) => (
            Some(a.saturating_sub(b)),
            Some((f64::from(a) + f64::from(b)) / 2.0),
        ),
        _ => (None, None),
    };
    QuoteSnapshot {
        best_bid,
        best_ask,
        spread,
        mid,
    }
}

/// XLM round-trip liquidity cost in basis points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Liquidity {
    pub ask: f64,
    pub bid: f64,
    pub total: f64,
}

/// Full-book XLM: `10^4 (VWAP_a - mid) / VWAP_a` plus
/// `10^4 (mid - VWAP_b) / VWAP_b`.
pub fn xlm(state: &BookState) -> Result<Liquidity, ObservableError> {
    let mid = quotes(state)
        .mid
        .ok_or(ObservableError::UndefinedLiquidity)?;
    let profile = depth(state);
    let (Some(vwap_a), Some(vwap_b)) = (profile.vwap(Side::Ask), profile.vwap(Side::Bid)) else {
        return Err(ObservableError::UndefinedLiquidity);
    };
    let ask = 10_000.0 * (vwap_a - mid) / vwap_a;
    let bid = 10_000.0 * (mid - vwap_b) / vwap_b;
    Ok(Liquidity {
        ask,
        bid,
        total: ask + bid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransactionObservation {
    pub price: PriceLevel,
    pub quantity: u32,
    pub volume: u64,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransactionSeries {
    pub observations: Vec<TransactionObservation>,
    /// Inter-trade durations `t[i+1] - t[i]`.
    pub durations: Vec<f64>,
}

pub fn transaction_observables(transactions: &[Transaction]) -> TransactionSeries {
    let observations = transactions
        .iter()
        .map(|t| TransactionObservation {
            price: t.price_level,
            quantity: t.quantity,
            volume: t.volume(),
            time: t.time,
        })
        .collect();
    let durations = transactions
        .windows(2)
        .map(|w| w[1].time - w[0].time)
        .collect();
    TransactionSeries {
        observations,
        durations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReturnMode {
    /// Log returns of successive transaction prices.
    #[default]
    TransactionLog,
    /// Log returns of the mid price between successive recorded states
    /// where it is defined.
    MidLog,
}

pub fn log_returns(prices: &[f64]) -> Vec<f64> {
    prices.windows(2).map(|w| (w[1] / w[0]).ln()).collect()
}

pub fn transaction_returns(transactions: &[Transaction]) -> Vec<f64> {
    let prices: Vec<f64> = transactions
        .iter()
        .map(|t| f64::from(t.price_level))
        .collect();
    log_returns(&prices)
}

/// Streaming mean/variance (Welford).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> Option<f64> {
        (self.n > 0).then_some(self.mean)
    }

    /// Sample standard deviation; needs two observations.
    pub fn std_dev(&self) -> Option<f64> {
        (self.n > 1).then(|| (self.m2 / (self.n - 1) as f64).sqrt())
    }

    pub fn std_error(&self) -> Option<f64> {
        self.std_dev().map(|s| s / (self.n as f64).sqrt())
    }
}

impl FromIterator<f64> for RunningStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut stats = RunningStats::default();
        iter.into_iter().for_each(|x| stats.push(x));
        stats
    }
}

/// Event-sampled statistics over the states visited by one run. States
/// where an observable is undefined are skipped and show up only as a lower
/// count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SnapshotAccumulator {
    pub states: u64,
    pub spread: RunningStats,
    pub mid: RunningStats,
    pub best_bid: RunningStats,
    pub best_ask: RunningStats,
    pub xlm_ask: RunningStats,
    pub xlm_bid: RunningStats,
    pub xlm: RunningStats,
    pub mid_returns: RunningStats,
    pub resident_orders: RunningStats,
    last_mid: Option<f64>,
}

impl SnapshotAccumulator {
    pub fn observe(&mut self, state: &BookState) {
        self.states += 1;
        let q = quotes(state);
        if let Some(b) = q.best_bid {
            self.best_bid.push(f64::from(b));
        }
        if let Some(a) = q.best_ask {
            self.best_ask.push(f64::from(a));
        }
        if let Some(s) = q.spread {
            self.spread.push(f64::from(s));
        }
        if let Some(m) = q.mid {
            self.mid.push(m);
            if let Some(prev) = self.last_mid {
                self.mid_returns.push((m / prev).ln());
            }
            self.last_mid = Some(m);
        }
        if let Ok(l) = xlm(state) {
            self.xlm_ask.push(l.ask);
            self.xlm_bid.push(l.bid);
            self.xlm.push(l.total);
        }
        self.resident_orders.push(state.order_count() as f64);
    }
}

/// Per-run means of the key observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub events: u64,
    pub elapsed: f64,
    pub transactions: u64,
    /// Transactions per unit simulated time.
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

impl RunSummary {
    pub fn from_parts(
        snapshots: &SnapshotAccumulator,
        transactions: &[Transaction],
        elapsed: f64,
        events: u64,
        mode: ReturnMode,
    ) -> Self {
        let prices: RunningStats = transactions
            .iter()
            .map(|t| f64::from(t.price_level))
            .collect();
        let returns = match mode {
            ReturnMode::TransactionLog => transaction_returns(transactions).into_iter().collect(),
            ReturnMode::MidLog => snapshots.mid_returns,
        };
        let count = transactions.len() as u64;
        RunSummary {
            events,
            elapsed,
            transactions: count,
            transaction_rate: if elapsed > 0.0 {
                count as f64 / elapsed
            } else {
                0.0
            },
            transactions_per_event: if events > 0 {
                count as f64 / events as f64
            } else {
                0.0
            },
            mean_spread: snapshots.spread.mean(),
            sd_spread: snapshots.spread.std_dev(),
            mean_mid: snapshots.mid.mean(),
            sd_mid: snapshots.mid.std_dev(),
            mean_best_bid: snapshots.best_bid.mean(),
            mean_best_ask: snapshots.best_ask.mean(),
            mean_transaction_price: prices.mean(),
            sd_transaction_price: prices.std_dev(),
            mean_return: returns.mean(),
            return_volatility: returns.std_dev(),
            mean_xlm_ask: snapshots.xlm_ask.mean(),
            mean_xlm_bid: snapshots.xlm_bid.mean(),
            mean_xlm: snapshots.xlm.mean(),
            mean_resident_orders: snapshots.resident_orders.mean(),
            spread_coverage: snapshots.spread.count(),
            xlm_coverage: snapshots.xlm.count(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte Carlo estimate of `E[O^order]` from one value per run.
pub fn ensemble_moment(values: &[f64], order: i32) -> Result<MomentEstimate, ObservableError> {
    if values.is_empty() {
        return Err(ObservableError::EmptyEnsemble);
    }
    let stats: RunningStats = values.iter().map(|v| v.powi(order)).collect();
    Ok(MomentEstimate {
        value: stats.mean().unwrap_or(0.0),
        std_error: stats.std_error().unwrap_or(0.0),
        samples: values.len(),
    })
}

/// Sample covariance with the `n - 1` denominator (zero for a single run).
pub fn ensemble_covariance(a: &[f64], b: &[f64]) -> Result<f64, ObservableError> {
    if a.len() != b.len() {
        return Err(ObservableError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(ObservableError::EmptyEnsemble);
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    if a.len() == 1 {
        return Ok(0.0);
    }
    let cross: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - mean_a) * (y - mean_b))
        .sum();
    Ok(cross / (n - 1.0))
}
