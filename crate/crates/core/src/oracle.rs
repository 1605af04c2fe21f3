//! Exact master-equation solver on a truncated state space.
//!
//! The pure states within the cutoffs are enumerated in their price-time
//! normal form, the generator `H` is assembled from the same event-rate
//! table the engine samples from, and `p(t) = exp(H t) p(0)` is computed by
//! uniformization. Column `i` of `H` holds the rates out of state `i`, so
//! every column sums to zero.

use std::collections::HashMap;
use std::ops::RangeInclusive;

use rayon::prelude::*;
use thiserror::Error;

use crate::book::{BookError, BookKey, BookState, PriceLevel, Quantity, Side};
use crate::engine::apply_event;
use crate::rates::{
    event_table, AnchoringMode, Capacity, DgxParams, RateError, RateModel, TraderGroup,
};

/// Default ceiling on the number of enumerated states.
pub const DEFAULT_STATE_BUDGET: usize = 200_000;

/// Poisson tail mass left out of the uniformization sum.
pub const UNIFORMIZATION_TOLERANCE: f64 = 1e-10;

// Poisson weights start at exp(-rate * dt); keeping rate * dt below this
// avoids underflow of the leading weight.
const MAX_UNIFORMIZATION_CHUNK: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("state space has {count} states, budget is {budget}")]
    BudgetExceeded { count: u128, budget: usize },
    #[error("transition from {from} leaves the truncated state space (target {to})")]
    Escape { from: String, to: String },
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("invalid probability vector: {0}")]
    InvalidVector(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("state {0} is not in the index")]
    UnknownState(String),
    #[error(transparent)]
    Book(#[from] BookError),
    #[error(transparent)]
    Rate(#[from] RateError),
}

/// Truncation cutoffs, optionally restricting each side to a level range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    pub levels: PriceLevel,
    pub max_quantity: Quantity,
    pub max_orders: usize,
    pub bid_levels: RangeInclusive<PriceLevel>,
    pub ask_levels: RangeInclusive<PriceLevel>,
}

impl StateSpace {
    pub fn new(levels: PriceLevel, max_quantity: Quantity, max_orders: usize) -> Self {
        StateSpace {
            levels,
            max_quantity,
            max_orders,
            bid_levels: 1..=levels,
            ask_levels: 1..=levels,
        }
    }

    pub fn with_side_levels(mut self, side: Side, range: RangeInclusive<PriceLevel>) -> Self {
        match side {
            Side::Bid => self.bid_levels = range,
            Side::Ask => self.ask_levels = range,
        }
        self
    }

    pub fn capacity(&self) -> Capacity {
        Capacity {
            max_orders: self.max_orders,
            max_quantity: self.max_quantity,
        }
    }

    fn side_levels(&self, side: Side) -> RangeInclusive<PriceLevel> {
        let r = match side {
            Side::Bid => &self.bid_levels,
            Side::Ask => &self.ask_levels,
        };
        (*r.start()).max(1)..=(*r.end()).min(self.levels)
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k.min(n));
    (0..k).fold(1u128, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Side configurations with exactly `n` orders on `m` levels: a multiset of
/// levels times a quantity per order.
fn side_configs(m: u128, n: u128, q: u128) -> u128 {
    if m == 0 {
        return u128::from(n == 0);
    }
    binomial(n + m - 1, n).saturating_mul(q.saturating_pow(n as u32))
}

fn levels_in(range: &RangeInclusive<PriceLevel>, lo: i64, hi: i64) -> u128 {
    let lo = lo.max(i64::from(*range.start()));
    let hi = hi.min(i64::from(*range.end()));
    if hi < lo {
        0
    } else {
        (hi - lo + 1) as u128
    }
}

/// Number of states in the space, computed combinatorially.
pub fn count_states(space: &StateSpace) -> u128 {
    let q = u128::from(space.max_quantity);
    let n_max = space.max_orders as u128;
    let bids = space.side_levels(Side::Bid);
    let asks = space.side_levels(Side::Ask);
    let mut total: u128 = 0;
    for nb in 0..=n_max {
        for na in 0..=(n_max - nb) {
            if nb == 0 {
                let ask_m = levels_in(&asks, 1, i64::from(space.levels));
                total = total.saturating_add(side_configs(ask_m, na, q));
                continue;
            }
            // Split on the best bid level b: bids at or below b with at
            // least one at b, asks strictly above b.
            for b in bids.clone() {
                let b = i64::from(b);
                let at_or_below = side_configs(levels_in(&bids, 1, b), nb, q);
                let below = side_configs(levels_in(&bids, 1, b - 1), nb, q);
                let asks_above =
                    side_configs(levels_in(&asks, b + 1, i64::from(space.levels)), na, q);
                total = total.saturating_add((at_or_below - below).saturating_mul(asks_above));
            }
        }
    }
    total
}

/// Bijection between enumerated pure states and dense indices. States are
/// stored in ascending [`BookKey`] order.
#[derive(Debug, Clone)]
pub struct StateIndex {
    space: StateSpace,
    keys: Vec<BookKey>,
    positions: HashMap<BookKey, usize>,
}

impl StateIndex {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn keys(&self) -> &[BookKey] {
        &self.keys
    }

    pub fn key(&self, i: usize) -> &BookKey {
        &self.keys[i]
    }

    pub fn position(&self, key: &BookKey) -> Option<usize> {
        self.positions.get(key).copied()
    }

    pub fn state(&self, i: usize) -> Result<BookState, BookError> {
        BookState::from_key(self.space.levels, &self.keys[i])
    }

    /// Per-state values of an observable, in index order.
    pub fn observable<F: Fn(&BookState) -> f64>(&self, f: F) -> Result<Vec<f64>, BookError> {
        (0..self.len())
            .map(|i| self.state(i).map(|s| f(&s)))
            .collect()
    }
}

/// All priority-ordered sequences on one side with at most `max_orders`
/// orders, visiting levels best-first.
fn enumerate_side(
    levels: &[PriceLevel],
    max_orders: usize,
    max_quantity: Quantity,
) -> Vec<Vec<(PriceLevel, Quantity)>> {
    fn extend(
        levels: &[PriceLevel],
        budget: usize,
        max_quantity: Quantity,
        prefix: &mut Vec<(PriceLevel, Quantity)>,
        out: &mut Vec<Vec<(PriceLevel, Quantity)>>,
    ) {
        out.push(prefix.clone());
        if budget == 0 {
            return;
        }
        // Next order sits at `levels[i]`; later orders may only use
        // `levels[i..]`, which keeps the sequence in priority order.
        for (i, &level) in levels.iter().enumerate() {
            for q in 1..=max_quantity {
                prefix.push((level, q));
                extend(&levels[i..], budget - 1, max_quantity, prefix, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    extend(levels, max_orders, max_quantity, &mut Vec::new(), &mut out);
    out
}

/// Enumerates every uncrossed normal-form book within the cutoffs.
pub fn enumerate_states(space: &StateSpace, budget: usize) -> Result<StateIndex, OracleError> {
    let count = count_states(space);
    if count > budget as u128 {
        return Err(OracleError::BudgetExceeded { count, budget });
    }
    let bid_levels: Vec<PriceLevel> = space.side_levels(Side::Bid).rev().collect();
    let ask_levels: Vec<PriceLevel> = space.side_levels(Side::Ask).collect();
    let bid_sides = enumerate_side(&bid_levels, space.max_orders, space.max_quantity);
    let ask_sides = enumerate_side(&ask_levels, space.max_orders, space.max_quantity);

    let mut keys = Vec::with_capacity(count as usize);
    for bids in &bid_sides {
        for asks in &ask_sides {
            if bids.len() + asks.len() > space.max_orders {
                continue;
            }
            if let (Some(b), Some(a)) = (bids.first(), asks.first()) {
                if b.0 >= a.0 {
                    continue;
                }
            }
            keys.push(BookKey {
                bids: bids.clone(),
                asks: asks.clone(),
            });
        }
    }
    keys.sort();
    let positions = keys
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, k)| (k, i))
        .collect();
    Ok(StateIndex {
        space: space.clone(),
        keys,
        positions,
    })
}

/// Sparse generator. `columns[i]` lists `(j, rate)` for transitions `i -> j`,
/// `j != i`, sorted by `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    columns: Vec<Vec<(usize, f64)>>,
    diagonal: Vec<f64>,
}

impl GeneratorMatrix {
    pub fn dim(&self) -> usize {
        self.diagonal.len()
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diagonal
    }

    pub fn column(&self, i: usize) -> &[(usize, f64)] {
        &self.columns[i]
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        if row == col {
            return self.diagonal[col];
        }
        self.columns[col]
            .iter()
            .find(|(j, _)| *j == row)
            .map_or(0.0, |e| e.1)
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.columns
            .iter()
            .zip(&self.diagonal)
            .map(|(col, d)| d + col.iter().map(|e| e.1).sum::<f64>())
            .collect()
    }

    pub fn min_off_diagonal(&self) -> f64 {
        self.columns
            .iter()
            .flatten()
            .map(|e| e.1)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_exit_rate(&self) -> f64 {
        self.diagonal.iter().map(|d| -d).fold(0.0, f64::max)
    }

    pub fn nonzeros(&self) -> usize {
        self.columns.iter().map(Vec::len).sum::<usize>() + self.dim()
    }

    /// `H v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.diagonal.iter().zip(v).map(|(d, x)| d * x).collect();
        for (i, col) in self.columns.iter().enumerate() {
            let x = v[i];
            if x == 0.0 {
                continue;
            }
            for &(j, rate) in col {
                out[j] += rate * x;
            }
        }
        out
    }
}

/// Assembles `H` from the event-rate table of every indexed state. The
/// model should be capped to the index cutoffs; any transition leaving the
/// index is an error. States with no outgoing rate get a zero column.
pub fn build_generator(
    model: &RateModel,
    index: &StateIndex,
) -> Result<GeneratorMatrix, OracleError> {
    let columns: Vec<(Vec<(usize, f64)>, f64)> = (0..index.len())
        .into_par_iter()
        .map(|i| {
            let state = index.state(i)?;
            let table = match event_table(model, &state) {
                Ok(t) => t,
                Err(RateError::AbsorbingState) => return Ok((Vec::new(), 0.0)),
                Err(e) => return Err(e.into()),
            };
            let mut column: Vec<(usize, f64)> = Vec::new();
            for &(event, rate) in &table.entries {
                let mut next = state.clone();
                apply_event(&mut next, &event, 0.0)?;
                let key = next.key();
                let j = index.position(&key).ok_or_else(|| OracleError::Escape {
                    from: index.key(i).to_string(),
                    to: key.to_string(),
                })?;
                debug_assert_ne!(i, j, "elementary events always change the state");
                match column.iter_mut().find(|e| e.0 == j) {
                    Some(e) => e.1 += rate,
                    None => column.push((j, rate)),
                }
            }
            column.sort_by_key(|e| e.0);
            let exit: f64 = column.iter().map(|e| e.1).sum();
            Ok((column, -exit))
        })
        .collect::<Result<_, OracleError>>()?;
    let (columns, diagonal) = columns.into_iter().unzip();
    Ok(GeneratorMatrix { columns, diagonal })
}

/// Mixed state over a [`StateIndex`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(p: Vec<f64>) -> Result<Self, OracleError> {
        if let Some(x) = p.iter().find(|x| !x.is_finite()) {
            return Err(OracleError::NonFinite(format!("entry {x}")));
        }
        if let Some(x) = p.iter().find(|x| **x < -1e-12) {
            return Err(OracleError::InvalidVector(format!("negative entry {x}")));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(OracleError::InvalidVector(format!(
                "entries sum to {total}"
            )));
        }
        Ok(ProbabilityVector(p))
    }

    pub fn point_mass(dim: usize, at: usize) -> Self {
        let mut p = vec![0.0; dim];
        p[at] = 1.0;
        ProbabilityVector(p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `Σ_k value_k^order p_k`.
    pub fn expectation(&self, values: &[f64], order: i32) -> Result<f64, OracleError> {
        if values.len() != self.len() {
            return Err(OracleError::DimensionMismatch(values.len(), self.len()));
        }
        Ok(self
            .0
            .iter()
            .zip(values)
            .map(|(p, v)| p * v.powi(order))
            .sum())
    }
}

/// `exp(H t) p0` by uniformization. Long horizons are split into chunks
/// so the leading Poisson weight stays representable; the tail tolerance
/// is shared out across chunks.
pub fn evolve(
    p0: &ProbabilityVector,
    h: &GeneratorMatrix,
    t: f64,
) -> Result<ProbabilityVector, OracleError> {
    if !t.is_finite() {
        return Err(OracleError::NonFinite(format!("time {t}")));
    }
    if t < 0.0 {
        return Err(OracleError::InvalidVector(format!("negative time {t}")));
    }
    if p0.len() != h.dim() {
        return Err(OracleError::DimensionMismatch(p0.len(), h.dim()));
    }
    let rate = h.max_exit_rate();
    if !rate.is_finite() {
        return Err(OracleError::NonFinite("generator diagonal".into()));
    }
    if t == 0.0 || rate == 0.0 {
        return Ok(p0.clone());
    }
    let total = rate * t;
    let chunks = (total / MAX_UNIFORMIZATION_CHUNK).ceil().max(1.0);
    let mean = total / chunks;
    let eps = UNIFORMIZATION_TOLERANCE / chunks;
    // Hard stop far in the Poisson tail.
    let max_terms = (mean + 20.0 * mean.sqrt() + 100.0) as usize;

    let uniformized = |v: &[f64]| -> Vec<f64> {
        let hv = h.apply(v);
        v.iter().zip(hv).map(|(x, y)| x + y / rate).collect()
    };

    let mut v = p0.0.clone();
    for _ in 0..chunks as usize {
        let mut weight = (-mean).exp();
        let mut term = v.clone();
        let mut acc: Vec<f64> = term.iter().map(|x| weight * x).collect();
        let mut covered = weight;
        let mut k = 0usize;
        while covered < 1.0 - eps && k < max_terms {
            k += 1;
            term = uniformized(&term);
            weight *= mean / k as f64;
            for (a, x) in acc.iter_mut().zip(&term) {
                *a += weight * x;
            }
            covered += weight;
        }
        v = acc;
    }
    for x in &mut v {
        *x = x.max(0.0);
    }
    let mass: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= mass);
    ProbabilityVector::new(v)
}

/// `E[O^order; p(t)]` for per-state observable values.
pub fn exact_moment(
    h: &GeneratorMatrix,
    p0: &ProbabilityVector,
    t: f64,
    values: &[f64],
    order: i32,
) -> Result<f64, OracleError> {
    evolve(p0, h, t)?.expectation(values, order)
}

/// Relative frequencies of observed states over the index.
pub fn empirical_distribution<'a>(
    index: &StateIndex,
    states: impl IntoIterator<Item = &'a BookState>,
) -> Result<Vec<f64>, OracleError> {
    let mut counts = vec![0u64; index.len()];
    let mut n = 0u64;
    for state in states {
        let key = state.key();
        let i = index
            .position(&key)
            .ok_or_else(|| OracleError::UnknownState(key.to_string()))?;
        counts[i] += 1;
        n += 1;
    }
    if n == 0 {
        return Err(OracleError::InvalidVector("no samples".into()));
    }
    Ok(counts.into_iter().map(|c| c as f64 / n as f64).collect())
}

/// Total variation distance `½ Σ |p̂_k − p_k|`.
pub fn compare_distributions(
    empirical: &[f64],
    exact: &ProbabilityVector,
) -> Result<f64, OracleError> {
    if empirical.len() != exact.len() {
        return Err(OracleError::DimensionMismatch(empirical.len(), exact.len()));
    }
    Ok(0.5
        * empirical
            .iter()
            .zip(&exact.0)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TinyModel {
    /// Bids only at level 1, asks only at level 2: no matching.
    Disjoint,
    /// Both sides arrive on levels 1 and 2, so arrivals can trade.
    Overlapping,
}

impl TinyModel {
    pub fn name(self) -> &'static str {
        match self {
            TinyModel::Disjoint => "tiny",
            TinyModel::Overlapping => "tiny-overlap",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(TinyModel::Disjoint),
            "tiny-overlap" => Some(TinyModel::Overlapping),
            _ => None,
        }
    }
}

/// A capped rate model together with the matching state space.
#[derive(Debug, Clone)]
pub struct OracleSetup {
    pub model: RateModel,
    pub space: StateSpace,
}

/// Two-level comparison models: `N_max = 4`, unit orders, `ω = 0.1`,
/// `λ = 6`.
pub fn tiny_setup(variant: TinyModel) -> OracleSetup {
    const MAX_ORDERS: usize = 4;
    let (group, space) = match variant {
        TinyModel::Disjoint => {
            let point = DgxParams::new(1.0, 3.0, 1).expect("valid dgx");
            (
                TraderGroup {
                    share: 1.0,
                    ask: point,
                    bid: point,
                    ask_anchor: 2,
                    bid_anchor: 1,
                },
                StateSpace::new(2, 1, MAX_ORDERS)
                    .with_side_levels(Side::Bid, 1..=1)
                    .with_side_levels(Side::Ask, 2..=2),
            )
        }
        TinyModel::Overlapping => {
            let two = DgxParams::new(1.0, 3.0, 2).expect("valid dgx");
            (
                TraderGroup {
                    share: 1.0,
                    ask: two,
                    bid: two,
                    ask_anchor: 1,
                    bid_anchor: 2,
                },
                StateSpace::new(2, 1, MAX_ORDERS),
            )
        }
    };
    let model = RateModel::new(2, vec![group], 0.1, 6.0, AnchoringMode::StaticSupport)
        .expect("valid tiny model")
        .with_capacity(space.capacity());
    OracleSetup { model, space }
}
