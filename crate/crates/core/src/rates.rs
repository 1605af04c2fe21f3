//! State-dependent transition rates.
//!
//! Arrivals follow per-side mixtures of discrete truncated log-normal (DGX)
//! weights over price-level ranks; every resident order is cancelled at a
//! constant per-order rate. [`event_table`] lists every possible transition
//! out of a state and rescales the raw rates so that they sum to the target
//! event intensity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::book::{BookState, OrderId, PriceLevel, Quantity, Side};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RateError {
    #[error("invalid rate model: {0}")]
    InvalidModel(String),
    #[error("absorbing state: total raw event rate is zero")]
    AbsorbingState,
    #[error("book grid has {book} levels but the rate model expects {model}")]
    GridMismatch { book: PriceLevel, model: PriceLevel },
}

/// Discrete gaussian exponential over ranks `1..=support_size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgxParams {
    pub mu: f64,
    pub sigma: f64,
    pub support_size: u32,
}

impl DgxParams {
    pub fn new(mu: f64, sigma: f64, support_size: u32) -> Result<Self, RateError> {
        let params = DgxParams {
            mu,
            sigma,
            support_size,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<(), RateError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(RateError::InvalidModel(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !self.mu.is_finite() {
            return Err(RateError::InvalidModel("mu must be finite".into()));
        }
        if self.support_size == 0 {
            return Err(RateError::InvalidModel("support_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Weights for ranks `1..=support_size`, normalized to sum to one.
    pub fn pmf(&self) -> Vec<f64> {
        dgx_pmf(self)
    }
}

/// `w(r) ∝ exp(-(ln r - mu)^2 / (2 sigma^2)) / r`, normalized over the support.
pub fn dgx_pmf(params: &DgxParams) -> Vec<f64> {
    let two_var = 2.0 * params.sigma * params.sigma;
    // Log weights, shifted by their maximum so narrow kernels far from the
    // support do not underflow to an all-zero vector.
    let log_w: Vec<f64> = (1..=params.support_size)
        .map(|r| {
            let ln_r = f64::from(r).ln();
            let z = ln_r - params.mu;
            -z * z / two_var - ln_r
        })
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AnchoringMode {
    /// Rank 1 sits at a fixed anchor level per side.
    #[default]
    StaticSupport,
    /// Rank 1 sits at the opposite side's best quote, falling back to the
    /// static anchor while the opposite side is empty.
    OppositeBest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraderGroup {
    pub share: f64,
    pub ask: DgxParams,
    pub bid: DgxParams,
    /// Level of ask rank 1; ranks ascend from here.
    pub ask_anchor: PriceLevel,
    /// Level of bid rank 1; ranks descend from here.
    pub bid_anchor: PriceLevel,
}

/// Cutoffs that make the chain finite. Arrivals whose outcome would exceed
/// them get rate zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capacity {
    pub max_orders: usize,
    pub max_quantity: Quantity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    ArrivalAsk,
    ArrivalBid,
    Cancellation,
}

/// One elementary transition: an order entry or the cancellation of a
/// specific resident order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    Arrival {
        side: Side,
        price_level: PriceLevel,
        quantity: Quantity,
    },
    Cancellation {
        side: Side,
        price_level: PriceLevel,
        quantity: Quantity,
        order_id: OrderId,
    },
}

impl Event {
    pub fn kind(&self) -> EventKind {
        match self {
            Event::Arrival {
                side: Side::Ask, ..
            } => EventKind::ArrivalAsk,
            Event::Arrival {
                side: Side::Bid, ..
            } => EventKind::ArrivalBid,
            Event::Cancellation { .. } => EventKind::Cancellation,
        }
    }

    pub fn side(&self) -> Side {
        match *self {
            Event::Arrival { side, .. } | Event::Cancellation { side, .. } => side,
        }
    }

    pub fn price_level(&self) -> PriceLevel {
        match *self {
            Event::Arrival { price_level, .. } | Event::Cancellation { price_level, .. } => {
                price_level
            }
        }
    }

    pub fn quantity(&self) -> Quantity {
        match *self {
            Event::Arrival { quantity, .. } | Event::Cancellation { quantity, .. } => quantity,
        }
    }

    pub fn target_order(&self) -> Option<OrderId> {
        match *self {
            Event::Arrival { .. } => None,
            Event::Cancellation { order_id, .. } => Some(order_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateModel {
    levels: PriceLevel,
    groups: Vec<TraderGroup>,
    cancel_rate: f64,
    intensity: f64,
    anchoring: AnchoringMode,
    unit_quantity: Quantity,
    capacity: Option<Capacity>,
    // Per-group (ask, bid) DGX weights by rank.
    pmfs: Vec<(Vec<f64>, Vec<f64>)>,
    static_rates: ArrivalRates,
}

impl RateModel {
    pub fn new(
        levels: PriceLevel,
        groups: Vec<TraderGroup>,
        cancel_rate: f64,
        intensity: f64,
        anchoring: AnchoringMode,
    ) -> Result<Self, RateError> {
        let invalid = |msg: String| Err(RateError::InvalidModel(msg));
        if levels == 0 {
            return invalid("grid must have at least one level".into());
        }
        if groups.is_empty() {
            return invalid("at least one trader group is required".into());
        }
        if !(cancel_rate >= 0.0 && cancel_rate.is_finite()) {
            return invalid(format!("cancellation rate must be >= 0, got {cancel_rate}"));
        }
        if !(intensity > 0.0 && intensity.is_finite()) {
            return invalid(format!("event intensity must be > 0, got {intensity}"));
        }
        let mut share_total = 0.0;
        for (i, g) in groups.iter().enumerate() {
            if !(0.0..=1.0).contains(&g.share) {
                return invalid(format!("group {i}: share {} outside [0, 1]", g.share));
            }
            share_total += g.share;
            g.ask.validate()?;
            g.bid.validate()?;
            let ask_top = u64::from(g.ask_anchor) + u64::from(g.ask.support_size) - 1;
            if g.ask_anchor == 0 || ask_top > u64::from(levels) {
                return invalid(format!(
                    "group {i}: ask support {}..={ask_top} leaves grid 1..={levels}",
                    g.ask_anchor
                ));
            }
            if g.bid_anchor == 0 || g.bid_anchor > levels || g.bid.support_size > g.bid_anchor {
                return invalid(format!(
                    "group {i}: bid support of {} ranks below {} leaves grid 1..={levels}",
                    g.bid.support_size, g.bid_anchor
                ));
            }
        }
        if (share_total - 1.0).abs() > 1e-9 {
            return invalid(format!("group shares sum to {share_total}, expected 1"));
        }
        let pmfs = groups.iter().map(|g| (g.ask.pmf(), g.bid.pmf())).collect();
        let mut model = RateModel {
            levels,
            groups,
            cancel_rate,
            intensity,
            anchoring,
            unit_quantity: 1,
            capacity: None,
            pmfs,
            static_rates: ArrivalRates::zeros(levels, 1),
        };
        model.static_rates = model.mixture(None, None);
        Ok(model)
    }

    /// Arrival quantity for every order entry (default 1).
    pub fn with_unit_quantity(mut self, quantity: Quantity) -> Result<Self, RateError> {
        if quantity == 0 {
            return Err(RateError::InvalidModel("unit quantity must be >= 1".into()));
        }
        self.unit_quantity = quantity;
        self.static_rates = self.mixture(None, None);
        Ok(self)
    }

    /// Runs the model in capped mode.
    pub fn with_capacity(mut self, capacity: Capacity) -> Self {
        self.capacity = Some(capacity);
        self
    }

    pub fn levels(&self) -> PriceLevel {
        self.levels
    }

    pub fn groups(&self) -> &[TraderGroup] {
        &self.groups
    }

    pub fn cancel_rate(&self) -> f64 {
        self.cancel_rate
    }

    pub fn intensity(&self) -> f64 {
        self.intensity
    }

    pub fn anchoring(&self) -> AnchoringMode {
        self.anchoring
    }

    pub fn unit_quantity(&self) -> Quantity {
        self.unit_quantity
    }

    pub fn capacity(&self) -> Option<Capacity> {
        self.capacity
    }

    /// DGX weights of one group on one side, by rank.
    pub fn group_pmf(&self, group: usize, side: Side) -> &[f64] {
        let (ask, bid) = &self.pmfs[group];
        match side {
            Side::Ask => ask,
            Side::Bid => bid,
        }
    }

    fn mixture(
        &self,
        ask_rank1: Option<PriceLevel>,
        bid_rank1: Option<PriceLevel>,
    ) -> ArrivalRates {
        let mut rates = ArrivalRates::zeros(self.levels, self.unit_quantity);
        for (g, (ask_pmf, bid_pmf)) in self.groups.iter().zip(&self.pmfs) {
            let ask_start = i64::from(ask_rank1.unwrap_or(g.ask_anchor));
            for (r, w) in ask_pmf.iter().enumerate() {
                rates.deposit(Side::Ask, ask_start + r as i64, g.share * w);
            }
            let bid_start = i64::from(bid_rank1.unwrap_or(g.bid_anchor));
            for (r, w) in bid_pmf.iter().enumerate() {
                rates.deposit(Side::Bid, bid_start - r as i64, g.share * w);
            }
        }
        rates
    }

    fn check_grid(&self, state: &BookState) -> Result<(), RateError> {
        if state.levels() != self.levels {
            return Err(RateError::GridMismatch {
                book: state.levels(),
                model: self.levels,
            });
        }
        Ok(())
    }
}

/// Raw (unnormalized) arrival rates per side and level.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalRates {
    /// Index `level - 1`.
    pub ask: Vec<f64>,
    pub bid: Vec<f64>,
    pub quantity: Quantity,
    /// Mass mapped outside the grid and dropped.
    pub truncated_mass: f64,
}

impl ArrivalRates {
    fn zeros(levels: PriceLevel, quantity: Quantity) -> Self {
        ArrivalRates {
            ask: vec![0.0; levels as usize],
            bid: vec![0.0; levels as usize],
            quantity,
            truncated_mass: 0.0,
        }
    }

    fn deposit(&mut self, side: Side, level: i64, mass: f64) {
        let queue = match side {
            Side::Ask => &mut self.ask,
            Side::Bid => &mut self.bid,
        };
        match usize::try_from(level - 1)
            .ok()
            .and_then(|i| queue.get_mut(i))
        {
            Some(slot) => *slot += mass,
            None => self.truncated_mass += mass,
        }
    }

    pub fn rate(&self, side: Side, level: PriceLevel) -> f64 {
        let queue = match side {
            Side::Ask => &self.ask,
            Side::Bid => &self.bid,
        };
        level
            .checked_sub(1)
            .and_then(|i| queue.get(i as usize))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn side_total(&self, side: Side) -> f64 {
        match side {
            Side::Ask => self.ask.iter().sum(),
            Side::Bid => self.bid.iter().sum(),
        }
    }
}

pub fn arrival_rates(model: &RateModel, state: &BookState) -> Result<ArrivalRates, RateError> {
    model.check_grid(state)?;
    Ok(match model.anchoring {
        AnchoringMode::StaticSupport => model.static_rates.clone(),
        AnchoringMode::OppositeBest => model.mixture(state.best_bid(), state.best_ask()),
    })
}

/// Raw per-order cancellation rates in the book's bid-then-ask priority order.
pub fn cancellation_rates(
    model: &RateModel,
    state: &BookState,
) -> Result<Vec<(OrderId, f64)>, RateError> {
    model.check_grid(state)?;
    Ok(state.orders().map(|o| (o.id, model.cancel_rate)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRateTable {
    /// Normalized rates, summing to the model's event intensity.
    pub entries: Vec<(Event, f64)>,
    /// Raw total rate before normalization.
    pub raw_total: f64,
    /// Factor `intensity / raw_total` applied to every raw rate.
    pub normalization: f64,
    pub truncated_mass: f64,
    /// Arrival mass removed because the model's capacity would be exceeded.
    pub capped_mass: f64,
}

impl EventRateTable {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|(_, r)| r).sum()
    }

    pub fn total_where(&self, pred: impl Fn(&Event) -> bool) -> f64 {
        self.entries
            .iter()
            .filter(|(e, _)| pred(e))
            .map(|(_, r)| r)
            .sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn exceeds_capacity(
    state: &BookState,
    side: Side,
    level: PriceLevel,
    qty: Quantity,
    cap: Capacity,
) -> bool {
    if qty > cap.max_quantity {
        return true;
    }
    let fill = state.preview_submit(side, level, qty);
    let after = state.order_count() - fill.consumed_orders + usize::from(fill.remainder > 0);
    after > cap.max_orders
}

/// All transitions out of `state` with positive rate, normalized to the
/// model's event intensity.
///
/// Entry order is fixed: ask arrivals by ascending level, bid arrivals by
/// ascending level, then cancellations by ascending order sequence.
pub fn event_table(model: &RateModel, state: &BookState) -> Result<EventRateTable, RateError> {
    let arrivals = arrival_rates(model, state)?;
    let mut cancels = cancellation_rates(model, state)?;
    cancels.sort_unstable_by_key(|(id, _)| *id);

    let mut raw: Vec<(Event, f64)> = Vec::with_capacity(2 * model.levels as usize + cancels.len());
    let mut capped_mass = 0.0;
    for side in [Side::Ask, Side::Bid] {
        for level in 1..=model.levels {
            let rate = arrivals.rate(side, level);
            if rate <= 0.0 {
                continue;
            }
            if let Some(cap) = model.capacity {
                if exceeds_capacity(state, side, level, arrivals.quantity, cap) {
                    capped_mass += rate;
                    continue;
                }
            }
            raw.push((
                Event::Arrival {
                    side,
                    price_level: level,
                    quantity: arrivals.quantity,
                },
                rate,
            ));
        }
    }
    for (id, rate) in cancels {
        if rate <= 0.0 {
            continue;
        }
        let order = state.find(id).expect("cancellation target is resident");
        raw.push((
            Event::Cancellation {
                side: order.side,
                price_level: order.price_level,
                quantity: order.quantity,
                order_id: id,
            },
            rate,
        ));
    }

    let mut table = EventRateTable::normalized(raw, model.intensity)?;
    table.truncated_mass = arrivals.truncated_mass;
    table.capped_mass = capped_mass;
    Ok(table)
}

impl EventRateTable {
    /// Rescales raw rates so they sum to `intensity`.
    pub fn normalized(mut raw: Vec<(Event, f64)>, intensity: f64) -> Result<Self, RateError> {
        let raw_total: f64 = raw.iter().map(|(_, r)| r).sum();
        if raw_total <= 0.0 {
            return Err(RateError::AbsorbingState);
        }
        let normalization = intensity / raw_total;
        for entry in &mut raw {
            entry.1 *= normalization;
        }
        Ok(EventRateTable {
            entries: raw,
            raw_total,
            normalization,
            truncated_mass: 0.0,
            capped_mass: 0.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::book::empty_book;
    use proptest::prelude::*;

    fn scenario1() -> RateModel {
        let dgx = DgxParams::new(1.0, 3.0, 12).unwrap();
        RateModel::new(
            20,
            vec![TraderGroup {
                share: 1.0,
                ask: dgx,
                bid: dgx,
                ask_anchor: 9,
                bid_anchor: 12,
            }],
            0.1,
            6.0,
            AnchoringMode::StaticSupport,
        )
        .unwrap()
    }

    fn scenario2() -> RateModel {
        let g1 = DgxParams::new(1.0, 3.0, 12).unwrap();
        let g2 = DgxParams::new(4.0, 1.0, 14).unwrap();
        RateModel::new(
            20,
            vec![
                TraderGroup {
                    share: 0.7,
                    ask: g1,
                    bid: g1,
                    ask_anchor: 9,
                    bid_anchor: 12,
                },
                TraderGroup {
                    share: 0.3,
                    ask: g2,
                    bid: g2,
                    ask_anchor: 7,
                    bid_anchor: 14,
                },
            ],
            0.1,
            6.0,
            AnchoringMode::StaticSupport,
        )
        .unwrap()
    }

    #[test]
    fn single_rank_support_is_point_mass() {
        assert_eq!(dgx_pmf(&DgxParams::new(0.3, 2.0, 1).unwrap()), vec![1.0]);
    }

    #[test]
    fn dgx_formula_by_direct_evaluation() {
        // mu = 1, sigma = 3 on two ranks, evaluated by hand:
        // w1 = exp(-1/18), w2 = exp(-(ln2 - 1)^2 / 18) / 2
        let w1 = (-1.0f64 / 18.0).exp();
        let w2 = (-(2f64.ln() - 1.0).powi(2) / 18.0).exp() / 2.0;
        let pmf = dgx_pmf(&DgxParams::new(1.0, 3.0, 2).unwrap());
        assert!((pmf[0] - w1 / (w1 + w2)).abs() < 1e-15);
        assert!((pmf[1] - w2 / (w1 + w2)).abs() < 1e-15);
    }

    #[test]
    fn scenario1_shape_falls_off_from_rank_one() {
        let pmf = dgx_pmf(&DgxParams::new(1.0, 3.0, 12).unwrap());
        assert!(pmf.windows(2).all(|w| w[0] > w[1]));
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scenario2_group_puts_mass_deep() {
        // exp(-(ln r - 4)^2 / 2) / r peaks at r = e^3 ~ 20, beyond the
        // 14-rank support, so the weights rise all the way to the last rank.
        let pmf = dgx_pmf(&DgxParams::new(4.0, 1.0, 14).unwrap());
        let mode = pmf
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
            + 1;
        assert_eq!(mode, 14);
        assert!(pmf[0] < 0.01);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(DgxParams::new(1.0, 0.0, 3).is_err());
        assert!(DgxParams::new(1.0, 1.0, 0).is_err());
        let dgx = DgxParams::new(1.0, 3.0, 12).unwrap();
        let group = |share, ask_anchor| TraderGroup {
            share,
            ask: dgx,
            bid: dgx,
            ask_anchor,
            bid_anchor: 12,
        };
        let build = |groups| RateModel::new(20, groups, 0.1, 6.0, AnchoringMode::StaticSupport);
        assert!(build(vec![group(0.9, 9)]).is_err());
        assert!(build(vec![group(1.0, 10)]).is_err());
        assert!(RateModel::new(
            20,
            vec![group(1.0, 9)],
            0.1,
            0.0,
            AnchoringMode::StaticSupport
        )
        .is_err());
    }

    #[test]
    fn scenario1_supports_and_mirror_symmetry() {
        let m = scenario1();
        let rates = arrival_rates(&m, &empty_book(20).unwrap()).unwrap();
        for level in 1..=20u32 {
            assert_eq!(
                rates.rate(Side::Bid, level) > 0.0,
                level <= 12,
                "bid {level}"
            );
            assert_eq!(
                rates.rate(Side::Ask, level) > 0.0,
                level >= 9,
                "ask {level}"
            );
        }
        for rank in 1..=12u32 {
            assert_eq!(
                rates.rate(Side::Bid, 13 - rank),
                rates.rate(Side::Ask, 8 + rank)
            );
        }
        assert!((rates.side_total(Side::Ask) - 1.0).abs() < 1e-12);
        assert!((rates.side_total(Side::Bid) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scenario2_is_share_weighted_mixture() {
        let m = scenario2();
        let rates = arrival_rates(&m, &empty_book(20).unwrap()).unwrap();
        let g1 = dgx_pmf(&DgxParams::new(1.0, 3.0, 12).unwrap());
        let g2 = dgx_pmf(&DgxParams::new(4.0, 1.0, 14).unwrap());
        for level in 1..=20u32 {
            let ask1 = if (9..=20).contains(&level) {
                g1[(level - 9) as usize]
            } else {
                0.0
            };
            let ask2 = if (7..=20).contains(&level) {
                g2[(level - 7) as usize]
            } else {
                0.0
            };
            let expected = 0.7 * ask1 + 0.3 * ask2;
            assert!((rates.rate(Side::Ask, level) - expected).abs() < 1e-15);
        }
        assert!((rates.side_total(Side::Bid) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cancellation_rates_are_per_order() {
        let m = scenario1();
        let mut b = empty_book(20).unwrap();
        assert!(cancellation_rates(&m, &b).unwrap().is_empty());
        b.submit(Side::Bid, 5, 1, 0.0).unwrap();
        b.submit(Side::Bid, 6, 1, 0.0).unwrap();
        let c = cancellation_rates(&m, &b).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|(_, r)| *r == 0.1));
        for _ in 0..3 {
            b.submit(Side::Bid, 6, 1, 0.0).unwrap();
        }
        let level6: f64 = cancellation_rates(&m, &b)
            .unwrap()
            .iter()
            .filter(|(id, _)| b.find(*id).unwrap().price_level == 6)
            .map(|(_, r)| r)
            .sum();
        assert!((level6 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn two_resident_bids_reproduce_relative_likelihoods() {
        let m = scenario1();
        let mut b = empty_book(20).unwrap();
        b.submit(Side::Bid, 3, 1, 0.0).unwrap();
        b.submit(Side::Bid, 4, 1, 0.0).unwrap();
        let t = event_table(&m, &b).unwrap();
        let bid = t.total_where(|e| e.kind() == EventKind::ArrivalBid);
        let arrivals = t.total_where(|e| !matches!(e, Event::Cancellation { .. }));
        let cancel = t.total_where(|e| e.kind() == EventKind::Cancellation);
        assert!((bid / cancel - 5.0).abs() < 1e-12);
        assert!((arrivals / cancel - 10.0).abs() < 1e-12);
        assert!((t.total() - 6.0).abs() < 1e-12);
        assert!((t.normalization - 6.0 / 2.2).abs() < 1e-12);
    }

    #[test]
    fn empty_book_has_only_arrivals() {
        let t = event_table(&scenario1(), &empty_book(20).unwrap()).unwrap();
        assert!(t.entries.iter().all(|(e, _)| e.target_order().is_none()));
        assert!((t.raw_total - 2.0).abs() < 1e-12);
        assert!((t.total() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn capacity_blocks_resting_arrivals() {
        let dgx = DgxParams::new(1.0, 3.0, 1).unwrap();
        let m = RateModel::new(
            2,
            vec![TraderGroup {
                share: 1.0,
                ask: dgx,
                bid: dgx,
                ask_anchor: 2,
                bid_anchor: 1,
            }],
            0.1,
            6.0,
            AnchoringMode::StaticSupport,
        )
        .unwrap()
        .with_capacity(Capacity {
            max_orders: 1,
            max_quantity: 1,
        });
        let mut b = empty_book(2).unwrap();
        b.submit(Side::Bid, 1, 1, 0.0).unwrap();
        let t = event_table(&m, &b).unwrap();
        assert_eq!(t.len(), 1);
        assert!(matches!(t.entries[0].0, Event::Cancellation { .. }));
        assert!((t.entries[0].1 - 6.0).abs() < 1e-12);
        assert!((t.capped_mass - 2.0).abs() < 1e-12);
    }

    #[test]
    fn absorbing_state_detected() {
        let dgx = DgxParams::new(1.0, 3.0, 1).unwrap();
        let m = RateModel::new(
            2,
            vec![TraderGroup {
                share: 1.0,
                ask: dgx,
                bid: dgx,
                ask_anchor: 2,
                bid_anchor: 1,
            }],
            0.0,
            6.0,
            AnchoringMode::StaticSupport,
        )
        .unwrap()
        .with_capacity(Capacity {
            max_orders: 0,
            max_quantity: 1,
        });
        assert_eq!(
            event_table(&m, &empty_book(2).unwrap()),
            Err(RateError::AbsorbingState)
        );
    }

    #[test]
    fn opposite_best_anchoring_follows_quotes() {
        let dgx = DgxParams::new(1.0, 3.0, 3).unwrap();
        let m = RateModel::new(
            10,
            vec![TraderGroup {
                share: 1.0,
                ask: dgx,
                bid: dgx,
                ask_anchor: 5,
                bid_anchor: 6,
            }],
            0.1,
            6.0,
            AnchoringMode::OppositeBest,
        )
        .unwrap();
        let mut b = empty_book(10).unwrap();
        let r = arrival_rates(&m, &b).unwrap();
        assert!(r.rate(Side::Ask, 5) > 0.0 && r.rate(Side::Ask, 4) == 0.0);
        b.submit(Side::Bid, 9, 1, 0.0).unwrap();
        let r = arrival_rates(&m, &b).unwrap();
        // Ask ranks 1..3 map to 9, 10, 11; level 11 is off grid.
        assert!(r.rate(Side::Ask, 9) > 0.0 && r.rate(Side::Ask, 10) > 0.0);
        assert!((r.truncated_mass - dgx.pmf()[2]).abs() < 1e-15);
    }

    #[test]
    fn grid_mismatch_is_reported() {
        assert!(matches!(
            event_table(&scenario1(), &empty_book(10).unwrap()),
            Err(RateError::GridMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn pmf_is_a_distribution(mu in -3.0f64..6.0, sigma in 0.05f64..5.0, n in 1u32..40) {
            let pmf = dgx_pmf(&DgxParams::new(mu, sigma, n).unwrap());
            prop_assert_eq!(pmf.len(), n as usize);
            prop_assert!(pmf.iter().all(|w| *w >= 0.0));
            prop_assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn table_normalized_and_cancellation_linear(
            orders in proptest::collection::vec((any::<bool>(), 1u32..=20), 0..30)
        ) {
            let m = scenario2();
            let mut b = empty_book(20).unwrap();
            for (bid, k) in orders {
                b.submit(if bid { Side::Bid } else { Side::Ask }, k, 1, 0.0).unwrap();
            }
            let t = event_table(&m, &b).unwrap();
            prop_assert!(t.entries.iter().all(|(_, r)| *r > 0.0));
            prop_assert!((t.total() - 6.0).abs() < 1e-9);
            let cancel_raw = t.total_where(|e| e.kind() == EventKind::Cancellation) / t.normalization;
            prop_assert!((cancel_raw - 0.1 * b.order_count() as f64).abs() < 1e-9);
        }

        #[test]
        fn scaling_raw_rates_leaves_table_unchanged(
            scale in 0.001f64..1000.0,
            orders in proptest::collection::vec((any::<bool>(), 1u32..=20), 0..20)
        ) {
            let m = scenario1();
            let mut b = empty_book(20).unwrap();
            for (bid, k) in orders {
                b.submit(if bid { Side::Bid } else { Side::Ask }, k, 1, 0.0).unwrap();
            }
            let t = event_table(&m, &b).unwrap();
            let raw: Vec<(Event, f64)> = t.entries.iter().map(|&(e, r)| (e, r / t.normalization * scale)).collect();
            let rescaled = EventRateTable::normalized(raw, m.intensity()).unwrap();
            for ((e1, r1), (e2, r2)) in t.entries.iter().zip(&rescaled.entries) {
                prop_assert_eq!(e1, e2);
                prop_assert!((r1 - r2).abs() < 1e-12);
            }
        }
    }
}
