//! Deterministic limit order book under price-time priority.
//!
//! The book lives on a finite integer price grid `1..=levels`. Bids are kept
//! best-first (price descending, then submission sequence ascending) and asks
//! best-first (price ascending, then sequence ascending), so index 0 of each
//! side is the order with highest priority.
//!
//! Continuous trading executes an incoming order against resident orders at
//! the resident's price until it no longer crosses; any remainder rests. A
//! call phase can collect orders without executing them, after which
//! [`BookState::auction_match`] clears the crossed book at the
//! volume-maximizing price.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type PriceLevel = u32;
pub type Quantity = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Ask,
    Bid,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Ask => Side::Bid,
            Side::Bid => Side::Ask,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Ask => "ask",
            Side::Bid => "bid",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Engine-assigned order identifier. Identifiers are handed out from a
/// strictly increasing counter, so they double as the submission sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OrderId(pub u64);

impl fmt::Display for OrderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Order {
    pub id: OrderId,
    pub side: Side,
    pub price_level: PriceLevel,
    pub quantity: Quantity,
}

impl Order {
    pub fn seq(&self) -> u64 {
        self.id.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transaction {
    pub price_level: PriceLevel,
    pub quantity: Quantity,
    pub time: f64,
    /// Side of the incoming order; `None` for auction prints.
    pub aggressor_side: Option<Side>,
}

impl Transaction {
    pub fn volume(&self) -> u64 {
        u64::from(self.price_level) * u64::from(self.quantity)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BookError {
    #[error("price level {level} outside grid 1..={levels}")]
    PriceOutOfGrid {
        level: PriceLevel,
        levels: PriceLevel,
    },
    #[error("order quantity must be at least 1")]
    ZeroQuantity,
    #[error("vacuum annihilation: no resident {side} order with id {id}")]
    VacuumAnnihilation { side: Side, id: OrderId },
    #[error(
        "delta mismatch for order {id}: resident {side} {resident_quantity}@{resident_level}, \
         requested {requested_quantity}@{requested_level}"
    )]
    DeltaMismatch {
        id: OrderId,
        side: Side,
        resident_level: PriceLevel,
        resident_quantity: Quantity,
        requested_level: PriceLevel,
        requested_quantity: Quantity,
    },
    #[error("grid must have at least one price level")]
    EmptyGrid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InvariantViolation {
    Ordering {
        side: Side,
        index: usize,
    },
    Crossed {
        best_bid: PriceLevel,
        best_ask: PriceLevel,
    },
    DuplicateId(OrderId),
    ZeroQuantity(OrderId),
    OutOfGrid(OrderId),
    WrongSide(OrderId),
    StaleSequence(OrderId),
}

/// Result of a submission in continuous trading.
#[derive(Debug, Clone, PartialEq)]
pub struct Submission {
    /// Id of the resting remainder, if any quantity was left over.
    pub resting: Option<OrderId>,
    pub transactions: Vec<Transaction>,
}

impl Submission {
    pub fn traded_quantity(&self) -> u64 {
        self.transactions
            .iter()
            .map(|t| u64::from(t.quantity))
            .sum()
    }
}

/// What a submission would do, computed without touching the book.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FillPreview {
    pub traded: Quantity,
    /// Resident orders that would be removed entirely.
    pub consumed_orders: usize,
    pub remainder: Quantity,
}

/// Price-time normal form of a book without ids: per side, the
/// `(price_level, quantity)` sequence in priority order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BookKey {
    pub bids: Vec<(PriceLevel, Quantity)>,
    pub asks: Vec<(PriceLevel, Quantity)>,
}

impl BookKey {
    pub fn vacuum() -> Self {
        BookKey {
            bids: Vec::new(),
            asks: Vec::new(),
        }
    }

    pub fn order_count(&self) -> usize {
        self.bids.len() + self.asks.len()
    }
}

impl fmt::Display for BookKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fmt_side = |orders: &[(PriceLevel, Quantity)]| {
            orders
                .iter()
                .map(|(k, q)| format!("{q}@{k}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        write!(f, "[{} | {}]", fmt_side(&self.bids), fmt_side(&self.asks))
    }
}

/// A pure book state: resident orders on both sides plus the last print.
#[derive(Debug, Clone, PartialEq)]
pub struct BookState {
    levels: PriceLevel,
    bids: Vec<Order>,
    asks: Vec<Order>,
    last_transaction: Option<Transaction>,
    next_seq: u64,
}

/// The empty book on a grid of `levels` price levels.
pub fn empty_book(levels: PriceLevel) -> Result<BookState, BookError> {
    BookState::new(levels)
}

impl BookState {
    pub fn new(levels: PriceLevel) -> Result<Self, BookError> {
        if levels == 0 {
            return Err(BookError::EmptyGrid);
        }
        Ok(BookState {
            levels,
            bids: Vec::new(),
            asks: Vec::new(),
            last_transaction: None,
            next_seq: 1,
        })
    }

    /// Rebuilds a book from its normal form. Sequence numbers are assigned
    /// in priority order, bids first.
    pub fn from_key(levels: PriceLevel, key: &BookKey) -> Result<Self, BookError> {
        let mut book = BookState::new(levels)?;
        for &(level, quantity) in &key.bids {
            book.validate(level, quantity)?;
            let id = book.take_id();
            book.bids.push(Order {
                id,
                side: Side::Bid,
                price_level: level,
                quantity,
            });
        }
        for &(level, quantity) in &key.asks {
            book.validate(level, quantity)?;
            let id = book.take_id();
            book.asks.push(Order {
                id,
                side: Side::Ask,
                price_level: level,
                quantity,
            });
        }
        Ok(book)
    }

    pub fn levels(&self) -> PriceLevel {
        self.levels
    }

    /// Bids in priority order.
    pub fn bids(&self) -> &[Order] {
        &self.bids
    }

    /// Asks in priority order.
    pub fn asks(&self) -> &[Order] {
        &self.asks
    }

    pub fn side(&self, side: Side) -> &[Order] {
        match side {
            Side::Ask => &self.asks,
            Side::Bid => &self.bids,
        }
    }

    pub fn last_transaction(&self) -> Option<&Transaction> {
        self.last_transaction.as_ref()
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn is_empty(&self) -> bool {
        self.bids.is_empty() && self.asks.is_empty()
    }

    pub fn order_count(&self) -> usize {
        self.bids.len() + self.asks.len()
    }

    pub fn best_bid(&self) -> Option<PriceLevel> {
        self.bids.first().map(|o| o.price_level)
    }

    pub fn best_ask(&self) -> Option<PriceLevel> {
        self.asks.first().map(|o| o.price_level)
    }

    pub fn is_crossed(&self) -> bool {
        matches!((self.best_bid(), self.best_ask()), (Some(b), Some(a)) if b >= a)
    }

    /// All resident orders, bids then asks, each in priority order.
    pub fn orders(&self) -> impl Iterator<Item = &Order> {
        self.bids.iter().chain(self.asks.iter())
    }

    pub fn find(&self, id: OrderId) -> Option<&Order> {
        self.orders().find(|o| o.id == id)
    }

    pub fn key(&self) -> BookKey {
        let strip = |orders: &[Order]| {
            orders
                .iter()
                .map(|o| (o.price_level, o.quantity))
                .collect::<Vec<_>>()
        };
        BookKey {
            bids: strip(&self.bids),
            asks: strip(&self.asks),
        }
    }

    fn validate(&self, level: PriceLevel, quantity: Quantity) -> Result<(), BookError> {
        if level == 0 || level > self.levels {
            return Err(BookError::PriceOutOfGrid {
                level,
                levels: self.levels,
            });
        }
        if quantity == 0 {
            return Err(BookError::ZeroQuantity);
        }
        Ok(())
    }

    fn take_id(&mut self) -> OrderId {
        let id = OrderId(self.next_seq);
        self.next_seq += 1;
        id
    }

    fn crosses(side: Side, incoming: PriceLevel, resident: PriceLevel) -> bool {
        match side {
            Side::Ask => incoming <= resident,
            Side::Bid => incoming >= resident,
        }
    }

    fn side_mut(&mut self, side: Side) -> &mut Vec<Order> {
        match side {
            Side::Ask => &mut self.asks,
            Side::Bid => &mut self.bids,
        }
    }

    /// Inserts behind every resident order of equal or better priority.
    fn insert_resting(&mut self, order: Order) {
        let level = order.price_level;
        let queue = self.side_mut(order.side);
        let pos = match order.side {
            Side::Bid => queue.partition_point(|o| o.price_level >= level),
            Side::Ask => queue.partition_point(|o| o.price_level <= level),
        };
        queue.insert(pos, order);
    }

    /// Continuous-trading submission. The incoming order walks the opposite
    /// side while it crosses, trading at each resident's price.
    pub fn submit(
        &mut self,
        side: Side,
        price_level: PriceLevel,
        quantity: Quantity,
        time: f64,
    ) -> Result<Submission, BookError> {
        self.validate(price_level, quantity)?;
        let id = self.take_id();
        let mut remaining = quantity;
        let mut transactions = Vec::new();
        let opposite = self.side_mut(side.opposite());
        // Consumed residents sit at the head of the queue; drain them at once.
        let mut consumed = 0;
        while remaining > 0 {
            let Some(resident) = opposite.get_mut(consumed) else {
                break;
            };
            if !Self::crosses(side, price_level, resident.price_level) {
                break;
            }
            let traded = remaining.min(resident.quantity);
            transactions.push(Transaction {
                price_level: resident.price_level,
                quantity: traded,
                time,
                aggressor_side: Some(side),
            });
            remaining -= traded;
            resident.quantity -= traded;
            if resident.quantity == 0 {
                consumed += 1;
            }
        }
        opposite.drain(..consumed);
        if let Some(last) = transactions.last() {
            self.last_transaction = Some(*last);
        }
        let resting = (remaining > 0).then(|| {
            self.insert_resting(Order {
                id,
                side,
                price_level,
                quantity: remaining,
            });
            id
        });
        Ok(Submission {
            resting,
            transactions,
        })
    }

    /// Computes the effect of [`submit`](Self::submit) without mutating.
    pub fn preview_submit(
        &self,
        side: Side,
        price_level: PriceLevel,
        quantity: Quantity,
    ) -> FillPreview {
        let mut remaining = quantity;
        let mut consumed_orders = 0;
        for resident in self.side(side.opposite()) {
            if remaining == 0 || !Self::crosses(side, price_level, resident.price_level) {
                break;
            }
            let traded = remaining.min(resident.quantity);
            remaining -= traded;
            if traded == resident.quantity {
                consumed_orders += 1;
            }
        }
        FillPreview {
            traded: quantity - remaining,
            consumed_orders,
            remainder: remaining,
        }
    }

    /// Call-phase submission: the order is queued at its price-time position
    /// without executing, so the book may become crossed.
    pub fn collect(
        &mut self,
        side: Side,
        price_level: PriceLevel,
        quantity: Quantity,
    ) -> Result<OrderId, BookError> {
        self.validate(price_level, quantity)?;
        let id = self.take_id();
        self.insert_resting(Order {
            id,
            side,
            price_level,
            quantity,
        });
        Ok(id)
    }

    /// Removes a resident order in full. The `(side, price_level, quantity)`
    /// triple must match the resident order exactly.
    pub fn cancel(
        &mut self,
        side: Side,
        price_level: PriceLevel,
        quantity: Quantity,
        id: OrderId,
    ) -> Result<Order, BookError> {
        let Some(pos) = self.side(side).iter().position(|o| o.id == id) else {
            if let Some(other) = self.side(side.opposite()).iter().find(|o| o.id == id) {
                return Err(BookError::DeltaMismatch {
                    id,
                    side: other.side,
                    resident_level: other.price_level,
                    resident_quantity: other.quantity,
                    requested_level: price_level,
                    requested_quantity: quantity,
                });
            }
            return Err(BookError::VacuumAnnihilation { side, id });
        };
        let resident = &self.side(side)[pos];
        if resident.price_level != price_level || resident.quantity != quantity {
            return Err(BookError::DeltaMismatch {
                id,
                side,
                resident_level: resident.price_level,
                resident_quantity: resident.quantity,
                requested_level: price_level,
                requested_quantity: quantity,
            });
        }
        Ok(self.side_mut(side).remove(pos))
    }

    /// Executable quantity at `price`: `min(bid qty at >= price, ask qty at <= price)`.
    fn executable_at(&self, price: PriceLevel) -> (u64, u64) {
        let demand: u64 = self
            .bids
            .iter()
            .take_while(|o| o.price_level >= price)
            .map(|o| u64::from(o.quantity))
            .sum();
        let supply: u64 = self
            .asks
            .iter()
            .take_while(|o| o.price_level <= price)
            .map(|o| u64::from(o.quantity))
            .sum();
        (demand, supply)
    }

    /// Clearing price of a call auction, or `None` if nothing is executable.
    ///
    /// Candidates are the populated price levels. Among prices with maximal
    /// executable volume the smallest absolute imbalance wins; remaining ties
    /// go to the candidate closest to the midpoint of the tied range, the
    /// lower price on an exact tie.
    pub fn indicative_price(&self) -> Option<PriceLevel> {
        let mut candidates: Vec<PriceLevel> = self.orders().map(|o| o.price_level).collect();
        candidates.sort_unstable();
        candidates.dedup();

        let scored: Vec<(PriceLevel, u64, u64)> = candidates
            .into_iter()
            .map(|p| {
                let (demand, supply) = self.executable_at(p);
                (p, demand.min(supply), demand.abs_diff(supply))
            })
            .collect();
        let best_volume = scored.iter().map(|s| s.1).max()?;
        if best_volume == 0 {
            return None;
        }
        let best_imbalance = scored
            .iter()
            .filter(|s| s.1 == best_volume)
            .map(|s| s.2)
            .min()?;
        let tied: Vec<PriceLevel> = scored
            .iter()
            .filter(|s| s.1 == best_volume && s.2 == best_imbalance)
            .map(|s| s.0)
            .collect();
        let (lo, hi) = (*tied.first()?, *tied.last()?);
        // Distances to the midpoint, doubled to stay in integers.
        let twice_mid = u64::from(lo) + u64::from(hi);
        tied.into_iter()
            .min_by_key(|&p| ((2 * u64::from(p)).abs_diff(twice_mid), p))
    }

    /// Closes the call phase: executes at the clearing price in price-time
    /// priority and records a single print with the total traded quantity.
    /// Partially filled residuals keep their original sequence number.
    pub fn auction_match(&mut self, time: f64) -> Vec<Transaction> {
        let Some(price) = self.indicative_price() else {
            return Vec::new();
        };
        let mut total: u64 = 0;
        let (mut bid_done, mut ask_done) = (0, 0);
        while let (Some(bid), Some(ask)) =
            (self.bids.get_mut(bid_done), self.asks.get_mut(ask_done))
        {
            if bid.price_level < price || ask.price_level > price {
                break;
            }
            let traded = bid.quantity.min(ask.quantity);
            bid.quantity -= traded;
            ask.quantity -= traded;
            total += u64::from(traded);
            if bid.quantity == 0 {
                bid_done += 1;
            }
            if ask.quantity == 0 {
                ask_done += 1;
            }
        }
        self.bids.drain(..bid_done);
        self.asks.drain(..ask_done);
        debug_assert!(total > 0);
        let print = Transaction {
            price_level: price,
            quantity: Quantity::try_from(total).unwrap_or(Quantity::MAX),
            time,
            aggressor_side: None,
        };
        self.last_transaction = Some(print);
        vec![print]
    }

    /// Checks ordering, uncrossedness, unique ids, and positive quantities.
    pub fn check_invariants(&self) -> Result<(), InvariantViolation> {
        self.check_resident_orders()?;
        if let (Some(best_bid), Some(best_ask)) = (self.best_bid(), self.best_ask()) {
            if best_bid >= best_ask {
                return Err(InvariantViolation::Crossed { best_bid, best_ask });
            }
        }
        Ok(())
    }

    /// Same as [`check_invariants`](Self::check_invariants) but allows a
    /// crossed book, as produced during a call phase.
    pub fn check_resident_orders(&self) -> Result<(), InvariantViolation> {
        for (side, queue) in [(Side::Bid, &self.bids), (Side::Ask, &self.asks)] {
            for (index, pair) in queue.windows(2).enumerate() {
                let (a, b) = (&pair[0], &pair[1]);
                let price_ok = match side {
                    Side::Bid => a.price_level > b.price_level,
                    Side::Ask => a.price_level < b.price_level,
                };
                if !(price_ok || (a.price_level == b.price_level && a.id < b.id)) {
                    return Err(InvariantViolation::Ordering {
                        side,
                        index: index + 1,
                    });
                }
            }
            for order in queue {
                if order.side != side {
                    return Err(InvariantViolation::WrongSide(order.id));
                }
                if order.quantity == 0 {
                    return Err(InvariantViolation::ZeroQuantity(order.id));
                }
                if order.price_level == 0 || order.price_level > self.levels {
                    return Err(InvariantViolation::OutOfGrid(order.id));
                }
                if order.id.0 >= self.next_seq {
                    return Err(InvariantViolation::StaleSequence(order.id));
                }
            }
        }
        let mut ids: Vec<OrderId> = self.orders().map(|o| o.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(InvariantViolation::DuplicateId(w[0]));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn book() -> BookState {
        empty_book(20).unwrap()
    }

    #[test]
    fn vacuum_has_no_quotes() {
        let b = book();
        assert!(b.bids().is_empty() && b.asks().is_empty());
        assert!(b.last_transaction().is_none());
        assert_eq!(b.best_bid(), None);
        assert_eq!(b.best_ask(), None);
        assert_eq!(empty_book(0), Err(BookError::EmptyGrid));
    }

    #[test]
    fn submit_into_empty_book_rests() {
        let mut b = book();
        let s = b.submit(Side::Ask, 10, 1, 0.0).unwrap();
        assert!(s.transactions.is_empty());
        assert_eq!(b.key().asks, vec![(10, 1)]);
        assert_eq!(s.resting, Some(b.asks()[0].id));
    }

    #[test]
    fn partial_match_shrinks_resident() {
        let mut b = book();
        b.submit(Side::Bid, 10, 5, 0.0).unwrap();
        let s = b.submit(Side::Ask, 9, 3, 1.0).unwrap();
        assert_eq!(s.transactions.len(), 1);
        let t = s.transactions[0];
        assert_eq!((t.price_level, t.quantity, t.time), (10, 3, 1.0));
        assert_eq!(t.aggressor_side, Some(Side::Ask));
        assert_eq!(b.key().bids, vec![(10, 2)]);
        assert!(b.asks().is_empty());
        assert_eq!(b.last_transaction(), Some(&t));
    }

    #[test]
    fn perfect_match_empties_book() {
        let mut b = book();
        b.submit(Side::Bid, 10, 3, 0.0).unwrap();
        let s = b.submit(Side::Ask, 9, 3, 1.0).unwrap();
        assert_eq!(s.transactions.len(), 1);
        assert_eq!(s.transactions[0].price_level, 10);
        assert_eq!(s.resting, None);
        assert!(b.is_empty());
    }

    #[test]
    fn walking_the_book_across_levels() {
        let mut b = book();
        b.submit(Side::Bid, 10, 1, 0.0).unwrap();
        b.submit(Side::Bid, 9, 1, 0.0).unwrap();
        let s = b.submit(Side::Ask, 8, 3, 2.0).unwrap();
        let prints: Vec<_> = s
            .transactions
            .iter()
            .map(|t| (t.price_level, t.quantity))
            .collect();
        assert_eq!(prints, vec![(10, 1), (9, 1)]);
        assert!(b.bids().is_empty());
        assert_eq!(b.key().asks, vec![(8, 1)]);
        assert_eq!(b.last_transaction().unwrap().price_level, 9);
    }

    #[test]
    fn equal_price_crosses() {
        let mut b = book();
        b.submit(Side::Ask, 10, 1, 0.0).unwrap();
        let s = b.submit(Side::Bid, 10, 1, 0.5).unwrap();
        assert_eq!(s.transactions.len(), 1);
        assert!(b.is_empty());
    }

    #[test]
    fn rejects_bad_submissions() {
        let mut b = book();
        assert_eq!(
            b.submit(Side::Ask, 0, 1, 0.0),
            Err(BookError::PriceOutOfGrid {
                level: 0,
                levels: 20
            })
        );
        assert!(matches!(
            b.submit(Side::Bid, 21, 1, 0.0),
            Err(BookError::PriceOutOfGrid { .. })
        ));
        assert_eq!(b.submit(Side::Bid, 5, 0, 0.0), Err(BookError::ZeroQuantity));
        assert_eq!(b, book());
    }

    #[test]
    fn cancel_only_order() {
        let mut b = book();
        let id = b.submit(Side::Ask, 10, 1, 0.0).unwrap().resting.unwrap();
        b.cancel(Side::Ask, 10, 1, id).unwrap();
        assert!(b.is_empty());
    }

    #[test]
    fn cancel_on_empty_book_is_vacuum_annihilation() {
        let mut b = book();
        assert!(matches!(
            b.cancel(Side::Bid, 10, 1, OrderId(1)),
            Err(BookError::VacuumAnnihilation { .. })
        ));
    }

    #[test]
    fn cancel_with_wrong_level_is_delta_mismatch() {
        let mut b = book();
        let id = b.submit(Side::Bid, 9, 2, 0.0).unwrap().resting.unwrap();
        assert!(matches!(
            b.cancel(Side::Bid, 8, 2, id),
            Err(BookError::DeltaMismatch { .. })
        ));
        assert!(matches!(
            b.cancel(Side::Bid, 9, 1, id),
            Err(BookError::DeltaMismatch { .. })
        ));
        assert!(matches!(
            b.cancel(Side::Ask, 9, 2, id),
            Err(BookError::DeltaMismatch { .. })
        ));
        assert_eq!(b.bids().len(), 1);
    }

    #[test]
    fn cancel_promotes_next_in_time() {
        let mut b = book();
        let first = b.submit(Side::Bid, 9, 1, 0.0).unwrap().resting.unwrap();
        let second = b.submit(Side::Bid, 9, 1, 0.0).unwrap().resting.unwrap();
        assert_eq!(b.bids()[0].id, first);
        b.cancel(Side::Bid, 9, 1, first).unwrap();
        assert_eq!(b.bids().len(), 1);
        assert_eq!(b.bids()[0].id, second);
        assert_eq!(b.best_bid(), Some(9));
    }

    #[test]
    fn time_priority_within_level() {
        let mut b = book();
        let first = b.submit(Side::Ask, 11, 1, 0.0).unwrap().resting.unwrap();
        b.submit(Side::Ask, 12, 1, 0.0).unwrap();
        let second = b.submit(Side::Ask, 11, 1, 0.0).unwrap().resting.unwrap();
        let ids: Vec<_> = b.asks().iter().map(|o| o.id).collect();
        assert_eq!(ids[..2], [first, second]);
        let s = b.submit(Side::Bid, 11, 1, 1.0).unwrap();
        assert_eq!(s.transactions.len(), 1);
        assert_eq!(b.asks()[0].id, second);
    }

    #[test]
    fn auction_clears_at_max_volume() {
        let mut b = book();
        b.collect(Side::Bid, 10, 2).unwrap();
        b.collect(Side::Bid, 9, 1).unwrap();
        b.collect(Side::Ask, 9, 1).unwrap();
        b.collect(Side::Ask, 10, 1).unwrap();
        assert!(b.is_crossed());
        assert_eq!(b.indicative_price(), Some(10));
        let prints = b.auction_match(3.0);
        assert_eq!(prints.len(), 1);
        assert_eq!((prints[0].price_level, prints[0].quantity), (10, 2));
        assert_eq!(prints[0].aggressor_side, None);
        assert_eq!(
            b.key(),
            BookKey {
                bids: vec![(9, 1)],
                asks: vec![]
            }
        );
        b.check_invariants().unwrap();
    }

    #[test]
    fn auction_on_uncrossed_book_is_noop() {
        let mut b = book();
        b.submit(Side::Bid, 9, 1, 0.0).unwrap();
        b.submit(Side::Ask, 11, 1, 0.0).unwrap();
        let before = b.clone();
        assert_eq!(b.indicative_price(), None);
        assert!(b.auction_match(1.0).is_empty());
        assert_eq!(b, before);
        assert_eq!(book().indicative_price(), None);
    }

    #[test]
    fn auction_single_crossing_price() {
        let mut b = book();
        b.collect(Side::Bid, 10, 1).unwrap();
        b.collect(Side::Ask, 10, 1).unwrap();
        let prints = b.auction_match(0.0);
        assert_eq!((prints[0].price_level, prints[0].quantity), (10, 1));
        assert!(b.is_empty());
    }

    #[test]
    fn auction_tie_break_prefers_smaller_imbalance_then_midpoint() {
        // Volume 2 at both 8 and 9; imbalance 3 at 8, 4 at 9.
        let mut b = book();
        b.collect(Side::Bid, 10, 1).unwrap();
        b.collect(Side::Bid, 9, 1).unwrap();
        b.collect(Side::Ask, 9, 1).unwrap();
        b.collect(Side::Ask, 8, 5).unwrap();
        assert_eq!(b.indicative_price(), Some(8));
        // Volume 1 and imbalance 0 at 5 and 10: midpoint 7.5, lower wins.
        let mut b = book();
        b.collect(Side::Bid, 10, 1).unwrap();
        b.collect(Side::Ask, 5, 1).unwrap();
        assert_eq!(b.indicative_price(), Some(5));
    }

    #[test]
    fn preview_matches_submit() {
        let mut b = book();
        b.submit(Side::Bid, 10, 2, 0.0).unwrap();
        b.submit(Side::Bid, 9, 1, 0.0).unwrap();
        let p = b.preview_submit(Side::Ask, 9, 4);
        assert_eq!(
            p,
            FillPreview {
                traded: 3,
                consumed_orders: 2,
                remainder: 1
            }
        );
    }

    #[test]
    fn key_round_trip_preserves_priority() {
        let mut b = book();
        b.submit(Side::Bid, 5, 2, 0.0).unwrap();
        b.submit(Side::Bid, 5, 1, 0.0).unwrap();
        b.submit(Side::Ask, 7, 3, 0.0).unwrap();
        let rebuilt = BookState::from_key(20, &b.key()).unwrap();
        assert_eq!(rebuilt.key(), b.key());
        rebuilt.check_invariants().unwrap();
    }

    #[derive(Debug, Clone)]
    enum Op {
        Submit(Side, PriceLevel, Quantity),
        CancelNth(usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            3 => (prop_oneof![Just(Side::Ask), Just(Side::Bid)], 1u32..=8, 1u32..=3)
                .prop_map(|(s, k, q)| Op::Submit(s, k, q)),
            1 => (0usize..16).prop_map(Op::CancelNth),
        ]
    }

    proptest! {
        #[test]
        fn invariants_hold_over_random_sequences(ops in proptest::collection::vec(op(), 0..40)) {
            let mut b = empty_book(8).unwrap();
            for (i, op) in ops.into_iter().enumerate() {
                match op {
                    Op::Submit(side, k, q) => {
                        let best_opposite: Vec<PriceLevel> =
                            b.side(side.opposite()).iter().map(|o| o.price_level).collect();
                        let s = b.submit(side, k, q, i as f64).unwrap();
                        let rest = s.resting.and_then(|id| b.find(id)).map_or(0, |o| o.quantity);
                        prop_assert_eq!(u64::from(q), s.traded_quantity() + u64::from(rest));
                        for t in &s.transactions {
                            prop_assert!(best_opposite.contains(&t.price_level));
                        }
                    }
                    Op::CancelNth(n) => {
                        let target = b.orders().nth(n).cloned();
                        if let Some(o) = target {
                            b.cancel(o.side, o.price_level, o.quantity, o.id).unwrap();
                        }
                    }
                }
                prop_assert_eq!(b.check_invariants(), Ok(()));
            }
        }

        #[test]
        fn same_side_submissions_commute(
            k1 in 1u32..=10, q1 in 1u32..=3, k2 in 1u32..=10, q2 in 1u32..=3,
            bid in any::<bool>(),
        ) {
            prop_assume!(k1 != k2);
            let side = if bid { Side::Bid } else { Side::Ask };
            let mut a = empty_book(10).unwrap();
            a.submit(side, k1, q1, 0.0).unwrap();
            a.submit(side, k2, q2, 0.0).unwrap();
            let mut b = empty_book(10).unwrap();
            b.submit(side, k2, q2, 0.0).unwrap();
            b.submit(side, k1, q1, 0.0).unwrap();
            prop_assert_eq!(a.key(), b.key());
        }

        #[test]
        fn cancel_undoes_resting_submit(
            seed_orders in proptest::collection::vec((any::<bool>(), 1u32..=10, 1u32..=3), 0..12),
            side_bid in any::<bool>(), k in 1u32..=10, q in 1u32..=3,
        ) {
            let mut b = empty_book(10).unwrap();
            for (bid, k, q) in seed_orders {
                let side = if bid { Side::Bid } else { Side::Ask };
                b.submit(side, k, q, 0.0).unwrap();
            }
            let side = if side_bid { Side::Bid } else { Side::Ask };
            let before = b.clone();
            let s = b.submit(side, k, q, 1.0).unwrap();
            prop_assume!(s.transactions.is_empty());
            b.cancel(side, k, q, s.resting.unwrap()).unwrap();
            prop_assert_eq!(b.bids(), before.bids());
            prop_assert_eq!(b.asks(), before.asks());
        }
    }
}
