//! Exact stochastic simulation of a limit order book.
//!
//! The crate is organized bottom-up:
//!
//! - [`book`]: the deterministic matching core (submission, cancellation,
//!   price-time priority, continuous trading, call auctions).
//! - [`rates`]: DGX arrival mixtures, per-order cancellation and the
//!   normalized event-rate table of a state.
//! - [`engine`]: Gillespie simulation driven by the event-rate table.
//! - [`observables`]: depth, quotes, XLM liquidity, transactions and
//!   ensemble moment estimators.
//! - [`oracle`]: exact master-equation integration on a truncated state space.
//! - [`scenario`]: configuration, presets, ensemble runs, CSV output and the
//!   oracle validation suite.

pub mod book;
pub mod engine;
pub mod observables;
pub mod oracle;
pub mod rates;
pub mod scenario;

pub use book::{empty_book, BookError, BookKey, BookState, Order, OrderId, Side, Transaction};

pub use engine::{run_ensemble, simulate, step, SimRng, StopCriterion, Trajectory};
pub use oracle::{
    build_generator, enumerate_states, evolve, GeneratorMatrix, StateIndex, StateSpace,
};
pub use rates::{event_table, DgxParams, Event, EventRateTable, RateModel, TraderGroup};
