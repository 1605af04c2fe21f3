//! Gillespie simulation of the order book master equation.
//!
//! Each step draws two uniforms in a fixed order: the first gives the
//! waiting time `-ln(1 - u) / lambda`, the second selects an event by
//! inverse CDF over the event-rate table in its fixed iteration order. The
//! random stream is ChaCha8, so trajectories are reproducible across
//! platforms given a seed.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::book::{BookError, BookState, PriceLevel, Transaction};
use crate::observables::{
    depth, quotes, DepthProfile, QuoteSnapshot, ReturnMode, RunSummary, SnapshotAccumulator,
};
use crate::rates::{event_table, Event, RateError, RateModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error("sampled event could not be applied: {0}")]
    Book(#[from] BookError),
    #[error("invalid stop criterion: {0}")]
    InvalidStop(String),
}

/// Seeded random stream for one run.
#[derive(Debug, Clone)]
pub struct SimRng(ChaCha8Rng);

impl SimRng {
    pub fn new(seed: u64) -> Self {
        SimRng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Stream `run` of `base_seed`. Run 0 coincides with [`SimRng::new`].
    pub fn for_run(base_seed: u64, run: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        rng.set_stream(run);
        SimRng(rng)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn exponential(&mut self, rate: f64) -> f64 {
        -(1.0 - self.uniform()).ln() / rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub delta_t: f64,
    pub event: Event,
    pub transactions: Vec<Transaction>,
}

/// Index of the entry selected by `target` in `[0, total)`.
fn select(entries: &[(Event, f64)], target: f64) -> usize {
    let mut cumulative = 0.0;
    for (i, (_, rate)) in entries.iter().enumerate() {
        cumulative += rate;
        if target < cumulative {
            return i;
        }
    }
    // Rounding can leave target marginally above the last partial sum.
    entries.len() - 1
}

/// Applies one event through the matching core; arrivals may trade.
pub fn apply_event(
    state: &mut BookState,
    event: &Event,
    time: f64,
) -> Result<Vec<Transaction>, BookError> {
    match *event {
        Event::Arrival {
            side,
            price_level,
            quantity,
        } => Ok(state
            .submit(side, price_level, quantity, time)?
            .transactions),
        Event::Cancellation {
            side,
            price_level,
            quantity,
            order_id,
        } => {
            state.cancel(side, price_level, quantity, order_id)?;
            Ok(Vec::new())
        }
    }
}

/// Draws the waiting time and the next event without applying it.
pub fn sample_event(
    state: &BookState,
    model: &RateModel,
    rng: &mut SimRng,
) -> Result<(f64, Event), EngineError> {
    let table = event_table(model, state)?;
    let total = table.total();
    let delta_t = rng.exponential(total);
    let target = rng.uniform() * total;
    Ok((delta_t, table.entries[select(&table.entries, target)].0))
}

/// Advances `state` by one event. `now` is the time before the step.
pub fn step(
    state: &mut BookState,
    model: &RateModel,
    rng: &mut SimRng,
    now: f64,
) -> Result<StepOutcome, EngineError> {
    let (delta_t, event) = sample_event(state, model, rng)?;
    let transactions = apply_event(state, &event, now + delta_t)?;
    debug_assert_eq!(state.check_invariants(), Ok(()));
    Ok(StepOutcome {
        delta_t,
        event,
        transactions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopCriterion {
    Events(u64),
    /// Stop at this simulated time; the state returned is the one holding
    /// at the horizon.
    Horizon(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecordMode {
    /// Final state, transactions and running summary only.
    #[default]
    Summary,
    /// Every event with quotes, and the depth profile if requested.
    Events { depth: bool },
    /// Depth profiles of the last `steps` states.
    Heatmap { steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RecordingConfig {
    pub mode: RecordMode,
    pub returns: ReturnMode,
}

impl RecordingConfig {
    pub fn summary() -> Self {
        RecordingConfig::default()
    }

    pub fn events(depth: bool) -> Self {
        RecordingConfig {
            mode: RecordMode::Events { depth },
            ..Default::default()
        }
    }

    pub fn heatmap(steps: usize) -> Self {
        RecordingConfig {
            mode: RecordMode::Heatmap { steps },
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub time: f64,
    pub event: Event,
    pub transactions: Vec<Transaction>,
    pub quotes: QuoteSnapshot,
    pub depth: Option<DepthProfile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapFrame {
    pub time: f64,
    pub depth: DepthProfile,
    pub traded_levels: Vec<PriceLevel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub run: u64,
    pub initial: BookState,
    pub final_state: BookState,
    pub events: u64,
    /// Time of the last event, or the horizon for horizon stops.
    pub elapsed: f64,
    pub records: Vec<TrajectoryRecord>,
    pub transactions: Vec<Transaction>,
    pub heatmap: Vec<HeatmapFrame>,
    pub snapshots: SnapshotAccumulator,
    pub returns: ReturnMode,
}

impl Trajectory {
    pub fn summary(&self) -> RunSummary {
        RunSummary::from_parts(
            &self.snapshots,
            &self.transactions,
            self.elapsed,
            self.events,
            self.returns,
        )
    }
}

fn run_with(
    model: &RateModel,
    initial: BookState,
    stop: StopCriterion,
    mut rng: SimRng,
    seed: u64,
    run: u64,
    recording: RecordingConfig,
) -> Result<Trajectory, EngineError> {
    match stop {
        StopCriterion::Horizon(t) if !(t >= 0.0 && t.is_finite()) => {
            return Err(EngineError::InvalidStop(format!("horizon {t}")));
        }
        _ => {}
    }
    let mut state = initial.clone();
    let mut now = 0.0;
    let mut events = 0u64;
    let mut records = Vec::new();
    let mut transactions = Vec::new();
    let mut frames: VecDeque<HeatmapFrame> = VecDeque::new();
    let mut snapshots = SnapshotAccumulator::default();

    loop {
        if let StopCriterion::Events(n) = stop {
            if events >= n {
                break;
            }
        }
        let (delta_t, event) = sample_event(&state, model, &mut rng)?;
        let time = now + delta_t;
        if let StopCriterion::Horizon(t) = stop {
            if time > t {
                now = t;
                break;
            }
        }
        let traded = apply_event(&mut state, &event, time)?;
        debug_assert_eq!(state.check_invariants(), Ok(()));
        now = time;
        events += 1;
        snapshots.observe(&state);
        match recording.mode {
            RecordMode::Summary => {}
            RecordMode::Events { depth: with_depth } => records.push(TrajectoryRecord {
                time,
                event,
                transactions: traded.clone(),
                quotes: quotes(&state),
                depth: with_depth.then(|| depth(&state)),
            }),
            RecordMode::Heatmap { steps } => {
                if steps > 0 {
                    if frames.len() == steps {
                        frames.pop_front();
                    }
                    frames.push_back(HeatmapFrame {
                        time,
                        depth: depth(&state),
                        traded_levels: traded.iter().map(|t| t.price_level).collect(),
                    });
                }
            }
        }
        transactions.extend(traded);
    }

    Ok(Trajectory {
        seed,
        run,
        initial,
        final_state: state,
        events,
        elapsed: now,
        records,
        transactions,
        heatmap: frames.into(),
        snapshots,
        returns: recording.returns,
    })
}

/// Runs one trajectory from `initial` until `stop`.
pub fn simulate(
    model: &RateModel,
    initial: BookState,
    stop: StopCriterion,
    seed: u64,
    recording: RecordingConfig,
) -> Result<Trajectory, EngineError> {
    run_with(model, initial, stop, SimRng::new(seed), seed, 0, recording)
}

/// Run `run` of an ensemble seeded with `base_seed`, exactly as
/// [`run_ensemble`] executes it.
pub fn simulate_run(
    model: &RateModel,
    initial: BookState,
    stop: StopCriterion,
    base_seed: u64,
    run: u64,
    recording: RecordingConfig,
) -> Result<Trajectory, EngineError> {
    let rng = SimRng::for_run(base_seed, run);
    run_with(model, initial, stop, rng, base_seed, run, recording)
}

/// Independent runs in parallel; run `i` uses stream `i` of `base_seed`.
/// Results come back in run order regardless of scheduling.
pub fn run_ensemble(
    model: &RateModel,
    initial: &BookState,
    runs: u64,
    stop: StopCriterion,
    base_seed: u64,
    recording: RecordingConfig,
) -> Result<Vec<Trajectory>, EngineError> {
    run_ensemble_map(model, initial, runs, stop, base_seed, recording, |t| t)
}

/// Like [`run_ensemble`] but reduces each trajectory on its worker, so
/// large ensembles need not keep every trajectory alive.
pub fn run_ensemble_map<T, F>(
    model: &RateModel,
    initial: &BookState,
    runs: u64,
    stop: StopCriterion,
    base_seed: u64,
    recording: RecordingConfig,
    reduce: F,
) -> Result<Vec<T>, EngineError>
where
    T: Send,
    F: Fn(Trajectory) -> T + Sync,
{
    (0..runs)
        .into_par_iter()
        .map(|run| {
            simulate_run(model, initial.clone(), stop, base_seed, run, recording).map(&reduce)
        })
        .collect()
}
