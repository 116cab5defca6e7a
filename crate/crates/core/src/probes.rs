//! Right-censored fill times for tracked and hypothetical orders.
//!
//! A hypothetical probe is a one-share buy (sell) order that never enters the
//! book. A buy probe at price `P` is filled by the first later message that
//! is
//!
//! * a sell submission priced at or below `P` (it would have matched the
//!   probe),
//! * a visible execution of a resting buy order at a price at or below `P`
//!   (an order ahead of the probe, or one at a worse price, traded),
//! * a hidden execution against a buy order priced strictly below `P`.
//!
//! Sell probes mirror these rules. Pegged probes follow the best price of
//! their side and join the tail of the new queue whenever it changes; fill
//! conditions are checked before re-pegging. A probe whose side is empty
//! keeps its last price. Probes are censored at the last message of the
//! stream.
//!
//! Under the trade clock an outcome is measured as one plus the number of
//! trades (visible or hidden executions) strictly between submission and
//! the resolving event, so it is at least 1 and ordered like wall time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::book::{BookError, BookState, CrossingMode};
use crate::features::{FeatureError, FeatureMode, FeatureTape, Session, TapeConfig};
use crate::lobster::{EventType, Message, Price, Side, Timestamp};

/// Smallest wall-clock observation, so that observed times stay positive
/// when a probe resolves in the microsecond it was placed.
pub const MIN_WALL_TIME: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("order {0} is never submitted in the stream")]
    UnknownOrder(u64),
    #[error("submission time {submit} outside the stream [{first}, {last}]")]
    OutsideStream {
        submit: Timestamp,
        first: Timestamp,
        last: Timestamp,
    },
    #[error("empty stream")]
    EmptyStream,
    #[error("no samples")]
    NoSamples,
    #[error(transparent)]
    Book(#[from] BookError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Seconds.
    Wall,
    /// Trades.
    Transaction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProbeMode {
    /// Real orders followed until their final message.
    Tracked,
    /// Hypothetical order pegged to the best price of its side.
    Pegged,
    /// Hypothetical order `ticks` inside the best quote, fixed price.
    InsideSpread { ticks: u32 },
}

/// How a probe ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub submit: Timestamp,
    pub end: Timestamp,
    /// One-based trade clock at resolution.
    pub trades: u64,
    pub filled: bool,
}

impl Resolution {
    /// Observed time under `clock`; always positive.
    pub fn observed(&self, clock: Clock) -> f64 {
        match clock {
            Clock::Wall => self.end.secs_since(self.submit).max(MIN_WALL_TIME),
            Clock::Transaction => self.trades as f64,
        }
    }
}

/// A hypothetical one-share order.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    side: Side,
    price: Price,
    pegged: bool,
    submit: Timestamp,
    trades: u64,
    censor_on_adverse_move: bool,
}

fn own_best(side: Side, bid: Option<Price>, ask: Option<Price>) -> Option<Price> {
    match side {
        Side::Buy => bid,
        Side::Sell => ask,
    }
}

impl Probe {
    /// Probe at the tail of the best level of `side`; `None` if that side is
    /// empty.
    pub fn pegged(side: Side, submit: Timestamp, bid: Option<Price>, ask: Option<Price>) -> Option<Probe> {
        let price = own_best(side, bid, ask)?;
        Some(Probe {
            side,
            price,
            pegged: true,
            submit,
            trades: 0,
            censor_on_adverse_move: false,
        })
    }

    /// Probe at a fixed price.
    pub fn fixed(side: Side, price: Price, submit: Timestamp) -> Probe {
        Probe {
            side,
            price,
            pegged: false,
            submit,
            trades: 0,
            censor_on_adverse_move: false,
        }
    }

    /// Fixed probe `ticks` inside the best quote of its side. `None` (skip)
    /// when the spread is not wider than `ticks` ticks or a side is empty.
    pub fn inside_spread(
        side: Side,
        submit: Timestamp,
        bid: Option<Price>,
        ask: Option<Price>,
        ticks: u32,
        tick: Price,
    ) -> Option<Probe> {
        let (b, a) = (bid?, ask?);
        let offset = ticks as Price * tick;
        if a - b <= offset {
            return None;
        }
        let price = match side {
            Side::Buy => b + offset,
            Side::Sell => a - offset,
        };
        Some(Probe::fixed(side, price, submit))
    }

    /// Censor a fixed-price probe as soon as its side's best quote moves
    /// past it.
    pub fn with_adverse_censoring(mut self, on: bool) -> Probe {
        self.censor_on_adverse_move = on;
        self
    }

    pub fn price(&self) -> Price {
        self.price
    }

    pub fn side(&self) -> Side {
        self.side
    }

    fn fills(&self, m: &Message) -> bool {
        let (p, q) = (self.price, m.price);
        let through = |strict: bool| match self.side {
            Side::Buy => q < p || (!strict && q == p),
            Side::Sell => q > p || (!strict && q == p),
        };
        match m.event {
            EventType::Submission => m.direction != self.side && through(false),
            EventType::Execution => m.direction == self.side && through(false),
            EventType::HiddenExecution => m.direction == self.side && through(true),
            _ => false,
        }
    }

    fn resolve(&self, end: Timestamp, filled: bool) -> Resolution {
        Resolution {
            submit: self.submit,
            end,
            trades: self.trades + 1,
            filled,
        }
    }

    /// Feed the next message and the best quotes after it. Returns the
    /// resolution once the probe fills (or is censored by an adverse move).
    pub fn step(&mut self, m: &Message, bid: Option<Price>, ask: Option<Price>) -> Option<Resolution> {
        if self.fills(m) {
            return Some(self.resolve(m.time, true));
        }
        if m.event.is_trade() {
            self.trades += 1;
        }
        let own = own_best(self.side, bid, ask);
        if let Some(best) = own {
            if self.pegged {
                self.price = best;
            } else if self.censor_on_adverse_move {
                let passed = match self.side {
                    Side::Buy => best > self.price,
                    Side::Sell => best < self.price,
                };
                if passed {
                    return Some(self.resolve(m.time, false));
                }
            }
        }
        None
    }

    /// Censor at `end`.
    pub fn censor(&self, end: Timestamp) -> Resolution {
        self.resolve(end, false)
    }
}

/// Final-message rule for a real order: filled if its last message is an
/// execution, otherwise censored at its deletion or at the end of the
/// stream.
pub fn track_order(messages: &[Message], order_id: u64) -> Result<Resolution, ProbeError> {
    let start = messages
        .iter()
        .position(|m| m.order_id == order_id && m.event == EventType::Submission)
        .ok_or(ProbeError::UnknownOrder(order_id))?;
    let submit = messages[start].time;
    let end_of_day = messages.last().expect("non-empty").time;
    let mut trades = 0u64;
    let mut last: Option<(usize, u64)> = None;
    for (i, m) in messages.iter().enumerate().skip(start + 1) {
        if m.order_id == order_id && m.event != EventType::Submission {
            last = Some((i, trades));
        }
        if m.event.is_trade() {
            trades += 1;
        }
    }
    let res = match last {
        Some((i, before)) if messages[i].event == EventType::Execution => Resolution {
            submit,
            end: messages[i].time,
            trades: before + 1,
            filled: true,
        },
        Some((i, before)) if messages[i].event == EventType::Deletion => Resolution {
            submit,
            end: messages[i].time,
            trades: before + 1,
            filled: false,
        },
        _ => Resolution {
            submit,
            end: end_of_day,
            trades: trades + 1,
            filled: false,
        },
    };
    Ok(res)
}

/// A replayed session: messages, best quotes after every message and the
/// feature tape.
#[derive(Debug, Clone)]
pub struct DayReplay {
    messages: Vec<Message>,
    best: Vec<(Option<Price>, Option<Price>)>,
    tape: FeatureTape,
    tick: Price,
}

impl DayReplay {
    pub fn new(messages: Vec<Message>, mode: CrossingMode, tape: TapeConfig) -> Result<DayReplay, ProbeError> {
        if messages.is_empty() {
            return Err(ProbeError::EmptyStream);
        }
        let mut book = BookState::new(mode);
        let mut best = Vec::with_capacity(messages.len());
        let mut trades = Vec::new();
        for m in &messages {
            book.apply(m)?;
            best.push((book.best_bid(), book.best_ask()));
            if m.event.is_trade() {
                trades.push((m.time, book.snapshot(crate::features::FEATURE_LEVELS)));
            }
        }
        Ok(DayReplay {
            tape: FeatureTape::from_trades(&trades, tape),
            tick: tape.tick,
            messages,
            best,
        })
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn tape(&self) -> &FeatureTape {
        &self.tape
    }

    pub fn first_time(&self) -> Timestamp {
        self.messages[0].time
    }

    pub fn last_time(&self) -> Timestamp {
        self.messages[self.messages.len() - 1].time
    }

    fn check_inside(&self, submit: Timestamp) -> Result<(), ProbeError> {
        if submit < self.first_time() || submit > self.last_time() {
            return Err(ProbeError::OutsideStream {
                submit,
                first: self.first_time(),
                last: self.last_time(),
            });
        }
        Ok(())
    }

    /// Index of the first message at or after `submit`, and the best quotes
    /// in force just before it.
    pub fn state_at(&self, submit: Timestamp) -> (usize, Option<Price>, Option<Price>) {
        let s = self.messages.partition_point(|m| m.time < submit);
        let (bid, ask) = if s == 0 { (None, None) } else { self.best[s - 1] };
        (s, bid, ask)
    }

    /// Run `probe` over the messages from index `from` on.
    pub fn run(&self, mut probe: Probe, from: usize) -> Resolution {
        for (m, (bid, ask)) in self.messages[from..].iter().zip(&self.best[from..]) {
            if let Some(r) = probe.step(m, *bid, *ask) {
                return r;
            }
        }
        probe.censor(self.last_time())
    }

    /// Pegged probe placed at `submit`; `None` if its side is empty then.
    pub fn simulate_pegged(&self, side: Side, submit: Timestamp) -> Result<Option<Resolution>, ProbeError> {
        self.check_inside(submit)?;
        let (s, bid, ask) = self.state_at(submit);
        Ok(Probe::pegged(side, submit, bid, ask).map(|p| self.run(p, s)))
    }

    /// Fixed probe `ticks` inside the spread; `None` means skip.
    pub fn simulate_inside_spread(
        &self,
        side: Side,
        submit: Timestamp,
        ticks: u32,
        censor_on_adverse_move: bool,
    ) -> Result<Option<Resolution>, ProbeError> {
        self.check_inside(submit)?;
        let (s, bid, ask) = self.state_at(submit);
        Ok(Probe::inside_spread(side, submit, bid, ask, ticks, self.tick)
            .map(|p| self.run(p.with_adverse_censoring(censor_on_adverse_move), s)))
    }
}

/// Which side probes are placed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideChoice {
    Buy,
    Sell,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub mode: ProbeMode,
    pub n_per_day: usize,
    pub seed: u64,
    pub lookback: usize,
    pub clock: Clock,
    pub features: FeatureMode,
    pub side: SideChoice,
    /// Draws allowed per sample before the day is skipped.
    pub max_retries: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            mode: ProbeMode::Pegged,
            n_per_day: 100,
            seed: 0,
            lookback: 50,
            clock: Clock::Wall,
            features: FeatureMode::Raw,
            side: SideChoice::Buy,
            max_retries: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub day: usize,
    pub submit: Timestamp,
    pub side: Side,
    pub price: Price,
}

/// One observation `(x, z, delta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalSample {
    /// Flattened `lookback x width` window, earliest row first.
    pub x: Vec<f32>,
    pub z: f64,
    pub delta: bool,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub feature_names: Vec<String>,
    pub lookback: usize,
    pub width: usize,
    pub clock: Clock,
    pub mode: ProbeMode,
    pub features: FeatureMode,
    pub seed: u64,
    pub n_per_day: usize,
    pub days: usize,
    pub session: Session,
    pub tick: Price,
    pub vol_window: usize,
    pub normalization: String,
}

pub const NORMALIZATION: &str = "time_of_day: (t - open) / (close - open); realized_vol: rolling mean of squared \
log mid returns between trades, basis points squared; prices and microprice: (p - last mid of window) / tick; \
sizes: ln(1 + size); order flow: sign(f) ln(1 + |f|); absent levels: one tick beyond the previous level, size 0";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SurvivalSample>,
}

impl Dataset {
    /// Keep only the last `lookback` rows of every window.
    pub fn truncate_lookback(&self, lookback: usize) -> Dataset {
        assert!(lookback >= 1 && lookback <= self.manifest.lookback);
        let w = self.manifest.width;
        let skip = (self.manifest.lookback - lookback) * w;
        Dataset {
            manifest: DatasetManifest {
                lookback,
                ..self.manifest.clone()
            },
            samples: self
                .samples
                .iter()
                .map(|s| SurvivalSample {
                    x: s.x[skip..].to_vec(),
                    ..s.clone()
                })
                .collect(),
        }
    }

    /// Write the samples as CSV (`z,delta,day,submit,side,price` then the
    /// flattened window) and the manifest as JSON next to it.
    pub fn write(&self, csv: &std::path::Path) -> Result<(), ProbeError> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(csv)?);
        let mut header = String::from("z,delta,day,submit,side,price");
        for r in 0..self.manifest.lookback {
            for name in &self.manifest.feature_names {
                header.push_str(&format!(",r{r}_{name}"));
            }
        }
        writeln!(w, "{header}")?;
        for s in &self.samples {
            write!(
                w,
                "{},{},{},{},{},{}",
                s.z,
                s.delta as u8,
                s.meta.day,
                s.meta.submit,
                s.meta.side.code(),
                s.meta.price
            )?;
            for v in &s.x {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        let manifest = serde_json::to_string_pretty(&self.manifest).map_err(|e| ProbeError::Format(e.to_string()))?;
        std::fs::write(manifest_path(csv), manifest)?;
        Ok(())
    }

    pub fn read(csv: &std::path::Path) -> Result<Dataset, ProbeError> {
        use std::io::BufRead;
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path(csv))?)
            .map_err(|e| ProbeError::Format(format!("manifest: {e}")))?;
        let expected = 6 + manifest.lookback * manifest.width;
        let reader = std::io::BufReader::new(std::fs::File::open(csv)?);
        let mut samples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if i == 0 || line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != expected {
                return Err(ProbeError::Format(format!("row {}: {} columns, expected {expected}", i + 1, cols.len())));
            }
            let bad = |what: &str| ProbeError::Format(format!("row {}: bad {what}", i + 1));
            let z: f64 = cols[0].parse().map_err(|_| bad("z"))?;
            let delta = match cols[1] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("delta")),
            };
            let day: usize = cols[2].parse().map_err(|_| bad("day"))?;
            let submit = crate::lobster::parse_messages_str(&format!("{},7,0,0,0,1", cols[3]))
                .map_err(|_| bad("submit"))?[0]
                .time;
            let side = Side::from_code(cols[4].parse().map_err(|_| bad("side"))?).ok_or_else(|| bad("side"))?;
            let price: Price = cols[5].parse().map_err(|_| bad("price"))?;
            let x = cols[6..]
                .iter()
                .map(|c| c.parse::<f32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad("feature"))?;
            samples.push(SurvivalSample {
                x,
                z,
                delta,
                meta: SampleMeta { day, submit, side, price },
            });
        }
        Ok(Dataset { manifest, samples })
    }
}

pub fn manifest_path(csv: &std::path::Path) -> std::path::PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".manifest.json");
    s.into()
}

fn day_rng(seed: u64, day: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (day as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Draw `n_per_day` probes per day at uniform random times and join each
/// outcome with the feature window ending at its submission.
pub fn build_dataset(days: &[DayReplay], spec: &DatasetSpec) -> Result<Dataset, ProbeError> {
    let mut samples = Vec::with_capacity(days.len() * spec.n_per_day);
    for (d, day) in days.iter().enumerate() {
        let mut rng = day_rng(spec.seed, d);
        let mut day_samples = Vec::with_capacity(spec.n_per_day);
        let (t0, t1) = (day.first_time().0, day.last_time().0);
        'samples: for _ in 0..spec.n_per_day {
            for _ in 0..spec.max_retries.max(1) {
                let side = match spec.side {
                    SideChoice::Buy => Side::Buy,
                    SideChoice::Sell => Side::Sell,
                    SideChoice::Random => {
                        if rng.random::<bool>() {
                            Side::Buy
                        } else {
                            Side::Sell
                        }
                    }
                };
                let (submit, outcome) = match spec.mode {
                    ProbeMode::Tracked => {
                        let idx = rng.random_range(0..day.messages.len());
                        let m = day.messages[idx];
                        if m.event != EventType::Submission || (spec.side != SideChoice::Random && m.direction != side) {
                            continue;
                        }
                        let r = track_order(&day.messages[idx..], m.order_id)?;
                        (m.time, Some((r, m.direction, m.price)))
                    }
                    ProbeMode::Pegged | ProbeMode::InsideSpread { .. } => {
                        let submit = Timestamp(rng.random_range(t0..=t1));
                        let (s, bid, ask) = day.state_at(submit);
                        let probe = match spec.mode {
                            ProbeMode::InsideSpread { ticks } => Probe::inside_spread(side, submit, bid, ask, ticks, day.tick),
                            _ => Probe::pegged(side, submit, bid, ask),
                        };
                        (submit, probe.map(|p| (day.run(p.clone(), s), side, p.price())))
                    }
                };
                let Some((res, side, price)) = outcome else { continue };
                let end = day.tape.trades_before(submit);
                if end < spec.lookback {
                    continue;
                }
                let x = day.tape.window_ending(end, spec.lookback, spec.features)?;
                day_samples.push(SurvivalSample {
                    x,
                    z: res.observed(spec.clock),
                    delta: res.filled,
                    meta: SampleMeta { day: d, submit, side, price },
                });
                continue 'samples;
            }
            log::warn!("day {d}: no valid submission after {} draws, skipping the day", spec.max_retries);
            day_samples.clear();
            break;
        }
        samples.extend(day_samples);
    }
    let cfg = days.first().map(|d| *d.tape.config()).unwrap_or_default();
    Ok(Dataset {
        manifest: DatasetManifest {
            feature_names: spec.features.names(),
            lookback: spec.lookback,
            width: spec.features.width(),
            clock: spec.clock,
            mode: spec.mode,
            features: spec.features,
            seed: spec.seed,
            n_per_day: spec.n_per_day,
            days: days.len(),
            session: cfg.session,
            tick: cfg.tick,
            vol_window: cfg.vol_window,
            normalization: NORMALIZATION.to_string(),
        },
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FillStats {
    pub n: usize,
    pub fill_probability: f64,
    /// Mean observed time over fills within the horizon; `None` without fills.
    pub mean_fill_time: Option<f64>,
}

/// Share of samples filled within `horizon` and their mean fill time.
pub fn fill_stats(outcomes: &[(f64, bool)], horizon: f64) -> Result<FillStats, ProbeError> {
    if outcomes.is_empty() {
        return Err(ProbeError::NoSamples);
    }
    let fills: Vec<f64> = outcomes.iter().filter(|(z, d)| *d && *z <= horizon).map(|(z, _)| *z).collect();
    Ok(FillStats {
        n: outcomes.len(),
        fill_probability: fills.len() as f64 / outcomes.len() as f64,
        mean_fill_time: (!fills.is_empty()).then(|| fills.iter().sum::<f64>() / fills.len() as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(t: u64, ev: EventType, id: u64, size: u64, price: Price, side: Side) -> Message {
        Message::new(Timestamp::from_secs(t), ev, id, size, price, side)
    }

    fn base() -> Vec<Message> {
        vec![
            msg(90, EventType::Submission, 1, 100, 1000, Side::Buy),
            msg(90, EventType::Submission, 2, 100, 1010, Side::Sell),
            msg(100, EventType::Submission, 3, 50, 1000, Side::Buy),
        ]
    }

    #[test]
    fn tracked_full_execution() {
        let mut m = base();
        m.push(msg(103, EventType::Execution, 3, 50, 1000, Side::Buy));
        let r = track_order(&m, 3).unwrap();
        assert!(r.filled);
        assert_eq!(r.observed(Clock::Wall), 3.0);
        assert_eq!(r.observed(Clock::Transaction), 1.0);
    }

    #[test]
    fn tracked_deletion_and_partial() {
        let mut m = base();
        m.push(msg(110, EventType::Deletion, 3, 50, 1000, Side::Buy));
        let r = track_order(&m, 3).unwrap();
        assert!(!r.filled);
        assert_eq!(r.observed(Clock::Wall), 10.0);

        let mut m = base();
        m.push(msg(104, EventType::Execution, 3, 20, 1000, Side::Buy));
        m.push(msg(107, EventType::Deletion, 3, 30, 1000, Side::Buy));
        m.push(msg(120, EventType::Submission, 9, 5, 990, Side::Buy));
        let r = track_order(&m, 3).unwrap();
        assert!(!r.filled);
        assert_eq!(r.observed(Clock::Wall), 7.0);
        assert_eq!(r.trades, 2);

        let mut m = base();
        m.push(msg(104, EventType::PartialCancel, 3, 20, 1000, Side::Buy));
        m.push(msg(130, EventType::Submission, 9, 5, 990, Side::Buy));
        assert_eq!(track_order(&m, 3).unwrap().observed(Clock::Wall), 30.0);
        assert!(matches!(track_order(&m, 42), Err(ProbeError::UnknownOrder(42))));
    }

    fn replay(m: Vec<Message>) -> DayReplay {
        DayReplay::new(m, CrossingMode::Strict, TapeConfig { tick: 10, ..TapeConfig::default() }).unwrap()
    }

    #[test]
    fn pegged_sell_filled_by_market_buy_hitting_queue_head() {
        let mut m = base();
        m.push(msg(101, EventType::Execution, 2, 10, 1010, Side::Sell));
        let day = replay(m);
        let r = day.simulate_pegged(Side::Sell, Timestamp::from_secs(95)).unwrap().unwrap();
        assert!(r.filled);
        assert_eq!(r.observed(Clock::Wall), 6.0);
    }

    #[test]
    fn sells_above_the_probe_do_not_fill() {
        let mut m = base();
        m.push(msg(101, EventType::Submission, 4, 10, 1005, Side::Sell));
        let day = replay(m);
        let r = day.simulate_inside_spread(Side::Buy, Timestamp::from_secs(95), 0, false).unwrap().unwrap();
        assert!(!r.filled);
        // spread 1010 - 1000 is a single tick, so one tick inside is skipped
        assert_eq!(day.simulate_inside_spread(Side::Buy, Timestamp::from_secs(95), 1, false).unwrap(), None);
    }

    #[test]
    fn inside_probe_hit_by_incoming_sell_below_it() {
        let m = vec![
            msg(90, EventType::Submission, 1, 100, 1000, Side::Buy),
            msg(90, EventType::Submission, 2, 100, 1050, Side::Sell),
            msg(101, EventType::Submission, 4, 10, 1010, Side::Sell),
        ];
        let day = replay(m);
        let r = day.simulate_inside_spread(Side::Buy, Timestamp::from_secs(95), 1, false).unwrap().unwrap();
        assert!(r.filled);
        assert_eq!(r.observed(Clock::Wall), 6.0);
    }

    #[test]
    fn no_flow_is_censored_at_close() {
        let mut m = base();
        m.push(msg(200, EventType::Submission, 4, 10, 990, Side::Buy));
        let day = replay(m);
        let r = day.simulate_pegged(Side::Buy, Timestamp::from_secs(95)).unwrap().unwrap();
        assert!(!r.filled);
        assert_eq!(r.observed(Clock::Wall), 105.0);
        assert!(day.simulate_pegged(Side::Buy, Timestamp::from_secs(300)).is_err());
    }

    #[test]
    fn pegged_probe_follows_the_quote() {
        let m = vec![
            msg(90, EventType::Submission, 1, 100, 1000, Side::Buy),
            msg(90, EventType::Submission, 2, 100, 1050, Side::Sell),
            msg(100, EventType::Submission, 3, 10, 1020, Side::Buy),
            // trade at the old level 1000 is now below the probe: still a fill
            msg(105, EventType::Execution, 3, 10, 1020, Side::Buy),
        ];
        let day = replay(m.clone());
        let r = day.simulate_pegged(Side::Buy, Timestamp::from_secs(95)).unwrap().unwrap();
        assert!(r.filled);
        assert_eq!(r.observed(Clock::Wall), 10.0);
        // the fixed probe at 1000 is not touched by the trade at 1020
        let r = day.simulate_inside_spread(Side::Buy, Timestamp::from_secs(95), 0, false).unwrap().unwrap();
        assert!(!r.filled);
        let r = day.simulate_inside_spread(Side::Buy, Timestamp::from_secs(95), 0, true).unwrap().unwrap();
        assert_eq!((r.filled, r.end), (false, Timestamp::from_secs(100)));
    }

    #[test]
    fn hidden_executions_fill_only_through_the_price() {
        let mut m = base();
        m.push(msg(101, EventType::HiddenExecution, 0, 10, 1000, Side::Buy));
        m.push(msg(102, EventType::HiddenExecution, 0, 10, 990, Side::Buy));
        let day = replay(m);
        let r = day.simulate_pegged(Side::Buy, Timestamp::from_secs(95)).unwrap().unwrap();
        assert_eq!(r.end, Timestamp::from_secs(102));
        assert_eq!(r.trades, 2);
    }

    #[test]
    fn fill_stats_cases() {
        let s = fill_stats(&[(1.0, true), (2.0, false)], f64::INFINITY).unwrap();
        assert_eq!((s.fill_probability, s.mean_fill_time), (0.5, Some(1.0)));
        let s = fill_stats(&[(1.0, false), (2.0, false)], f64::INFINITY).unwrap();
        assert_eq!((s.fill_probability, s.mean_fill_time), (0.0, None));
        let s = fill_stats(&[(1.0, true), (5.0, true)], 2.0).unwrap();
        assert_eq!((s.fill_probability, s.mean_fill_time), (0.5, Some(1.0)));
        assert!(fill_stats(&[], 1.0).is_err());
    }
}
