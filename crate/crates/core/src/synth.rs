//! Zero-intelligence synthetic message streams.
//!
//! Limit orders, market orders and cancellations arrive as independent
//! Poisson flows per side. Limit prices sit a geometric number of ticks
//! behind the same-side best quote, or inside the spread with probability
//! `spread_stiffness` when the spread is wider than one tick. Market orders
//! execute against the opposite best level only. Cancellations hit a
//! uniformly chosen live order, so their aggregate rate is proportional to
//! the number of resting orders.
//!
//! Intensities can be modulated by a U-shaped intraday curve and by a hidden
//! Markov regime. The generator keeps its own book (a plain sorted vector of
//! levels, independent of [`crate::book`]) and records the top levels after
//! every message, which gives an orderbook file to check replays against.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lobster::{EventType, LevelQuote, Message, Price, Side, SnapshotRow, Timestamp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid synthetic config: {0}")]
    Invalid(String),
}

/// Poisson intensities in events per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub limit_buy: f64,
    pub limit_sell: f64,
    pub market_buy: f64,
    pub market_sell: f64,
    /// Per resting order.
    pub cancel_buy: f64,
    /// Per resting order.
    pub cancel_sell: f64,
}

/// Intensity multipliers for one hidden regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub limit: f64,
    pub market_buy: f64,
    pub market_sell: f64,
    pub cancel: f64,
}

impl Regime {
    pub const NEUTRAL: Regime = Regime {
        limit: 1.0,
        market_buy: 1.0,
        market_sell: 1.0,
        cancel: 1.0,
    };
}

/// U-shaped multiplier `1 + amplitude * (2u - 1)^2`, `u` the phase within
/// `period` seconds from the session start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UShape {
    pub amplitude: f64,
    pub period: f64,
}

impl UShape {
    pub fn multiplier(&self, elapsed: f64) -> f64 {
        let u = (elapsed / self.period).rem_euclid(1.0);
        1.0 + self.amplitude * (2.0 * u - 1.0).powi(2)
    }

    pub fn max_multiplier(&self) -> f64 {
        1.0 + self.amplitude
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Session open, seconds after midnight.
    pub start_secs: u64,
    /// Session length in seconds.
    pub horizon: f64,
    pub tick: Price,
    /// Must be a multiple of `tick`.
    pub initial_mid: Price,
    pub rates: Rates,
    /// Order sizes are `max(1, round(LogNormal(size_mu, size_sigma)))`.
    pub size_mu: f64,
    pub size_sigma: f64,
    /// Success probability of the geometric placement depth in ticks.
    pub depth_p: f64,
    /// Probability that a limit order improves the quote when the spread is
    /// wider than one tick. High values keep the spread at one tick.
    pub spread_stiffness: f64,
    /// Fraction of cancellations that only reduce the order.
    pub partial_cancel_prob: f64,
    pub intraday: Option<UShape>,
    /// Hidden regimes; empty means a single neutral regime.
    pub regimes: Vec<Regime>,
    /// Rate of regime switches per second (uniform jump to another regime).
    pub regime_switch_rate: f64,
    /// Levels per side seeded at the open.
    pub initial_levels: usize,
    pub initial_orders_per_level: usize,
    /// Levels recorded in the orderbook output.
    pub snapshot_levels: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            start_secs: 34_200,
            horizon: 23_400.0,
            tick: 100,
            initial_mid: 1_000_000,
            rates: Rates {
                limit_buy: 0.7,
                limit_sell: 0.7,
                market_buy: 0.1,
                market_sell: 0.1,
                cancel_buy: 0.016,
                cancel_sell: 0.016,
            },
            size_mu: 4.0,
            size_sigma: 0.8,
            depth_p: 0.35,
            spread_stiffness: 0.3,
            partial_cancel_prob: 0.2,
            intraday: Some(UShape {
                amplitude: 1.5,
                period: 23_400.0,
            }),
            regimes: Vec::new(),
            regime_switch_rate: 0.0,
            initial_levels: 5,
            initial_orders_per_level: 4,
            snapshot_levels: 5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let r = &self.rates;
        let all = [r.limit_buy, r.limit_sell, r.market_buy, r.market_sell, r.cancel_buy, r.cancel_sell];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return bad("rates must be finite and non-negative");
        }
        if all.iter().all(|x| *x == 0.0) {
            return bad("at least one rate must be positive");
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad("horizon must be positive");
        }
        if self.tick <= 0 {
            return bad("tick must be positive");
        }
        if self.initial_mid % self.tick != 0 || self.initial_mid <= (self.initial_levels as Price + 1) * self.tick {
            return bad("initial_mid must be a multiple of tick and leave room for the seeded bid levels");
        }
        if !(self.depth_p > 0.0 && self.depth_p <= 1.0) {
            return bad("depth_p must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.spread_stiffness) || !(0.0..=1.0).contains(&self.partial_cancel_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(self.size_sigma >= 0.0 && self.size_mu.is_finite()) {
            return bad("size distribution parameters invalid");
        }
        if let Some(u) = &self.intraday {
            if !(u.amplitude >= 0.0 && u.period > 0.0) {
                return bad("intraday modulation needs amplitude >= 0 and period > 0");
            }
        }
        for g in &self.regimes {
            if [g.limit, g.market_buy, g.market_sell, g.cancel].iter().any(|x| !x.is_finite() || *x < 0.0) {
                return bad("regime multipliers must be finite and non-negative");
            }
        }
        if !(self.regime_switch_rate >= 0.0 && self.regime_switch_rate.is_finite()) {
            return bad("regime_switch_rate must be non-negative");
        }
        if self.snapshot_levels == 0 {
            return bad("snapshot_levels must be at least 1");
        }
        Ok(())
    }
}

/// One generated session.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDay {
    pub messages: Vec<Message>,
    /// Book after each message, from the generator's own book.
    pub snapshots: Vec<SnapshotRow>,
    /// Regime index in force when each message was emitted.
    pub regimes: Vec<usize>,
}

struct SimLevel {
    price: Price,
    orders: Vec<(u64, u64)>,
}

impl SimLevel {
    fn volume(&self) -> u64 {
        self.orders.iter().map(|o| o.1).sum()
    }
}

/// Generator book: levels best-first, plus live-order bookkeeping for
/// uniform cancellation draws.
struct SimBook {
    bids: Vec<SimLevel>,
    asks: Vec<SimLevel>,
    live: [Vec<u64>; 2],
    slot: HashMap<u64, (Side, Price, usize)>,
}

fn side_ix(side: Side) -> usize {
    match side {
        Side::Buy => 0,
        Side::Sell => 1,
    }
}

/// True when `a` is a better price than `b` for `side`.
fn better(side: Side, a: Price, b: Price) -> bool {
    match side {
        Side::Buy => a > b,
        Side::Sell => a < b,
    }
}

impl SimBook {
    fn new() -> Self {
        SimBook {
            bids: Vec::new(),
            asks: Vec::new(),
            live: [Vec::new(), Vec::new()],
            slot: HashMap::new(),
        }
    }

    fn side(&self, side: Side) -> &Vec<SimLevel> {
        match side {
            Side::Buy => &self.bids,
            Side::Sell => &self.asks,
        }
    }

    fn side_mut(&mut self, side: Side) -> &mut Vec<SimLevel> {
        match side {
            Side::Buy => &mut self.bids,
            Side::Sell => &mut self.asks,
        }
    }

    fn best(&self, side: Side) -> Option<Price> {
        self.side(side).first().map(|l| l.price)
    }

    fn live_count(&self, side: Side) -> usize {
        self.live[side_ix(side)].len()
    }

    fn add(&mut self, side: Side, price: Price, id: u64, size: u64) {
        let levels = self.side_mut(side);
        let pos = levels.iter().position(|l| !better(side, l.price, price));
        match pos {
            Some(i) if levels[i].price == price => levels[i].orders.push((id, size)),
            Some(i) => levels.insert(i, SimLevel { price, orders: vec![(id, size)] }),
            None => levels.push(SimLevel { price, orders: vec![(id, size)] }),
        }
        let live = &mut self.live[side_ix(side)];
        self.slot.insert(id, (side, price, live.len()));
        live.push(id);
    }

    fn forget(&mut self, id: u64) {
        let (side, _, idx) = self.slot.remove(&id).expect("live order");
        let live = &mut self.live[side_ix(side)];
        live.swap_remove(idx);
        if let Some(&moved) = live.get(idx) {
            self.slot.get_mut(&moved).expect("live order").2 = idx;
        }
    }

    /// Reduce order `id` by `amount`; removes it when nothing is left.
    fn reduce(&mut self, id: u64, amount: u64) {
        let (side, price, _) = self.slot[&id];
        let levels = self.side_mut(side);
        let li = levels.iter().position(|l| l.price == price).expect("level of live order");
        let oi = levels[li].orders.iter().position(|o| o.0 == id).expect("queued order");
        let left = levels[li].orders[oi].1 - amount;
        if left == 0 {
            levels[li].orders.remove(oi);
            if levels[li].orders.is_empty() {
                levels.remove(li);
            }
            self.forget(id);
        } else {
            levels[li].orders[oi].1 = left;
        }
    }

    fn size_of(&self, id: u64) -> u64 {
        let (side, price, _) = self.slot[&id];
        let level = self.side(side).iter().find(|l| l.price == price).expect("level");
        level.orders.iter().find(|o| o.0 == id).expect("order").1
    }

    fn snapshot(&self, levels: usize) -> SnapshotRow {
        let mut row = SnapshotRow::empty(levels);
        for (slot, l) in row.asks.iter_mut().zip(&self.asks) {
            *slot = Some(LevelQuote { price: l.price, size: l.volume() });
        }
        for (slot, l) in row.bids.iter_mut().zip(&self.bids) {
            *slot = Some(LevelQuote { price: l.price, size: l.volume() });
        }
        row
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Limit(Side),
    Market(Side),
    Cancel(Side),
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    book: SimBook,
    next_id: u64,
    last_mid: Price,
    out: SynthDay,
    regime: usize,
    now: Timestamp,
}

impl<'a> Generator<'a> {
    fn draw_size(&mut self) -> u64 {
        let ln = LogNormal::new(self.cfg.size_mu, self.cfg.size_sigma).expect("validated");
        (ln.sample(&mut self.rng).round() as u64).max(1)
    }

    fn emit(&mut self, event: EventType, id: u64, size: u64, price: Price, side: Side) {
        self.out.messages.push(Message::new(self.now, event, id, size, price, side));
        self.out.snapshots.push(self.book.snapshot(self.cfg.snapshot_levels));
        self.out.regimes.push(self.regime);
    }

    fn regime_mult(&self) -> Regime {
        self.cfg.regimes.get(self.regime).copied().unwrap_or(Regime::NEUTRAL)
    }

    fn max_regime_mult(&self) -> Regime {
        let mut m = Regime::NEUTRAL;
        if !self.cfg.regimes.is_empty() {
            m = Regime { limit: 0.0, market_buy: 0.0, market_sell: 0.0, cancel: 0.0 };
            for g in &self.cfg.regimes {
                m.limit = m.limit.max(g.limit);
                m.market_buy = m.market_buy.max(g.market_buy);
                m.market_sell = m.market_sell.max(g.market_sell);
                m.cancel = m.cancel.max(g.cancel);
            }
        }
        m
    }

    /// Current intensities in the order limit buy/sell, market buy/sell,
    /// cancel buy/sell.
    fn intensities(&self, g: Regime, season: f64) -> [f64; 6] {
        let r = &self.cfg.rates;
        [
            r.limit_buy * g.limit * season,
            r.limit_sell * g.limit * season,
            r.market_buy * g.market_buy * season,
            r.market_sell * g.market_sell * season,
            r.cancel_buy * g.cancel * season * self.book.live_count(Side::Buy) as f64,
            r.cancel_sell * g.cancel * season * self.book.live_count(Side::Sell) as f64,
        ]
    }

    fn seed_book(&mut self) {
        let tick = self.cfg.tick;
        for level in 0..self.cfg.initial_levels as Price {
            for side in [Side::Buy, Side::Sell] {
                let price = match side {
                    Side::Buy => self.cfg.initial_mid - tick * (level + 1),
                    Side::Sell => self.cfg.initial_mid + tick * (level + 1),
                };
                for _ in 0..self.cfg.initial_orders_per_level {
                    let size = self.draw_size();
                    self.submit(side, price, size);
                }
            }
        }
    }

    fn submit(&mut self, side: Side, price: Price, size: u64) {
        let id = self.next_id;
        self.next_id += 1;
        self.book.add(side, price, id, size);
        self.emit(EventType::Submission, id, size, price, side);
    }

    fn limit_price(&mut self, side: Side) -> Price {
        let tick = self.cfg.tick;
        let own = self.book.best(side);
        let opp = self.book.best(side.opposite());
        let sign = match side {
            Side::Buy => 1,
            Side::Sell => -1,
        };
        let depth = Geometric::new(self.cfg.depth_p).expect("validated").sample(&mut self.rng) as Price;
        let price = match (own, opp) {
            (Some(own), Some(opp)) => {
                let gap = (opp - own).abs() / tick;
                if gap > 1 && self.rng.random::<f64>() < self.cfg.spread_stiffness {
                    own + sign * tick * self.rng.random_range(1..gap)
                } else {
                    own - sign * tick * depth
                }
            }
            (Some(own), None) => own - sign * tick * depth,
            (None, Some(opp)) => opp - sign * tick * (1 + depth),
            (None, None) => self.last_mid - sign * tick * (1 + depth),
        };
        price.max(tick)
    }

    fn market(&mut self, aggressor: Side) {
        let resting = aggressor.opposite();
        let Some((price, volume)) = self.book.side(resting).first().map(|l| (l.price, l.volume())) else {
            return;
        };
        let want = self.draw_size().min(volume);
        let mut left = want;
        while left > 0 {
            let (id, size) = self.book.side(resting)[0].orders[0];
            let take = size.min(left);
            self.book.reduce(id, take);
            left -= take;
            self.emit(EventType::Execution, id, take, price, resting);
        }
    }

    fn cancel(&mut self, side: Side) {
        let n = self.book.live_count(side);
        if n == 0 {
            return;
        }
        let id = self.book.live[side_ix(side)][self.rng.random_range(0..n)];
        let (_, price, _) = self.book.slot[&id];
        let size = self.book.size_of(id);
        if size > 1 && self.rng.random::<f64>() < self.cfg.partial_cancel_prob {
            let amount = self.rng.random_range(1..size);
            self.book.reduce(id, amount);
            self.emit(EventType::PartialCancel, id, amount, price, side);
        } else {
            self.book.reduce(id, size);
            self.emit(EventType::Deletion, id, size, price, side);
        }
    }

    fn run(mut self) -> SynthDay {
        let cfg = self.cfg;
        let start = Timestamp::from_secs(cfg.start_secs);
        self.now = start;
        self.seed_book();
        let end = start.as_secs_f64() + cfg.horizon;
        let season_max = cfg.intraday.map_or(1.0, |u| u.max_multiplier());
        let gmax = self.max_regime_mult();
        let n_regimes = cfg.regimes.len().max(1);
        let mut t = start.as_secs_f64();
        let mut next_switch = if n_regimes > 1 && cfg.regime_switch_rate > 0.0 {
            t + Exp::new(cfg.regime_switch_rate).expect("validated").sample(&mut self.rng)
        } else {
            f64::INFINITY
        };
        loop {
            let bound: f64 = self.intensities(gmax, season_max).iter().sum();
            if bound <= 0.0 {
                break;
            }
            t += Exp::new(bound).expect("positive").sample(&mut self.rng);
            while next_switch <= t {
                let step = self.rng.random_range(1..n_regimes);
                self.regime = (self.regime + step) % n_regimes;
                next_switch += Exp::new(cfg.regime_switch_rate).expect("validated").sample(&mut self.rng);
            }
            if t >= end {
                break;
            }
            let season = cfg.intraday.map_or(1.0, |u| u.multiplier(t - start.as_secs_f64()));
            let rates = self.intensities(self.regime_mult(), season);
            let total: f64 = rates.iter().sum();
            let mut u = self.rng.random::<f64>() * bound;
            if u >= total {
                continue;
            }
            let mut kind = Kind::Cancel(Side::Sell);
            for (i, r) in rates.iter().enumerate() {
                if u < *r {
                    let side = if i % 2 == 0 { Side::Buy } else { Side::Sell };
                    kind = match i / 2 {
                        0 => Kind::Limit(side),
                        1 => Kind::Market(side),
                        _ => Kind::Cancel(side),
                    };
                    break;
                }
                u -= r;
            }
            // Microsecond clock; strictly non-decreasing by construction.
            let micros = ((t * 1e6).floor() as u64).max(self.now.0);
            self.now = Timestamp(micros);
            match kind {
                Kind::Limit(side) => {
                    let price = self.limit_price(side);
                    let size = self.draw_size();
                    self.submit(side, price, size);
                }
                Kind::Market(side) => self.market(side),
                Kind::Cancel(side) => self.cancel(side),
            }
            if let (Some(b), Some(a)) = (self.book.best(Side::Buy), self.book.best(Side::Sell)) {
                self.last_mid = (a + b) / 2 / cfg.tick * cfg.tick;
            }
        }
        self.out
    }
}

/// Generate one session.
pub fn generate(config: &SynthConfig) -> Result<SynthDay, ConfigError> {
    config.validate()?;
    let generator = Generator {
        cfg: config,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        book: SimBook::new(),
        next_id: 1,
        last_mid: config.initial_mid,
        out: SynthDay {
            messages: Vec::new(),
            snapshots: Vec::new(),
            regimes: Vec::new(),
        },
        regime: 0,
        now: Timestamp::from_secs(config.start_secs),
    };
    Ok(generator.run())
}

/// Preset with one-tick spreads most of the time.
pub fn large_tick(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        spread_stiffness: 0.95,
        ..SynthConfig::default()
    }
}

/// Preset with wide, sticky spreads.
pub fn small_tick(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        spread_stiffness: 0.05,
        depth_p: 0.15,
        ..SynthConfig::default()
    }
}

/// Preset whose market order flow alternates between buy-heavy, sell-heavy
/// and balanced regimes, switching about once an hour.
pub fn regime_switching(seed: u64) -> SynthConfig {
    let (heavy, light) = (3.0, 0.25);
    SynthConfig {
        seed,
        regimes: vec![
            Regime {
                limit: 1.0,
                market_buy: heavy,
                market_sell: light,
                cancel: 1.0,
            },
            Regime {
                limit: 1.0,
                market_buy: light,
                market_sell: heavy,
                cancel: 1.0,
            },
            Regime::NEUTRAL,
        ],
        regime_switch_rate: 1.0 / 3600.0,
        ..SynthConfig::default()
    }
}

/// Named presets accepted by the command line.
pub const PRESETS: [&str; 4] = ["default", "large_tick", "small_tick", "regime_switching"];

pub fn preset(name: &str, seed: u64) -> Option<SynthConfig> {
    Some(match name {
        "default" => SynthConfig {
            seed,
            ..SynthConfig::default()
        },
        "large_tick" => large_tick(seed),
        "small_tick" => small_tick(seed),
        "regime_switching" => regime_switching(seed),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::book::{BookState, CrossingMode};

    fn short(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            horizon: 60.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let a = generate(&short(7)).unwrap();
        let b = generate(&short(7)).unwrap();
        assert_eq!(a, b);
        let c = generate(&short(8)).unwrap();
        assert_ne!(a.messages, c.messages);
    }

    #[test]
    fn one_minute_replays_cleanly() {
        let day = generate(&short(1)).unwrap();
        assert!(day.messages.len() > 40);
        let mut book = BookState::new(CrossingMode::Strict);
        for (m, snap) in day.messages.iter().zip(&day.snapshots) {
            book.apply(m).unwrap();
            book.check_invariants().unwrap();
            assert_eq!(&book.snapshot(5), snap);
        }
    }

    #[test]
    fn zero_limit_rate_side_sees_only_removals() {
        let mut cfg = short(3);
        cfg.rates.limit_sell = 0.0;
        let day = generate(&cfg).unwrap();
        let seeded = cfg.initial_levels * cfg.initial_orders_per_level * 2;
        let later_sell_submits = day.messages[seeded..]
            .iter()
            .filter(|m| m.direction == Side::Sell && m.event == EventType::Submission)
            .count();
        assert_eq!(later_sell_submits, 0);
        assert!(day.messages[seeded..].iter().any(|m| m.direction == Side::Sell));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = short(1);
        cfg.tick = 0;
        assert!(generate(&cfg).is_err());
        let mut cfg = short(1);
        cfg.rates.market_buy = -1.0;
        assert!(generate(&cfg).is_err());
        let mut cfg = short(1);
        cfg.horizon = 0.0;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn ushape_multiplier() {
        let u = UShape { amplitude: 2.0, period: 100.0 };
        assert_eq!(u.multiplier(0.0), 3.0);
        assert_eq!(u.multiplier(50.0), 1.0);
        assert!((u.multiplier(99.999) - 3.0).abs() < 1e-3);
    }
}
