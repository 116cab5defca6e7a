//! Predictive features sampled at trade events.
//!
//! A [`FeatureTape`] holds one row per trade of a session: time of day,
//! realised volatility, top-of-book imbalance, microprice and the five best
//! levels per side (or signed order flow per level). Lookback windows are
//! contiguous slices of the tape, normalised relative to the window's last
//! midprice.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lobster::{Price, SnapshotRow, Timestamp};

/// Levels per side used in feature rows.
pub const FEATURE_LEVELS: usize = 5;

/// Trades in the realised volatility rolling mean.
pub const DEFAULT_VOL_WINDOW: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("top-of-book volumes are both zero")]
    ZeroVolume,
    #[error("window of {needed} trades requested but only {available} precede the submission")]
    InsufficientHistory { needed: usize, available: usize },
    #[error("lookback must be at least one trade")]
    EmptyWindow,
}

/// Book columns in a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Prices and volumes of the best five levels.
    Raw,
    /// Signed order flow per level and side.
    OrderFlow,
}

impl FeatureMode {
    pub fn width(self) -> usize {
        SHARED_COLUMNS.len()
            + match self {
                FeatureMode::Raw => 4 * FEATURE_LEVELS,
                FeatureMode::OrderFlow => 2 * FEATURE_LEVELS,
            }
    }

    /// Column names in window order.
    pub fn names(self) -> Vec<String> {
        let mut names: Vec<String> = SHARED_COLUMNS.iter().map(|s| s.to_string()).collect();
        for l in 1..=FEATURE_LEVELS {
            match self {
                FeatureMode::Raw => {
                    names.push(format!("ask_price_{l}"));
                    names.push(format!("ask_size_{l}"));
                    names.push(format!("bid_price_{l}"));
                    names.push(format!("bid_size_{l}"));
                }
                FeatureMode::OrderFlow => {
                    names.push(format!("bid_flow_{l}"));
                    names.push(format!("ask_flow_{l}"));
                }
            }
        }
        names
    }
}

/// Columns present in both modes, in order.
pub const SHARED_COLUMNS: [&str; 4] = ["time_of_day", "realized_vol", "imbalance", "microprice"];

/// `(vb - va) / (vb + va)`.
pub fn volume_imbalance(bid_volume: f64, ask_volume: f64) -> Result<f64, FeatureError> {
    let total = bid_volume + ask_volume;
    if total <= 0.0 {
        return Err(FeatureError::ZeroVolume);
    }
    Ok((bid_volume - ask_volume) / total)
}

/// Volume-weighted top of book: the ask price weighted by bid volume and
/// vice versa.
pub fn microprice(bid_price: f64, bid_volume: f64, ask_price: f64, ask_volume: f64) -> Result<f64, FeatureError> {
    let total = bid_volume + ask_volume;
    if total <= 0.0 {
        return Err(FeatureError::ZeroVolume);
    }
    Ok(bid_volume / total * ask_price + ask_volume / total * bid_price)
}

/// Rolling mean of squared log returns of `mids` over `window` returns.
/// The first entry is 0; until `window` returns exist the mean is taken over
/// all returns so far.
pub fn realized_vol(mids: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(mids.len());
    let sq: Vec<f64> = mids.windows(2).map(|w| (w[1] / w[0]).ln().powi(2)).collect();
    let mut sum = 0.0;
    if !mids.is_empty() {
        out.push(0.0);
    }
    for i in 0..sq.len() {
        sum += sq[i];
        if i >= window {
            sum -= sq[i - window];
        }
        let n = (i + 1).min(window);
        out.push((sum / n as f64).max(0.0));
    }
    out
}

/// Order flow per level between two consecutive snapshots, `[bid_1, ask_1,
/// bid_2, ask_2, ...]`. A level whose price improved contributes its new
/// volume, an unchanged price the volume change, a worse price minus the
/// previous volume. Absent levels count as zero volume at a worse price.
pub fn order_flow(prev: &SnapshotRow, next: &SnapshotRow, levels: usize) -> Vec<f64> {
    let mut flows = Vec::with_capacity(2 * levels);
    for l in 0..levels {
        let bid = |s: &SnapshotRow| s.bids.get(l).copied().flatten();
        let ask = |s: &SnapshotRow| s.asks.get(l).copied().flatten();
        flows.push(level_flow(bid(prev).map(|q| (q.price, q.size)), bid(next).map(|q| (q.price, q.size)), true));
        flows.push(level_flow(ask(prev).map(|q| (q.price, q.size)), ask(next).map(|q| (q.price, q.size)), false));
    }
    flows
}

fn level_flow(prev: Option<(Price, u64)>, next: Option<(Price, u64)>, bid: bool) -> f64 {
    match (prev, next) {
        (None, None) => 0.0,
        (None, Some((_, v))) => v as f64,
        (Some((_, v)), None) => -(v as f64),
        (Some((p0, v0)), Some((p1, v1))) => {
            let improved = if bid { p1 > p0 } else { p1 < p0 };
            if p0 == p1 {
                v1 as f64 - v0 as f64
            } else if improved {
                v1 as f64
            } else {
                -(v0 as f64)
            }
        }
    }
}

/// Session bounds used for the time-of-day column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub open_secs: f64,
    pub close_secs: f64,
}

impl Default for Session {
    fn default() -> Self {
        Session {
            open_secs: 34_200.0,
            close_secs: 57_600.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TapeConfig {
    pub session: Session,
    pub tick: Price,
    pub vol_window: usize,
}

impl Default for TapeConfig {
    fn default() -> Self {
        TapeConfig {
            session: Session::default(),
            tick: 100,
            vol_window: DEFAULT_VOL_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TapeRow {
    time: Timestamp,
    mid: f64,
    tod: f64,
    vol: f64,
    imbalance: f64,
    micro: f64,
    /// (price, volume) per level: asks then bids, absent levels extrapolated.
    asks: [(f64, f64); FEATURE_LEVELS],
    bids: [(f64, f64); FEATURE_LEVELS],
    flows: [f64; 2 * FEATURE_LEVELS],
}

/// Feature rows at every trade of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTape {
    config: TapeConfig,
    rows: Vec<TapeRow>,
}

/// Realised volatility is reported in squared basis points.
const VOL_SCALE: f64 = 1e8;

fn signed_log1p(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

impl FeatureTape {
    /// Build from the book snapshot after each trade, in trade order.
    pub fn from_trades(trades: &[(Timestamp, SnapshotRow)], config: TapeConfig) -> FeatureTape {
        let tick = config.tick as f64;
        let span = (config.session.close_secs - config.session.open_secs).max(f64::MIN_POSITIVE);
        let mut mids = Vec::with_capacity(trades.len());
        let mut last_mid: Option<f64> = None;
        for (_, s) in trades {
            let mid = match (s.best_bid(), s.best_ask()) {
                (Some(b), Some(a)) => Some((b.price + a.price) as f64 / 2.0),
                (Some(b), None) => last_mid.or(Some(b.price as f64 + tick / 2.0)),
                (None, Some(a)) => last_mid.or(Some(a.price as f64 - tick / 2.0)),
                (None, None) => last_mid,
            };
            let mid = mid.unwrap_or(tick);
            last_mid = Some(mid);
            mids.push(mid);
        }
        let vols = realized_vol(&mids, config.vol_window);
        let mut rows = Vec::with_capacity(trades.len());
        for (i, (time, s)) in trades.iter().enumerate() {
            let mid = mids[i];
            let mut asks = [(0.0, 0.0); FEATURE_LEVELS];
            let mut bids = [(0.0, 0.0); FEATURE_LEVELS];
            let mut prev_ask = mid + tick / 2.0 - tick;
            let mut prev_bid = mid - tick / 2.0 + tick;
            for l in 0..FEATURE_LEVELS {
                asks[l] = match s.asks.get(l).copied().flatten() {
                    Some(q) => (q.price as f64, q.size as f64),
                    None => (prev_ask + tick, 0.0),
                };
                bids[l] = match s.bids.get(l).copied().flatten() {
                    Some(q) => (q.price as f64, q.size as f64),
                    None => (prev_bid - tick, 0.0),
                };
                prev_ask = asks[l].0;
                prev_bid = bids[l].0;
            }
            let (vb, va) = (bids[0].1, asks[0].1);
            let imbalance = volume_imbalance(vb, va).unwrap_or(0.0);
            let micro = microprice(bids[0].0, vb, asks[0].0, va).unwrap_or(mid);
            let flows = if i == 0 {
                [0.0; 2 * FEATURE_LEVELS]
            } else {
                let f = order_flow(&trades[i - 1].1, s, FEATURE_LEVELS);
                std::array::from_fn(|k| signed_log1p(f[k]))
            };
            rows.push(TapeRow {
                time: *time,
                mid,
                tod: (time.as_secs_f64() - config.session.open_secs) / span,
                vol: vols[i] * VOL_SCALE,
                imbalance,
                micro,
                asks,
                bids,
                flows,
            });
        }
        FeatureTape { config, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn config(&self) -> &TapeConfig {
        &self.config
    }

    pub fn trade_time(&self, i: usize) -> Timestamp {
        self.rows[i].time
    }

    /// Number of trades strictly before `t`.
    pub fn trades_before(&self, t: Timestamp) -> usize {
        self.rows.partition_point(|r| r.time < t)
    }

    /// Window of the last `lookback` trades strictly before `submit`,
    /// earliest first, flattened row-major (`lookback x mode.width()`).
    pub fn window(&self, submit: Timestamp, lookback: usize, mode: FeatureMode) -> Result<Vec<f32>, FeatureError> {
        self.window_ending(self.trades_before(submit), lookback, mode)
    }

    /// Window made of tape rows `end - lookback .. end`.
    pub fn window_ending(&self, end: usize, lookback: usize, mode: FeatureMode) -> Result<Vec<f32>, FeatureError> {
        if lookback == 0 {
            return Err(FeatureError::EmptyWindow);
        }
        if end > self.rows.len() || end < lookback {
            return Err(FeatureError::InsufficientHistory {
                needed: lookback,
                available: end.min(self.rows.len()),
            });
        }
        let tick = self.config.tick as f64;
        let anchor = self.rows[end - 1].mid;
        let rel = |p: f64| (p - anchor) / tick;
        let mut out = Vec::with_capacity(lookback * mode.width());
        for r in &self.rows[end - lookback..end] {
            out.extend_from_slice(&[r.tod as f32, r.vol as f32, r.imbalance as f32, rel(r.micro) as f32]);
            match mode {
                FeatureMode::Raw => {
                    for l in 0..FEATURE_LEVELS {
                        out.push(rel(r.asks[l].0) as f32);
                        out.push(r.asks[l].1.ln_1p() as f32);
                        out.push(rel(r.bids[l].0) as f32);
                        out.push(r.bids[l].1.ln_1p() as f32);
                    }
                }
                FeatureMode::OrderFlow => out.extend(r.flows.iter().map(|f| *f as f32)),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lobster::LevelQuote;

    fn snap(bid: (Price, u64), ask: (Price, u64)) -> SnapshotRow {
        let mut s = SnapshotRow::empty(FEATURE_LEVELS);
        s.bids[0] = Some(LevelQuote { price: bid.0, size: bid.1 });
        s.asks[0] = Some(LevelQuote { price: ask.0, size: ask.1 });
        s
    }

    #[test]
    fn imbalance_cases() {
        assert_eq!(volume_imbalance(100.0, 100.0).unwrap(), 0.0);
        assert_eq!(volume_imbalance(1.0, 0.0).unwrap(), 1.0);
        let v = volume_imbalance(442.03, 487.19).unwrap();
        assert!((v - (442.03 - 487.19) / (442.03 + 487.19)).abs() < 1e-15);
        assert!((v + 0.04860).abs() < 1e-5);
        assert_eq!(volume_imbalance(0.0, 0.0), Err(FeatureError::ZeroVolume));
    }

    #[test]
    fn microprice_cases() {
        assert_eq!(microprice(99.0, 5.0, 101.0, 5.0).unwrap(), 100.0);
        assert_eq!(microprice(99.0, 5.0, 101.0, 0.0).unwrap(), 101.0);
        let m = microprice(1381900.0, 100.0, 1383100.0, 1447.0).unwrap();
        let expect = (100.0 * 1383100.0 + 1447.0 * 1381900.0) / 1547.0;
        assert!((m - expect).abs() < 1e-6);
        assert!((m - 1381977.6).abs() < 0.1);
        assert!(microprice(1.0, 0.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn vol_cases() {
        assert!(realized_vol(&[5.0; 10], 3).iter().all(|v| *v == 0.0));
        let r: f64 = 0.01;
        let mut mids = vec![100.0];
        for i in 0..20 {
            let last = *mids.last().unwrap();
            mids.push(last * if i % 2 == 0 { r.exp() } else { (-r).exp() });
        }
        let v = realized_vol(&mids, 4);
        for x in &v[1..] {
            assert!((x - r * r).abs() < 1e-12);
        }
    }

    #[test]
    fn flow_cases() {
        let a = snap((1000, 100), (1100, 50));
        assert!(order_flow(&a, &a, 5).iter().all(|f| *f == 0.0));
        let b = snap((1000, 150), (1100, 50));
        assert_eq!(order_flow(&a, &b, 1), vec![50.0, 0.0]);
        let c = snap((1010, 40), (1100, 50));
        assert_eq!(order_flow(&a, &c, 1)[0], 40.0);
        let d = snap((990, 70), (1090, 30));
        assert_eq!(order_flow(&a, &d, 1), vec![-100.0, 30.0]);
    }

    fn tape(n: usize) -> FeatureTape {
        let trades: Vec<_> = (0..n)
            .map(|i| (Timestamp::from_secs(34_200 + i as u64), snap((1000 - 10 * (i as Price % 3), 100 + i as u64), (1100, 50))))
            .collect();
        FeatureTape::from_trades(&trades, TapeConfig { tick: 10, ..TapeConfig::default() })
    }

    #[test]
    fn window_shapes_and_causality() {
        let t = tape(50);
        let w = t.window_ending(50, 50, FeatureMode::Raw).unwrap();
        assert_eq!(w.len(), 50 * 24);
        assert!(w.iter().all(|x| x.is_finite()));
        assert_eq!(t.trades_before(Timestamp::from_secs(34_210)), 10);
        let one = t.window(Timestamp::from_secs(34_210), 1, FeatureMode::Raw).unwrap();
        assert_eq!(&one[..], &t.window_ending(10, 3, FeatureMode::Raw).unwrap()[48..]);
        assert!(matches!(
            t.window(Timestamp::from_secs(34_210), 11, FeatureMode::Raw),
            Err(FeatureError::InsufficientHistory { needed: 11, available: 10 })
        ));
    }

    #[test]
    fn raw_and_flow_share_columns() {
        let t = tape(30);
        let raw = t.window_ending(30, 20, FeatureMode::Raw).unwrap();
        let flow = t.window_ending(30, 20, FeatureMode::OrderFlow).unwrap();
        for r in 0..20 {
            assert_eq!(raw[r * 24..r * 24 + 4], flow[r * 14..r * 14 + 4]);
        }
        assert_eq!(FeatureMode::OrderFlow.names().len(), 14);
    }

    #[test]
    fn absent_levels_are_extrapolated() {
        let t = tape(2);
        let w = t.window_ending(2, 1, FeatureMode::Raw).unwrap();
        // level 2 ask sits one tick above level 1, with zero volume
        assert_eq!(w[4 + 4], w[4] + 1.0);
        assert_eq!(w[4 + 5], 0.0);
        assert_eq!(w[4 + 6], w[6] - 1.0);
    }
}
