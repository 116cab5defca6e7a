//! Event-by-event order book reconstruction with per-level FIFO queues.

use std::collections::{BTreeMap, HashMap, VecDeque};

use thiserror::Error;

use crate::lobster::{EventType, LevelQuote, Message, Price, Side, SnapshotRow, Timestamp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BookError {
    #[error("unknown order id {id} at {time}")]
    UnknownOrder { id: u64, time: Timestamp },
    #[error("order id {id} submitted twice at {time}")]
    DuplicateOrder { id: u64, time: Timestamp },
    #[error("{side:?} submission {id} at price {price} crosses the opposite best {opposite} at {time}")]
    Crossing {
        id: u64,
        side: Side,
        price: Price,
        opposite: Price,
        time: Timestamp,
    },
    #[error("order {id}: {reason} at {time}")]
    Inconsistent {
        id: u64,
        reason: String,
        time: Timestamp,
    },
    #[error("one-sided book: no {0:?} level")]
    OneSided(Side),
}

/// How crossing submissions are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossingMode {
    /// A submission priced at or through the opposite best is an error.
    #[default]
    Strict,
    /// Crossing submissions match against the opposite side first; any
    /// remainder rests.
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RestingOrder {
    pub id: u64,
    pub size: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Level {
    queue: VecDeque<RestingOrder>,
    volume: u64,
}

impl Level {
    pub fn volume(&self) -> u64 {
        self.volume
    }

    pub fn orders(&self) -> impl Iterator<Item = &RestingOrder> {
        self.queue.iter()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

/// A resting order executed (fully or partially) by an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fill {
    pub order_id: u64,
    pub side: Side,
    pub price: Price,
    pub size: u64,
    /// Queue index of the order when it was hit (0 = front).
    pub queue_index: usize,
}

/// What one message did to the book.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventEffect {
    /// Resting orders that traded.
    pub fills: Vec<Fill>,
    /// Volume added to the book (resting part of a submission).
    pub added: u64,
    /// Volume removed by cancellations and deletions.
    pub cancelled: u64,
    /// Volume removed by executions.
    pub executed: u64,
    /// Level touched by the event, if any.
    pub level: Option<(Side, Price)>,
    /// Queue index of the modified order before the change. Orders behind
    /// it see their shares-ahead drop by the removed amount.
    pub queue_index: Option<usize>,
    /// Hidden executions leave visible queues alone; they are reported here.
    pub hidden_trade: Option<(Side, Price, u64)>,
}

impl EventEffect {
    /// Net change of total resting volume.
    pub fn volume_delta(&self) -> i64 {
        self.added as i64 - self.cancelled as i64 - self.executed as i64
    }
}

/// Queue position of a resting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueuePosition {
    pub order_id: u64,
    pub side: Side,
    pub price: Price,
    pub shares_ahead: u64,
    pub orders_ahead: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct OrderRef {
    side: Side,
    price: Price,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BookState {
    bids: BTreeMap<Price, Level>,
    asks: BTreeMap<Price, Level>,
    orders: HashMap<u64, OrderRef>,
    clock: Option<Timestamp>,
    mode: CrossingMode,
}

impl BookState {
    pub fn new(mode: CrossingMode) -> Self {
        BookState {
            mode,
            ..Default::default()
        }
    }

    pub fn clock(&self) -> Option<Timestamp> {
        self.clock
    }

    pub fn mode(&self) -> CrossingMode {
        self.mode
    }

    fn side_map(&self, side: Side) -> &BTreeMap<Price, Level> {
        match side {
            Side::Buy => &self.bids,
            Side::Sell => &self.asks,
        }
    }

    fn side_map_mut(&mut self, side: Side) -> &mut BTreeMap<Price, Level> {
        match side {
            Side::Buy => &mut self.bids,
            Side::Sell => &mut self.asks,
        }
    }

    pub fn best_bid(&self) -> Option<Price> {
        self.bids.keys().next_back().copied()
    }

    pub fn best_ask(&self) -> Option<Price> {
        self.asks.keys().next().copied()
    }

    pub fn best(&self, side: Side) -> Option<Price> {
        match side {
            Side::Buy => self.best_bid(),
            Side::Sell => self.best_ask(),
        }
    }

    pub fn level(&self, side: Side, price: Price) -> Option<&Level> {
        self.side_map(side).get(&price)
    }

    /// Levels of one side from the best price outwards.
    pub fn levels(&self, side: Side) -> Box<dyn Iterator<Item = (Price, &Level)> + '_> {
        match side {
            Side::Buy => Box::new(self.bids.iter().rev().map(|(p, l)| (*p, l))),
            Side::Sell => Box::new(self.asks.iter().map(|(p, l)| (*p, l))),
        }
    }

    pub fn order_count(&self) -> usize {
        self.orders.len()
    }

    pub fn contains_order(&self, id: u64) -> bool {
        self.orders.contains_key(&id)
    }

    pub fn total_volume(&self) -> u64 {
        self.bids.values().chain(self.asks.values()).map(|l| l.volume).sum()
    }

    pub fn midprice(&self) -> Result<f64, BookError> {
        let bid = self.best_bid().ok_or(BookError::OneSided(Side::Buy))?;
        let ask = self.best_ask().ok_or(BookError::OneSided(Side::Sell))?;
        Ok((bid as f64 + ask as f64) / 2.0)
    }

    /// Best ask minus best bid in price units.
    pub fn spread(&self) -> Result<Price, BookError> {
        let bid = self.best_bid().ok_or(BookError::OneSided(Side::Buy))?;
        let ask = self.best_ask().ok_or(BookError::OneSided(Side::Sell))?;
        Ok(ask - bid)
    }

    pub fn queue_position(&self, order_id: u64) -> Option<QueuePosition> {
        let r = self.orders.get(&order_id)?;
        let level = self.side_map(r.side).get(&r.price)?;
        let mut shares_ahead = 0;
        for (i, o) in level.queue.iter().enumerate() {
            if o.id == order_id {
                return Some(QueuePosition {
                    order_id,
                    side: r.side,
                    price: r.price,
                    shares_ahead,
                    orders_ahead: i,
                });
            }
            shares_ahead += o.size;
        }
        None
    }

    /// Top `levels` prices and volumes per side.
    pub fn snapshot(&self, levels: usize) -> SnapshotRow {
        let mut row = SnapshotRow::empty(levels);
        for (slot, (p, l)) in row.asks.iter_mut().zip(self.levels(Side::Sell)) {
            *slot = Some(LevelQuote { price: p, size: l.volume });
        }
        for (slot, (p, l)) in row.bids.iter_mut().zip(self.levels(Side::Buy)) {
            *slot = Some(LevelQuote { price: p, size: l.volume });
        }
        row
    }

    /// Apply one message.
    pub fn apply(&mut self, msg: &Message) -> Result<EventEffect, BookError> {
        let effect = match msg.event {
            EventType::Submission => self.submit(msg)?,
            EventType::PartialCancel => self.reduce(msg, false)?,
            EventType::Deletion => self.delete(msg)?,
            EventType::Execution => self.reduce(msg, true)?,
            EventType::HiddenExecution | EventType::CrossTrade => EventEffect {
                hidden_trade: Some((msg.direction, msg.price, msg.size)),
                ..Default::default()
            },
            EventType::Halt => EventEffect::default(),
        };
        self.clock = Some(msg.time);
        Ok(effect)
    }

    fn submit(&mut self, msg: &Message) -> Result<EventEffect, BookError> {
        if self.orders.contains_key(&msg.order_id) {
            return Err(BookError::DuplicateOrder {
                id: msg.order_id,
                time: msg.time,
            });
        }
        let side = msg.direction;
        let mut effect = EventEffect::default();
        let mut remaining = msg.size;
        let crosses = |opp: Price| match side {
            Side::Buy => msg.price >= opp,
            Side::Sell => msg.price <= opp,
        };
        if let Some(opp) = self.best(side.opposite()) {
            if crosses(opp) {
                if self.mode == CrossingMode::Strict {
                    return Err(BookError::Crossing {
                        id: msg.order_id,
                        side,
                        price: msg.price,
                        opposite: opp,
                        time: msg.time,
                    });
                }
                remaining = self.match_incoming(side, msg.price, remaining, &mut effect);
            }
        }
        if remaining > 0 {
            let level = self.side_map_mut(side).entry(msg.price).or_default();
            let index = level.queue.len();
            level.queue.push_back(RestingOrder {
                id: msg.order_id,
                size: remaining,
            });
            level.volume += remaining;
            self.orders.insert(
                msg.order_id,
                OrderRef {
                    side,
                    price: msg.price,
                },
            );
            effect.added = remaining;
            effect.level = Some((side, msg.price));
            effect.queue_index = Some(index);
        }
        Ok(effect)
    }

    /// Match an aggressive order against the opposite side in price-time order.
    fn match_incoming(&mut self, side: Side, limit: Price, mut qty: u64, effect: &mut EventEffect) -> u64 {
        let resting_side = side.opposite();
        while qty > 0 {
            let Some(best) = self.best(resting_side) else { break };
            let crosses = match side {
                Side::Buy => limit >= best,
                Side::Sell => limit <= best,
            };
            if !crosses {
                break;
            }
            let level = self.side_map_mut(resting_side).get_mut(&best).expect("best level exists");
            let front = level.queue.front_mut().expect("levels are never empty");
            let traded = front.size.min(qty);
            front.size -= traded;
            level.volume -= traded;
            qty -= traded;
            let id = front.id;
            let done = front.size == 0;
            if done {
                level.queue.pop_front();
            }
            let empty = level.queue.is_empty();
            if empty {
                self.side_map_mut(resting_side).remove(&best);
            }
            if done {
                self.orders.remove(&id);
            }
            effect.executed += traded;
            effect.fills.push(Fill {
                order_id: id,
                side: resting_side,
                price: best,
                size: traded,
                queue_index: 0,
            });
        }
        qty
    }

    fn locate(&self, msg: &Message) -> Result<(OrderRef, usize, u64), BookError> {
        let r = *self.orders.get(&msg.order_id).ok_or(BookError::UnknownOrder {
            id: msg.order_id,
            time: msg.time,
        })?;
        let level = self.side_map(r.side).get(&r.price).expect("indexed order has a level");
        let (idx, order) = level
            .queue
            .iter()
            .enumerate()
            .find(|(_, o)| o.id == msg.order_id)
            .expect("indexed order is queued");
        Ok((r, idx, order.size))
    }

    fn remove_order(&mut self, r: OrderRef, idx: usize, id: u64) {
        let map = self.side_map_mut(r.side);
        let level = map.get_mut(&r.price).expect("level exists");
        let removed = level.queue.remove(idx).expect("index valid");
        level.volume -= removed.size;
        if level.queue.is_empty() {
            map.remove(&r.price);
        }
        self.orders.remove(&id);
    }

    /// Partial cancel (`execution == false`) or execution of part or all of
    /// a resting order.
    fn reduce(&mut self, msg: &Message, execution: bool) -> Result<EventEffect, BookError> {
        let (r, idx, size) = self.locate(msg)?;
        if execution && msg.direction != r.side {
            return Err(BookError::Inconsistent {
                id: msg.order_id,
                reason: format!("execution direction {:?} but order rests on {:?}", msg.direction, r.side),
                time: msg.time,
            });
        }
        if msg.size > size {
            return Err(BookError::Inconsistent {
                id: msg.order_id,
                reason: format!("size {} exceeds remaining {}", msg.size, size),
                time: msg.time,
            });
        }
        let mut effect = EventEffect {
            level: Some((r.side, r.price)),
            queue_index: Some(idx),
            ..Default::default()
        };
        if msg.size == size {
            self.remove_order(r, idx, msg.order_id);
        } else {
            let level = self.side_map_mut(r.side).get_mut(&r.price).expect("level exists");
            level.queue[idx].size -= msg.size;
            level.volume -= msg.size;
        }
        if execution {
            effect.executed = msg.size;
            effect.fills.push(Fill {
                order_id: msg.order_id,
                side: r.side,
                price: r.price,
                size: msg.size,
                queue_index: idx,
            });
        } else {
            effect.cancelled = msg.size;
        }
        Ok(effect)
    }

    fn delete(&mut self, msg: &Message) -> Result<EventEffect, BookError> {
        let (r, idx, size) = self.locate(msg)?;
        self.remove_order(r, idx, msg.order_id);
        Ok(EventEffect {
            cancelled: size,
            level: Some((r.side, r.price)),
            queue_index: Some(idx),
            ..Default::default()
        })
    }

    /// Structural invariants; used by replay checks and tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        if let (Some(b), Some(a)) = (self.best_bid(), self.best_ask()) {
            if b >= a {
                return Err(format!("crossed book: bid {b} >= ask {a}"));
            }
        }
        let mut seen = 0usize;
        for (side, map) in [(Side::Buy, &self.bids), (Side::Sell, &self.asks)] {
            for (price, level) in map {
                if level.queue.is_empty() {
                    return Err(format!("empty level {price} on {side:?}"));
                }
                let sum: u64 = level.queue.iter().map(|o| o.size).sum();
                if sum != level.volume {
                    return Err(format!("level {price} volume {} != queue sum {sum}", level.volume));
                }
                for o in &level.queue {
                    if o.size == 0 {
                        return Err(format!("order {} with zero size", o.id));
                    }
                    match self.orders.get(&o.id) {
                        Some(r) if r.side == side && r.price == *price => {}
                        _ => return Err(format!("order {} index mismatch", o.id)),
                    }
                }
                seen += level.queue.len();
            }
        }
        if seen != self.orders.len() {
            return Err(format!("{} queued orders but {} indexed (duplicate id?)", seen, self.orders.len()));
        }
        Ok(())
    }
}

/// Replay `messages` from an empty book, calling `visit` after every event.
pub fn replay_with<F>(messages: &[Message], mode: CrossingMode, mut visit: F) -> Result<BookState, BookError>
where
    F: FnMut(usize, &Message, &EventEffect, &BookState),
{
    let mut book = BookState::new(mode);
    for (i, m) in messages.iter().enumerate() {
        let effect = book.apply(m)?;
        visit(i, m, &effect, &book);
    }
    Ok(book)
}

/// Snapshot after every message.
pub fn replay_snapshots(messages: &[Message], mode: CrossingMode, levels: usize) -> Result<Vec<SnapshotRow>, BookError> {
    let mut out = Vec::with_capacity(messages.len());
    replay_with(messages, mode, |_, _, _, book| out.push(book.snapshot(levels)))?;
    Ok(out)
}
