//! LOBSTER-style message and orderbook CSV files.
//!
//! Message files have six columns and no header:
//! `Time,Type,OrderID,Size,Price,Direction`. Orderbook files have `4*L`
//! columns in the order `AskP1,AskS1,BidP1,BidS1,AskP2,...`, one row per
//! message describing the book after that message was applied.
//!
//! Time is held as integer microseconds since midnight so that a
//! parse/write round trip is exact.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Price in dollars times 10000, as in the vendor files.
pub type Price = i64;

/// Price written for an absent ask level.
pub const ABSENT_ASK_PRICE: Price = 9_999_999_999;
/// Price written for an absent bid level.
pub const ABSENT_BID_PRICE: Price = -9_999_999_999;

#[derive(Debug, Error)]
pub enum LobsterError {
    #[error("row {row}: malformed field `{field}` ({value:?}): {reason}")]
    Malformed {
        row: usize,
        field: &'static str,
        value: String,
        reason: String,
    },
    #[error("row {row}: unknown event type code {code}")]
    UnknownEventType { row: usize, code: i64 },
    #[error("row {row}: expected {expected} columns, found {found}")]
    ColumnCount {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: {reason}")]
    Invariant { row: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LobsterError>;

/// Microseconds since midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const MICROS_PER_SEC: u64 = 1_000_000;

    pub fn from_secs(secs: u64) -> Self {
        Timestamp(secs * Self::MICROS_PER_SEC)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Timestamp((secs * Self::MICROS_PER_SEC as f64).round().max(0.0) as u64)
    }

    pub fn micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / Self::MICROS_PER_SEC as f64
    }

    /// Seconds elapsed from `earlier` to `self` (negative if `self` is earlier).
    pub fn secs_since(self, earlier: Timestamp) -> f64 {
        (self.0 as f64 - earlier.0 as f64) / Self::MICROS_PER_SEC as f64
    }

    fn parse(s: &str) -> std::result::Result<Self, String> {
        let (int_part, frac_part) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if int_part.is_empty() || !int_part.bytes().all(|b| b.is_ascii_digit()) {
            return Err("expected non-negative decimal seconds".into());
        }
        if !frac_part.bytes().all(|b| b.is_ascii_digit()) {
            return Err("expected decimal digits after the point".into());
        }
        let secs: u64 = int_part.parse().map_err(|e| format!("{e}"))?;
        let mut micros = 0u64;
        for (i, b) in frac_part.bytes().enumerate() {
            let d = (b - b'0') as u64;
            if i < 6 {
                micros = micros * 10 + d;
            } else if d != 0 {
                return Err("sub-microsecond precision is not supported".into());
            }
        }
        for _ in frac_part.len()..6 {
            micros *= 10;
        }
        secs.checked_mul(Self::MICROS_PER_SEC)
            .and_then(|v| v.checked_add(micros))
            .map(Timestamp)
            .ok_or_else(|| "time overflows".to_string())
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{:06}",
            self.0 / Self::MICROS_PER_SEC,
            self.0 % Self::MICROS_PER_SEC
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Buy,
    Sell,
}

impl Side {
    pub fn code(self) -> i8 {
        match self {
            Side::Buy => 1,
            Side::Sell => -1,
        }
    }

    pub fn from_code(code: i64) -> Option<Side> {
        match code {
            1 => Some(Side::Buy),
            -1 => Some(Side::Sell),
            _ => None,
        }
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::Buy => Side::Sell,
            Side::Sell => Side::Buy,
        }
    }
}

/// LOBSTER event type codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventType {
    Submission = 1,
    PartialCancel = 2,
    Deletion = 3,
    Execution = 4,
    HiddenExecution = 5,
    CrossTrade = 6,
    Halt = 7,
}

impl EventType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: i64) -> Option<EventType> {
        Some(match code {
            1 => EventType::Submission,
            2 => EventType::PartialCancel,
            3 => EventType::Deletion,
            4 => EventType::Execution,
            5 => EventType::HiddenExecution,
            6 => EventType::CrossTrade,
            7 => EventType::Halt,
            _ => return None,
        })
    }

    /// Visible or hidden execution; these are the events of the trade clock.
    pub fn is_trade(self) -> bool {
        matches!(self, EventType::Execution | EventType::HiddenExecution)
    }
}

/// One book event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub time: Timestamp,
    pub event: EventType,
    pub order_id: u64,
    pub size: u64,
    pub price: Price,
    pub direction: Side,
}

impl Message {
    pub fn new(
        time: Timestamp,
        event: EventType,
        order_id: u64,
        size: u64,
        price: Price,
        direction: Side,
    ) -> Self {
        Message {
            time,
            event,
            order_id,
            size,
            price,
            direction,
        }
    }
}

/// Options for [`parse_messages`].
#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    pub delimiter: char,
    /// Skip blank lines instead of reporting them as malformed rows.
    pub skip_blank_lines: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            delimiter: ',',
            skip_blank_lines: true,
        }
    }
}

fn malformed(row: usize, field: &'static str, value: &str, reason: impl Into<String>) -> LobsterError {
    LobsterError::Malformed {
        row,
        field,
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn parse_int<T: std::str::FromStr>(row: usize, field: &'static str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| malformed(row, field, value, e.to_string()))
}

fn parse_message_row(row: usize, line: &str, delimiter: char) -> Result<Message> {
    let fields: Vec<&str> = line.split(delimiter).collect();
    if fields.len() != 6 {
        return Err(LobsterError::ColumnCount {
            row,
            expected: 6,
            found: fields.len(),
        });
    }
    let time = Timestamp::parse(fields[0].trim()).map_err(|r| malformed(row, "time", fields[0], r))?;
    let code: i64 = parse_int(row, "event_type", fields[1])?;
    let event = EventType::from_code(code).ok_or(LobsterError::UnknownEventType { row, code })?;
    let order_id: u64 = parse_int(row, "order_id", fields[2])?;
    let size: u64 = parse_int(row, "size", fields[3])?;
    let price: Price = parse_int(row, "price", fields[4])?;
    let dir_code: i64 = parse_int(row, "direction", fields[5])?;
    let direction =
        Side::from_code(dir_code).ok_or_else(|| malformed(row, "direction", fields[5], "expected 1 or -1"))?;
    if event == EventType::Submission && size == 0 {
        return Err(malformed(row, "size", fields[3], "submissions need size >= 1"));
    }
    if event != EventType::Halt && price <= 0 {
        return Err(malformed(row, "price", fields[4], "price must be positive"));
    }
    Ok(Message::new(time, event, order_id, size, price, direction))
}

/// Parse a message file. Rows are numbered from 1 in errors.
pub fn parse_messages<R: BufRead>(reader: R, options: &ParseOptions) -> Result<Vec<Message>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() && options.skip_blank_lines {
            continue;
        }
        out.push(parse_message_row(idx + 1, line, options.delimiter)?);
    }
    let regressions = time_regressions(&out);
    if !regressions.is_empty() {
        log::warn!(
            "{} message(s) go back in time, first at index {}",
            regressions.len(),
            regressions[0]
        );
    }
    Ok(out)
}

pub fn parse_messages_str(text: &str) -> Result<Vec<Message>> {
    parse_messages(text.as_bytes(), &ParseOptions::default())
}

/// Indices `i` where `messages[i].time < messages[i-1].time`. Equal
/// timestamps are normal and not reported.
pub fn time_regressions(messages: &[Message]) -> Vec<usize> {
    messages
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].time < w[0].time)
        .map(|(i, _)| i + 1)
        .collect()
}

pub fn format_message(m: &Message) -> String {
    format!(
        "{},{},{},{},{},{}",
        m.time,
        m.event.code(),
        m.order_id,
        m.size,
        m.price,
        m.direction.code()
    )
}

pub fn write_messages<W: Write>(messages: &[Message], mut writer: W) -> Result<()> {
    for m in messages {
        writeln!(writer, "{}", format_message(m))?;
    }
    writer.flush()?;
    Ok(())
}

/// Price and resting volume of one book level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelQuote {
    pub price: Price,
    pub size: u64,
}

/// One orderbook-file row: the top `L` levels per side. `None` marks an
/// absent level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub asks: Vec<Option<LevelQuote>>,
    pub bids: Vec<Option<LevelQuote>>,
}

impl SnapshotRow {
    pub fn empty(levels: usize) -> Self {
        SnapshotRow {
            asks: vec![None; levels],
            bids: vec![None; levels],
        }
    }

    pub fn levels(&self) -> usize {
        self.asks.len()
    }

    pub fn best_ask(&self) -> Option<LevelQuote> {
        self.asks.first().copied().flatten()
    }

    pub fn best_bid(&self) -> Option<LevelQuote> {
        self.bids.first().copied().flatten()
    }

    /// Checks the ordering invariants of a book snapshot.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.asks.len() != self.bids.len() {
            return Err("ask and bid level counts differ".into());
        }
        check_side(&self.asks, "ask", |prev, next| next > prev)?;
        check_side(&self.bids, "bid", |prev, next| next < prev)?;
        if let (Some(a), Some(b)) = (self.best_ask(), self.best_bid()) {
            if a.price <= b.price {
                return Err(format!("crossed book: ask {} <= bid {}", a.price, b.price));
            }
        }
        Ok(())
    }
}

fn check_side(
    levels: &[Option<LevelQuote>],
    name: &str,
    ordered: impl Fn(Price, Price) -> bool,
) -> std::result::Result<(), String> {
    let mut prev: Option<Price> = None;
    let mut seen_absent = false;
    for (l, q) in levels.iter().enumerate() {
        match q {
            None => seen_absent = true,
            Some(q) => {
                if seen_absent {
                    return Err(format!("{name} level {} present after an absent level", l + 1));
                }
                if let Some(p) = prev {
                    if !ordered(p, q.price) {
                        return Err(format!("{name} prices not strictly ordered at level {}", l + 1));
                    }
                }
                prev = Some(q.price);
            }
        }
    }
    Ok(())
}

fn parse_level(row: usize, price: &str, size: &str) -> Result<Option<LevelQuote>> {
    let p: Price = parse_int(row, "price", price)?;
    let s: u64 = parse_int(row, "size", size)?;
    if p == ABSENT_ASK_PRICE || p == ABSENT_BID_PRICE {
        return Ok(None);
    }
    Ok(Some(LevelQuote { price: p, size: s }))
}

/// Parse an orderbook file with `levels` levels per side.
pub fn parse_snapshots<R: BufRead>(reader: R, levels: usize) -> Result<Vec<SnapshotRow>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let row = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 * levels {
            return Err(LobsterError::ColumnCount {
                row,
                expected: 4 * levels,
                found: fields.len(),
            });
        }
        let mut snap = SnapshotRow::empty(levels);
        for l in 0..levels {
            let c = &fields[4 * l..4 * l + 4];
            snap.asks[l] = parse_level(row, c[0], c[1])?;
            snap.bids[l] = parse_level(row, c[2], c[3])?;
        }
        snap.validate()
            .map_err(|reason| LobsterError::Invariant { row, reason })?;
        out.push(snap);
    }
    Ok(out)
}

pub fn format_snapshot(s: &SnapshotRow) -> String {
    let mut parts = Vec::with_capacity(4 * s.levels());
    for l in 0..s.levels() {
        match s.asks[l] {
            Some(q) => {
                parts.push(q.price.to_string());
                parts.push(q.size.to_string());
            }
            None => {
                parts.push(ABSENT_ASK_PRICE.to_string());
                parts.push("0".into());
            }
        }
        match s.bids[l] {
            Some(q) => {
                parts.push(q.price.to_string());
                parts.push(q.size.to_string());
            }
            None => {
                parts.push(ABSENT_BID_PRICE.to_string());
                parts.push("0".into());
            }
        }
    }
    parts.join(",")
}

pub fn write_snapshots<W: Write>(rows: &[SnapshotRow], mut writer: W) -> Result<()> {
    for r in rows {
        writeln!(writer, "{}", format_snapshot(r))?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE1: &str = "34200.000841,1,24974777,100,1381900,1
34200.000841,1,24974809,1447,1383100,-1
34200.003940,1,24978469,100,1381900,1
34200.010366,1,24986889,100,1381900,1
34200.023144,1,25002805,100,1381800,1
";

    #[test]
    fn parses_first_table_row() {
        let msgs = parse_messages_str("34200.000841,1,24974777,100,1381900,1").unwrap();
        assert_eq!(
            msgs,
            vec![Message::new(
                Timestamp(34_200_000_841),
                EventType::Submission,
                24974777,
                100,
                1381900,
                Side::Buy
            )]
        );
    }

    #[test]
    fn parses_sell_direction() {
        let m = parse_messages_str("34200.000841,1,24974809,1447,1383100,-1").unwrap()[0];
        assert_eq!(m.direction, Side::Sell);
        assert_eq!(m.size, 1447);
    }

    #[test]
    fn empty_input_is_empty() {
        assert!(parse_messages_str("").unwrap().is_empty());
        let mut buf = Vec::new();
        write_messages(&[], &mut buf).unwrap();
        assert!(buf.is_empty());
    }

    #[test]
    fn table_round_trips_byte_identical() {
        let msgs = parse_messages_str(TABLE1).unwrap();
        assert_eq!(msgs.len(), 5);
        let mut buf = Vec::new();
        write_messages(&msgs, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), TABLE1);
    }

    #[test]
    fn malformed_row_reports_row_and_field() {
        let err = parse_messages_str("34200.1,1,1,100,1381900,1\n34200.2,1,x,100,1381900,1").unwrap_err();
        match err {
            LobsterError::Malformed { row, field, .. } => {
                assert_eq!(row, 2);
                assert_eq!(field, "order_id");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_event_type_is_rejected() {
        let err = parse_messages_str("34200.1,9,1,100,1381900,1").unwrap_err();
        assert!(matches!(err, LobsterError::UnknownEventType { row: 1, code: 9 }));
    }

    #[test]
    fn bad_direction_and_column_count() {
        assert!(matches!(
            parse_messages_str("34200.1,1,1,100,1381900,0").unwrap_err(),
            LobsterError::Malformed { field: "direction", .. }
        ));
        assert!(matches!(
            parse_messages_str("34200.1,1,1,100,1381900").unwrap_err(),
            LobsterError::ColumnCount { expected: 6, found: 5, .. }
        ));
    }

    #[test]
    fn time_precision() {
        assert_eq!(Timestamp::parse("1.5").unwrap(), Timestamp(1_500_000));
        assert_eq!(Timestamp::parse("1.500000000").unwrap(), Timestamp(1_500_000));
        assert!(Timestamp::parse("1.0000001").is_err());
        assert!(Timestamp::parse("-1.0").is_err());
        assert_eq!(Timestamp(34_200_000_841).to_string(), "34200.000841");
    }

    #[test]
    fn equal_timestamps_are_not_regressions() {
        let msgs = parse_messages_str(TABLE1).unwrap();
        assert!(time_regressions(&msgs).is_empty());
        let mut swapped = msgs.clone();
        swapped.swap(2, 3);
        assert_eq!(time_regressions(&swapped), vec![3]);
    }

    #[test]
    fn snapshot_single_level() {
        let rows = parse_snapshots("1383100,1447,1381900,300".as_bytes(), 1).unwrap();
        assert_eq!(rows[0].best_ask(), Some(LevelQuote { price: 1383100, size: 1447 }));
        assert_eq!(rows[0].best_bid(), Some(LevelQuote { price: 1381900, size: 300 }));
    }

    #[test]
    fn snapshot_sentinel_is_absent() {
        let rows = parse_snapshots("9999999999,0,1381900,300".as_bytes(), 1).unwrap();
        assert_eq!(rows[0].best_ask(), None);
        let rows = parse_snapshots("-9999999999,0,1381900,300".as_bytes(), 1).unwrap();
        assert_eq!(rows[0].best_ask(), None);
    }

    #[test]
    fn snapshot_errors() {
        assert!(matches!(
            parse_snapshots("1381900,10,1383100,300".as_bytes(), 1).unwrap_err(),
            LobsterError::Invariant { row: 1, .. }
        ));
        assert!(matches!(
            parse_snapshots("1,2,3".as_bytes(), 1).unwrap_err(),
            LobsterError::ColumnCount { row: 1, expected: 4, found: 3 }
        ));
        // asks must increase with depth
        assert!(parse_snapshots("1383100,1,1381900,1,1383000,1,1381800,1".as_bytes(), 2).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let text = "1383100,1447,1381900,300,9999999999,0,1381800,100\n";
        let rows = parse_snapshots(text.as_bytes(), 2).unwrap();
        let mut buf = Vec::new();
        write_snapshots(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
    }
}
