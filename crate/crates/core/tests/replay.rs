//! Replay of generated days against the generator's own order book files.

use std::time::Instant;

use lobsurv_core::book::{replay_snapshots, replay_with, BookState, CrossingMode};
use lobsurv_core::features::TapeConfig;
use lobsurv_core::lobster::{parse_messages, parse_snapshots, write_messages, write_snapshots, ParseOptions, Side};
use lobsurv_core::probes::DayReplay;
use lobsurv_core::synth::{self, SynthConfig};

#[test]
fn ten_days_match_generated_orderbook_files() {
    let start = Instant::now();
    let mut total = 0usize;
    for seed in 1..=10u64 {
        let day = synth::generate(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut msg_file = Vec::new();
        write_messages(&day.messages, &mut msg_file).unwrap();
        let mut book_file = Vec::new();
        write_snapshots(&day.snapshots, &mut book_file).unwrap();

        let messages = parse_messages(msg_file.as_slice(), &ParseOptions::default()).unwrap();
        let expected = parse_snapshots(book_file.as_slice(), 5).unwrap();
        assert_eq!(messages.len(), expected.len());

        let mut violations = 0usize;
        let mut row = 0usize;
        replay_with(&messages, CrossingMode::Strict, |i, _, _, book| {
            if book.check_invariants().is_err() {
                violations += 1;
            }
            assert_eq!(book.snapshot(5), expected[i], "day {seed}, row {}", i + 1);
            row += 1;
        })
        .unwrap();
        assert_eq!(violations, 0, "day {seed}");
        assert_eq!(row, expected.len());
        total += messages.len();
    }
    assert!(total > 100_000, "{total} messages over ten days");
    assert!(start.elapsed().as_secs() < 60, "{:?}", start.elapsed());
}

#[test]
fn resting_volume_changes_only_through_reported_amounts() {
    let day = synth::generate(&SynthConfig {
        seed: 4,
        horizon: 3_600.0,
        ..synth::small_tick(4)
    })
    .unwrap();
    let mut book = BookState::new(CrossingMode::Strict);
    for m in &day.messages {
        let before = book.total_volume() as i128;
        let e = book.apply(m).unwrap();
        let after = book.total_volume() as i128;
        assert_eq!(after - before, e.added as i128 - e.cancelled as i128 - e.executed as i128, "{m:?}");
        let filled: u64 = e.fills.iter().map(|f| f.size).sum();
        assert_eq!(filled, e.executed);
    }
}

#[test]
fn probes_leave_the_replay_untouched() {
    let day = synth::generate(&SynthConfig {
        seed: 9,
        ..synth::large_tick(9)
    })
    .unwrap();
    let before = replay_snapshots(&day.messages, CrossingMode::Strict, 50).unwrap();
    let replay = DayReplay::new(day.messages.clone(), CrossingMode::Strict, TapeConfig::default()).unwrap();
    let (t0, t1) = (replay.first_time().0, replay.last_time().0);
    let mut resolved = 0;
    for k in 0..500u64 {
        let submit = lobsurv_core::lobster::Timestamp(t0 + (t1 - t0) * k / 500);
        for side in [Side::Buy, Side::Sell] {
            resolved += replay.simulate_pegged(side, submit).unwrap().is_some() as usize;
            resolved += replay.simulate_inside_spread(side, submit, 1, false).unwrap().is_some() as usize;
        }
    }
    assert!(resolved > 500);
    assert_eq!(replay.messages(), day.messages.as_slice());
    let after = replay_snapshots(replay.messages(), CrossingMode::Strict, 50).unwrap();
    assert!(before == after, "book replay changed after probing");
}

#[test]
fn generated_streams_replay_in_both_crossing_modes() {
    let day = synth::generate(&SynthConfig {
        seed: 12,
        horizon: 1_800.0,
        ..synth::regime_switching(12)
    })
    .unwrap();
    let strict = replay_snapshots(&day.messages, CrossingMode::Strict, 5).unwrap();
    let lenient = replay_snapshots(&day.messages, CrossingMode::Lenient, 5).unwrap();
    assert_eq!(strict, lenient);
    assert_eq!(strict, day.snapshots);
}
