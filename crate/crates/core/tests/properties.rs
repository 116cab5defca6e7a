use lobsurv_core::book::{BookState, CrossingMode};
use lobsurv_core::features::{microprice, volume_imbalance, FeatureMode, TapeConfig};
use lobsurv_core::lobster::{format_message, parse_messages_str, write_messages, EventType, Message, Side, Timestamp};
use lobsurv_core::probes::DayReplay;
use lobsurv_core::synth::{self, SynthConfig};
use proptest::prelude::*;

fn event() -> impl Strategy<Value = EventType> {
    prop_oneof![
        Just(EventType::Submission),
        Just(EventType::PartialCancel),
        Just(EventType::Deletion),
        Just(EventType::Execution),
        Just(EventType::HiddenExecution),
        Just(EventType::Halt),
    ]
}

fn message() -> impl Strategy<Value = Message> {
    (
        0u64..86_400_000_000,
        event(),
        0u64..u32::MAX as u64,
        0u64..1_000_000,
        0i64..100_000_000,
        any::<bool>(),
    )
        .prop_map(|(t, e, id, size, price, buy)| {
            Message::new(Timestamp(t), e, id, size, price, if buy { Side::Buy } else { Side::Sell })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn messages_round_trip(ms in prop::collection::vec(message(), 0..40)) {
        let mut buf = Vec::new();
        write_messages(&ms, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let parsed = parse_messages_str(&text).unwrap();
        prop_assert_eq!(&parsed, &ms);
        let again: String = parsed.iter().map(|m| format_message(m) + "\n").collect();
        prop_assert_eq!(again, text);
    }

    #[test]
    fn imbalance_and_microprice_ignore_volume_scale(
        vb in 0.0f64..1e6, va in 0.0f64..1e6, c in 1e-3f64..1e3,
        pb in 1.0f64..1e6, spread in 1.0f64..1e3,
    ) {
        prop_assume!(vb + va > 1e-9);
        let pa = pb + spread;
        let i1 = volume_imbalance(vb, va).unwrap();
        let i2 = volume_imbalance(c * vb, c * va).unwrap();
        prop_assert!((-1.0..=1.0).contains(&i1));
        prop_assert!((i1 - i2).abs() <= 1e-12);
        let m1 = microprice(pb, vb, pa, va).unwrap();
        let m2 = microprice(pb, c * vb, pa, c * va).unwrap();
        prop_assert!((m1 - m2).abs() <= 1e-9 * m1.abs());
        prop_assert!(m1 >= pb - 1e-9 && m1 <= pa + 1e-9);
    }
}

fn short_day(seed: u64, stiffness: f64, depth_p: f64) -> SynthConfig {
    SynthConfig {
        seed,
        horizon: 300.0,
        spread_stiffness: stiffness,
        depth_p,
        ..SynthConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_books_keep_invariants_and_conserve_volume(
        seed in any::<u64>(), stiffness in 0.0f64..=1.0, depth_p in 0.05f64..=1.0,
    ) {
        let day = synth::generate(&short_day(seed, stiffness, depth_p)).unwrap();
        let mut book = BookState::new(CrossingMode::Strict);
        for m in &day.messages {
            let before = book.total_volume() as i128;
            let e = book.apply(m).unwrap();
            prop_assert!(book.check_invariants().is_ok());
            let delta = e.added as i128 - e.cancelled as i128 - e.executed as i128;
            prop_assert_eq!(book.total_volume() as i128 - before, delta);
            if let (Some(b), Some(a)) = (book.best_bid(), book.best_ask()) {
                prop_assert!(b < a);
            }
        }
    }

    #[test]
    fn windows_are_finite(seed in any::<u64>(), stiffness in 0.0f64..=1.0, lookback in 1usize..40) {
        let cfg = short_day(seed, stiffness, 0.35);
        let day = synth::generate(&cfg).unwrap();
        let replay = DayReplay::new(day.messages, CrossingMode::Strict, TapeConfig::default()).unwrap();
        let tape = replay.tape();
        for mode in [FeatureMode::Raw, FeatureMode::OrderFlow] {
            for end in lookback..=tape.len() {
                let w = tape.window_ending(end, lookback, mode).unwrap();
                prop_assert_eq!(w.len(), lookback * mode.width());
                prop_assert!(w.iter().all(|v| v.is_finite()));
            }
        }
    }
}
