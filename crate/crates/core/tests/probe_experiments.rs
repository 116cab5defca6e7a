//! Monte Carlo probe studies on generated days.

use lobsurv_core::book::CrossingMode;
use lobsurv_core::features::TapeConfig;
use lobsurv_core::lobster::{Side, Timestamp};
use lobsurv_core::probes::{build_dataset, fill_stats, Clock, DatasetSpec, DayReplay, ProbeMode, Resolution};
use lobsurv_core::synth::{self, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn day(cfg: SynthConfig) -> DayReplay {
    let tape = TapeConfig {
        tick: cfg.tick,
        ..TapeConfig::default()
    };
    DayReplay::new(synth::generate(&cfg).unwrap().messages, CrossingMode::Strict, tape).unwrap()
}

fn random_time(d: &DayReplay, rng: &mut impl Rng) -> Timestamp {
    Timestamp(rng.random_range(d.first_time().0..=d.last_time().0))
}

fn outcome(r: &Resolution) -> (f64, bool) {
    (r.observed(Clock::Wall), r.filled)
}

#[test]
fn one_tick_inside_fills_more_often_and_sooner_on_large_tick_days() {
    let days: Vec<DayReplay> = (0..4).map(|s| day(synth::large_tick(40 + s))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut best, mut inside) = (Vec::new(), Vec::new());
    while inside.len() < 2000 {
        let d = &days[rng.random_range(0..days.len())];
        let t = random_time(d, &mut rng);
        let side = if rng.random::<bool>() { Side::Buy } else { Side::Sell };
        let Some(k1) = d.simulate_inside_spread(side, t, 1, false).unwrap() else { continue };
        let k0 = d.simulate_inside_spread(side, t, 0, false).unwrap().expect("spread is at least one tick");
        best.push(outcome(&k0));
        inside.push(outcome(&k1));
    }
    let horizon = 60.0;
    let b = fill_stats(&best, horizon).unwrap();
    let i = fill_stats(&inside, horizon).unwrap();
    assert!(i.fill_probability > b.fill_probability, "{i:?} vs {b:?}");
    assert!(i.mean_fill_time.unwrap() < b.mean_fill_time.unwrap(), "{i:?} vs {b:?}");
}

#[test]
fn deeper_inside_never_fills_later() {
    let d = day(synth::small_tick(50));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut compared = 0;
    for _ in 0..3000 {
        let t = random_time(&d, &mut rng);
        let side = if rng.random::<bool>() { Side::Buy } else { Side::Sell };
        for k in 0..3u32 {
            let (Some(a), Some(b)) = (
                d.simulate_inside_spread(side, t, k, false).unwrap(),
                d.simulate_inside_spread(side, t, k + 1, false).unwrap(),
            ) else {
                continue;
            };
            if a.filled && b.filled {
                assert!(b.end <= a.end, "k={k} at {t}: {b:?} after {a:?}");
                assert!(b.trades <= a.trades);
                compared += 1;
            }
            if a.filled {
                assert!(b.filled, "a deeper probe stays open after a shallower one filled");
            }
        }
    }
    assert!(compared > 200, "{compared}");
}

#[test]
fn trade_clock_orders_fills_like_the_wall_clock() {
    let d = day(SynthConfig {
        seed: 60,
        ..SynthConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..2000 {
        let t = random_time(&d, &mut rng);
        let mut probes: Vec<Resolution> = Vec::new();
        for side in [Side::Buy, Side::Sell] {
            probes.extend(d.simulate_pegged(side, t).unwrap());
            for k in 0..2 {
                probes.extend(d.simulate_inside_spread(side, t, k, false).unwrap());
            }
        }
        for a in &probes {
            assert!(a.observed(Clock::Transaction) >= 1.0);
            assert!(a.observed(Clock::Wall) > 0.0);
            for b in &probes {
                if a.end < b.end {
                    assert!(a.trades <= b.trades, "{a:?} {b:?}");
                }
            }
        }
    }
}

#[test]
fn wall_and_trade_clock_datasets_pair_up() {
    let days: Vec<DayReplay> = (0..2).map(|s| day(synth::preset("default", 70 + s).unwrap())).collect();
    let spec = DatasetSpec {
        lookback: 20,
        n_per_day: 100,
        seed: 9,
        ..DatasetSpec::default()
    };
    let wall = build_dataset(&days, &spec).unwrap();
    let trades = build_dataset(
        &days,
        &DatasetSpec {
            clock: Clock::Transaction,
            ..spec.clone()
        },
    )
    .unwrap();
    assert_eq!(wall.samples.len(), 200);
    assert_eq!(trades.samples.len(), 200);
    for (w, t) in wall.samples.iter().zip(&trades.samples) {
        assert_eq!(w.meta, t.meta);
        assert_eq!(w.delta, t.delta);
        assert_eq!(w.x, t.x);
        assert_eq!(t.z, t.z.round());
        assert!(t.z >= 1.0 && w.z > 0.0);
    }
    assert_eq!(build_dataset(&days, &spec).unwrap(), wall);
}

#[test]
fn every_probe_mode_builds_full_days() {
    let days = vec![day(synth::small_tick(80))];
    for mode in [ProbeMode::Pegged, ProbeMode::Tracked, ProbeMode::InsideSpread { ticks: 1 }] {
        let d = build_dataset(
            &days,
            &DatasetSpec {
                mode,
                lookback: 10,
                ..DatasetSpec::default()
            },
        )
        .unwrap();
        assert_eq!(d.samples.len(), 100, "{mode:?}");
        assert!(d.samples.iter().all(|s| s.z > 0.0 && s.x.iter().all(|v| v.is_finite())));
    }
}

#[test]
fn trading_peaks_at_open_and_close() {
    let cfg = SynthConfig {
        seed: 90,
        ..SynthConfig::default()
    };
    let open = cfg.start_secs as f64;
    let generated = synth::generate(&cfg).unwrap();
    let n = (cfg.horizon / 300.0).ceil() as usize;
    let mut buckets = vec![0usize; n];
    for m in generated.messages.iter().filter(|m| m.event.is_trade()) {
        let b = ((m.time.as_secs_f64() - open) / 300.0) as usize;
        buckets[b.min(n - 1)] += 1;
    }
    let edge = (buckets[..6].iter().sum::<usize>() + buckets[n - 6..].iter().sum::<usize>()) as f64 / 12.0;
    let middle = buckets[n / 2 - 3..n / 2 + 3].iter().sum::<usize>() as f64 / 6.0;
    assert!(edge > 1.5 * middle, "edge {edge} middle {middle}");
}
