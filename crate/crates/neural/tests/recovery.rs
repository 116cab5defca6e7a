//! Training on data drawn from known survival laws.

use std::time::Instant;

use lobsurv_core::lobster::{Side, Timestamp};
use lobsurv_core::probes::{SampleMeta, SurvivalSample};
use lobsurv_neural::models::{DecoderConfig, EncoderConfig, EncoderKind, SurvivalModel};
use lobsurv_neural::params::AdamConfig;
use lobsurv_neural::training::{chronological_split, fit, fitted_config, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample(x: Vec<f32>, z: f64, delta: bool, i: usize) -> SurvivalSample {
    SurvivalSample {
        x,
        z,
        delta,
        meta: SampleMeta {
            day: 0,
            submit: Timestamp(i as u64),
            side: Side::Buy,
            price: 0,
        },
    }
}

fn train(samples: &[SurvivalSample], epochs: usize, lr: f64) -> SurvivalModel {
    let split = chronological_split(samples, 0.2, 0.0);
    let tr: Vec<&SurvivalSample> = split.train.iter().map(|i| &samples[*i]).collect();
    let va: Vec<&SurvivalSample> = split.val.iter().map(|i| &samples[*i]).collect();
    let f = samples[0].x.len();
    let enc = EncoderConfig::new(EncoderKind::Mlp, 1, f);
    let names = (0..f).map(|i| format!("x{i}")).collect();
    let cfg = fitted_config(enc, DecoderConfig::default(), names, &tr, 0).unwrap();
    let tc = TrainConfig {
        epochs,
        patience: 15,
        adam: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    fit(SurvivalModel::new(cfg).unwrap(), &tr, &va, &tc).unwrap().model
}

#[test]
fn recovers_a_covariate_dependent_weibull() {
    let start = Instant::now();
    let (shape, n) = (1.5f64, 5000);
    let scale = |x: &[f32]| (0.6 * x[0] as f64 - 0.4 * x[1] as f64).exp();
    let truth = |t: f64, x: &[f32]| (-(t / scale(x)).powf(shape)).exp();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let samples: Vec<SurvivalSample> = (0..n)
        .map(|i| {
            let x: Vec<f32> = (0..2).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let t = scale(&x) * (-u.ln()).powf(1.0 / shape);
            let c = rng.random_range(0.0..4.0);
            sample(x, t.min(c), t <= c, i)
        })
        .collect();
    let model = train(&samples, 80, 3e-3);

    let grid: Vec<f64> = (1..=50).map(|k| 2.5 * k as f64 / 50.0).collect();
    let mut total = 0.0;
    let mut count = 0;
    for _ in 0..200 {
        let x: Vec<f32> = (0..2).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let fitted = model.survival_grid(&x, &grid).unwrap();
        for (t, s) in grid.iter().zip(fitted) {
            total += (s - truth(*t, &x)).abs();
            count += 1;
        }
    }
    let mad = total / count as f64;
    assert!(mad < 0.05, "mean absolute deviation {mad}");
    assert!(start.elapsed().as_secs() < 600);
}

#[test]
fn dropping_censored_samples_changes_the_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let all: Vec<SurvivalSample> = (0..3000)
        .map(|i| {
            let x = vec![rng.random_range(-1.0f32..1.0)];
            let t = -rng.random_range(f64::EPSILON..1.0f64).ln();
            let c = rng.random_range(0.0..1.5);
            sample(x, t.min(c), t <= c, i)
        })
        .collect();
    let fills: Vec<SurvivalSample> = all.iter().filter(|s| s.delta).cloned().collect();
    assert!(fills.len() < all.len());
    let with = train(&all, 200, 1e-2);
    let without = train(&fills, 200, 1e-2);
    let probe = [0.0f32];
    let grid = [0.5, 1.0];
    let a = with.survival_grid(&probe, &grid).unwrap();
    let b = without.survival_grid(&probe, &grid).unwrap();
    // Unit exponential: S(0.5) = 0.607, S(1) = 0.368.
    assert!((a[0] - (-0.5f64).exp()).abs() < 0.05, "{a:?}");
    assert!((a[1] - (-1.0f64).exp()).abs() < 0.05, "{a:?}");
    assert!(a[1] - b[1] > 0.1, "with censoring {a:?}, fills only {b:?}");
}
