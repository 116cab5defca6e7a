use lobsurv_neural::models::{DecoderConfig, EncoderConfig, EncoderKind, ModelConfig, SurvivalModel};
use lobsurv_neural::params::{clip_global_norm, Adam, AdamConfig};
use proptest::prelude::*;

fn model(kind: EncoderKind, seed: u64) -> SurvivalModel {
    let mut enc = EncoderConfig::new(kind, 4, 3);
    enc.head_dim = 2;
    enc.latent = 3;
    enc.hidden = 5;
    let mut cfg = ModelConfig::new(enc, DecoderConfig { hidden: vec![4] }, 30.0, seed);
    cfg.feature_names = vec!["a".into(), "b".into(), "c".into()];
    SurvivalModel::new(cfg).unwrap()
}

fn kind() -> impl Strategy<Value = EncoderKind> {
    prop_oneof![Just(EncoderKind::Mlp), Just(EncoderKind::Cnn), Just(EncoderKind::ConvTransformer)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constrained_weights_stay_positive_after_any_step(
        seed in any::<u64>(),
        scale in 1e-3f32..1e4,
        lr in 1e-4f64..10.0,
        steps in 1usize..6,
    ) {
        let mut m = model(EncoderKind::Mlp, seed);
        let mut adam = Adam::new(&m.store, AdamConfig { lr, ..AdamConfig::default() });
        for s in 0..steps {
            let mut grads: Vec<Vec<f32>> = m
                .store
                .params()
                .iter()
                .enumerate()
                .map(|(p, w)| {
                    (0..w.raw.len())
                        .map(|i| scale * (((p * 31 + i * 17 + s * 7) as f32).sin()))
                        .collect()
                })
                .collect();
            clip_global_norm(&mut grads, 5.0);
            adam.step(&mut m.store, &grads);
        }
        for p in m.store.params().iter().filter(|p| p.positive) {
            prop_assert!(p.effective().iter().all(|w| *w > 0.0), "{}", p.name);
        }
    }

    #[test]
    fn survival_curves_never_rise(
        kind in kind(),
        seed in 0u64..1000,
        x in prop::collection::vec(-3.0f32..3.0, 12),
        mut grid in prop::collection::vec(0.0f64..100.0, 2..40),
    ) {
        let m = model(kind, seed);
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let s = m.survival_grid(&x, &grid).unwrap();
        for w in s.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!(s.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn refined_grids_agree_pointwise(
        seed in 0u64..1000,
        x in prop::collection::vec(-3.0f32..3.0, 12),
        coarse in prop::collection::vec(0.1f64..50.0, 1..10),
    ) {
        let m = model(EncoderKind::ConvTransformer, seed);
        let mut coarse = coarse;
        coarse.sort_by(f64::total_cmp);
        coarse.dedup();
        let mut fine: Vec<f64> = coarse.iter().flat_map(|t| [*t, t + 0.05]).collect();
        fine.sort_by(f64::total_cmp);
        let a = m.survival_grid(&x, &coarse).unwrap();
        let b = m.survival_grid(&x, &fine).unwrap();
        for (t, v) in coarse.iter().zip(&a) {
            let i = fine.iter().position(|u| u == t).unwrap();
            prop_assert_eq!(b[i], *v);
        }
    }
}
