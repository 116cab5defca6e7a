//! Attention heatmaps and Shapley attributions.
//!
//! Shapley values are computed for the game `v(S) = E_b f(x_S, b_-S)`: the
//! players in `S` take their values from the explained input `x` and the rest
//! from a background row `b`. Players are groups of input indices, so a whole
//! feature column of a window can be one player.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{ModelError, SurvivalModel};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("at least one permutation is needed")]
    NoSamples,
    #[error("background set is empty")]
    EmptyBackground,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("exact enumeration over {0} players is too large")]
    TooManyPlayers(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Post-softmax attention of every head for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    /// `heads[h][i][j]`: weight of row `j` in the output at row `i`.
    pub heads: Vec<Vec<Vec<f32>>>,
}

pub fn attention_heatmaps(model: &SurvivalModel, x: &[f32]) -> Result<AttentionRecord, InterpretError> {
    Ok(AttentionRecord {
        heads: model.attention(x)?,
    })
}

/// One head as a comma-separated `T x T` grid.
pub fn heatmap_csv(matrix: &[Vec<f32>]) -> String {
    let mut out = String::new();
    for row in matrix {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// One player per feature column of a `lookback x width` window.
pub fn column_groups(lookback: usize, width: usize) -> Vec<Vec<usize>> {
    (0..width).map(|c| (0..lookback).map(|r| r * width + c).collect()).collect()
}

/// One player per input index.
pub fn singleton_groups(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| vec![i]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyEstimate {
    pub values: Vec<f64>,
    /// Monte Carlo standard error of each value.
    pub std_errors: Vec<f64>,
    /// `f(x)`.
    pub prediction: f64,
    /// Mean of `f` over the background rows used.
    pub baseline: f64,
    /// `sum(values) - (prediction - baseline)`.
    pub efficiency_gap: f64,
    pub permutations: usize,
}

fn check(x: &[f64], background: &[Vec<f64>], groups: &[Vec<usize>]) -> Result<(), InterpretError> {
    if background.is_empty() {
        return Err(InterpretError::EmptyBackground);
    }
    if let Some(b) = background.iter().find(|b| b.len() != x.len()) {
        return Err(InterpretError::Shape(format!(
            "background row has {} values, input has {}",
            b.len(),
            x.len()
        )));
    }
    if groups.iter().flatten().any(|i| *i >= x.len()) {
        return Err(InterpretError::Shape("group index outside the input".into()));
    }
    Ok(())
}

fn compose(x: &[f64], b: &[f64], groups: &[Vec<usize>], present: &[bool]) -> Vec<f64> {
    let mut v = b.to_vec();
    for (g, on) in groups.iter().zip(present) {
        if *on {
            for i in g {
                v[*i] = x[*i];
            }
        }
    }
    v
}

/// Permutation-sampling Shapley estimate. `f` scores a batch of inputs.
/// Permutation `k` substitutes background row `k mod |background|`, so when
/// the permutation count is a multiple of the background size the values sum
/// to `f(x)` minus the background mean exactly (up to rounding).
pub fn shapley_values<F>(
    mut f: F,
    x: &[f64],
    background: &[Vec<f64>],
    groups: &[Vec<usize>],
    n_permutations: usize,
    seed: u64,
) -> Result<ShapleyEstimate, InterpretError>
where
    F: FnMut(&[Vec<f64>]) -> Result<Vec<f64>, InterpretError>,
{
    if n_permutations < 1 {
        return Err(InterpretError::NoSamples);
    }
    check(x, background, groups)?;
    let n = groups.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut sum = vec![0.0f64; n];
    let mut sq = vec![0.0f64; n];
    let mut base = 0.0f64;
    let prediction = f(&[x.to_vec()])?[0];
    for k in 0..n_permutations {
        order.shuffle(&mut rng);
        let b = &background[k % background.len()];
        let mut present = vec![false; n];
        let mut batch = Vec::with_capacity(n + 1);
        batch.push(compose(x, b, groups, &present));
        for p in &order {
            present[*p] = true;
            batch.push(compose(x, b, groups, &present));
        }
        let vals = f(&batch)?;
        if vals.len() != n + 1 {
            return Err(InterpretError::Shape(format!("model returned {} scores for {} inputs", vals.len(), n + 1)));
        }
        base += vals[0];
        for (step, p) in order.iter().enumerate() {
            let m = vals[step + 1] - vals[step];
            sum[*p] += m;
            sq[*p] += m * m;
        }
    }
    let nf = n_permutations as f64;
    let values: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let std_errors = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            if n_permutations < 2 {
                return f64::NAN;
            }
            let mean = s / nf;
            ((q / nf - mean * mean).max(0.0) * nf / (nf - 1.0) / nf).sqrt()
        })
        .collect();
    let baseline = base / nf;
    let efficiency_gap = values.iter().sum::<f64>() - (prediction - baseline);
    Ok(ShapleyEstimate {
        values,
        std_errors,
        prediction,
        baseline,
        efficiency_gap,
        permutations: n_permutations,
    })
}

/// Exact Shapley values by enumerating every coalition, with `v(S)` averaged
/// over the whole background set. Feasible for a handful of players.
pub fn exact_shapley<F>(
    mut f: F,
    x: &[f64],
    background: &[Vec<f64>],
    groups: &[Vec<usize>],
) -> Result<Vec<f64>, InterpretError>
where
    F: FnMut(&[Vec<f64>]) -> Result<Vec<f64>, InterpretError>,
{
    check(x, background, groups)?;
    let n = groups.len();
    if n > 20 {
        return Err(InterpretError::TooManyPlayers(n));
    }
    let mut value = vec![0.0f64; 1 << n];
    for (s, v) in value.iter_mut().enumerate() {
        let present: Vec<bool> = (0..n).map(|i| s & (1 << i) != 0).collect();
        let batch: Vec<Vec<f64>> = background.iter().map(|b| compose(x, b, groups, &present)).collect();
        let scores = f(&batch)?;
        *v = scores.iter().sum::<f64>() / scores.len() as f64;
    }
    let fact: Vec<f64> = (0..=n).scan(1.0, |a, k| {
        if k > 0 {
            *a *= k as f64;
        }
        Some(*a)
    })
    .collect();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        for s in 0..(1usize << n) {
            if s & (1 << i) != 0 {
                continue;
            }
            let size = s.count_ones() as usize;
            let w = fact[size] * fact[n - size - 1] / fact[n];
            *o += w * (value[s | (1 << i)] - value[s]);
        }
    }
    Ok(out)
}

/// Batch scorer for a survival model: the fill probability `1 - S(h | x)`
/// within `horizon`.
pub fn fill_probability_functional(
    model: &SurvivalModel,
    horizon: f64,
) -> impl FnMut(&[Vec<f64>]) -> Result<Vec<f64>, InterpretError> + '_ {
    move |batch: &[Vec<f64>]| {
        let windows: Vec<Vec<f32>> = batch.iter().map(|v| v.iter().map(|x| *x as f32).collect()).collect();
        let refs: Vec<&[f32]> = windows.iter().map(|w| w.as_slice()).collect();
        let lat = model.latents(&refs)?;
        let pairs: Vec<_> = lat.iter().map(|l| (l, horizon)).collect();
        Ok(model.predict_pairs(&pairs)?.into_iter().map(|p| 1.0 - p.survival).collect())
    }
}

/// One beeswarm point.
#[derive(Debug, Clone, PartialEq)]
pub struct BeeswarmRow {
    pub sample: usize,
    pub feature: String,
    pub shapley: f64,
    pub feature_value: f64,
}

pub const BEESWARM_HEADER: &str = "sample,feature,shapley,feature_value";

/// Long-format CSV, one row per (sample, feature).
pub fn beeswarm_csv(rows: &[BeeswarmRow]) -> String {
    let mut out = String::from(BEESWARM_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.sample, r.feature, r.shapley, r.feature_value);
    }
    out
}

pub fn parse_beeswarm(text: &str) -> Result<Vec<BeeswarmRow>, InterpretError> {
    let mut lines = text.lines();
    if lines.next() != Some(BEESWARM_HEADER) {
        return Err(InterpretError::Shape("missing beeswarm header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let parts: Vec<&str> = l.split(',').collect();
            let bad = || InterpretError::Shape(format!("bad beeswarm row {l}"));
            if parts.len() != 4 {
                return Err(bad());
            }
            Ok(BeeswarmRow {
                sample: parts[0].parse().map_err(|_| bad())?,
                feature: parts[1].to_string(),
                shapley: parts[2].parse().map_err(|_| bad())?,
                feature_value: parts[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Beeswarm rows for one explained sample; the feature value shown is the
/// most recent row of each column.
pub fn beeswarm_rows(sample: usize, names: &[String], values: &[f64], window: &[f64]) -> Vec<BeeswarmRow> {
    let w = names.len();
    let last = &window[window.len() - w..];
    names
        .iter()
        .zip(values)
        .zip(last)
        .map(|((name, v), x)| BeeswarmRow {
            sample,
            feature: name.clone(),
            shapley: *v,
            feature_value: *x,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn additive(batch: &[Vec<f64>]) -> Result<Vec<f64>, InterpretError> {
        Ok(batch.iter().map(|v| v[0].powi(2) + 2.0 * v[1] - v[2].sin()).collect())
    }

    fn bg() -> Vec<Vec<f64>> {
        vec![vec![0.0, 1.0, 0.5], vec![1.0, -1.0, 0.0], vec![0.5, 0.2, 2.0]]
    }

    #[test]
    fn additive_model_exact_values() {
        let x = [2.0, 3.0, 1.0];
        let groups = singleton_groups(3);
        let exact = exact_shapley(additive, &x, &bg(), &groups).unwrap();
        let mean = |f: &dyn Fn(&[f64]) -> f64| bg().iter().map(|b| f(b)).sum::<f64>() / 3.0;
        let want = [
            4.0 - mean(&|b| b[0].powi(2)),
            6.0 - mean(&|b| 2.0 * b[1]),
            -(1.0f64.sin()) - mean(&|b| -b[2].sin()),
        ];
        for (a, b) in exact.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_feature_gets_the_whole_difference() {
        let f = |b: &[Vec<f64>]| Ok(b.iter().map(|v| 3.0 * v[0] + 1.0).collect());
        let background = vec![vec![1.0], vec![3.0]];
        let est = shapley_values(f, &[5.0], &background, &singleton_groups(1), 4, 0).unwrap();
        assert!((est.values[0] - (16.0 - 7.0)).abs() < 1e-12);
        assert!(est.efficiency_gap.abs() < 1e-12);
    }

    #[test]
    fn null_feature_is_exactly_zero() {
        let f = |b: &[Vec<f64>]| Ok(b.iter().map(|v| v[0] * v[2] + v[0].exp()).collect());
        let exact = exact_shapley(f, &[1.0, 7.0, -2.0], &bg(), &singleton_groups(3)).unwrap();
        assert_eq!(exact[1], 0.0);
    }

    #[test]
    fn duplicate_features_share_equally() {
        let f = |b: &[Vec<f64>]| Ok(b.iter().map(|v| (v[0] + v[1]).tanh()).collect());
        let background = vec![vec![0.0, 0.0], vec![-1.0, -1.0]];
        let est = shapley_values(f, &[1.0, 1.0], &background, &singleton_groups(2), 2000, 3).unwrap();
        assert!((est.values[0] - est.values[1]).abs() < 3.0 * (est.std_errors[0] + est.std_errors[1]) + 1e-9);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            shapley_values(additive, &[0.0; 3], &bg(), &singleton_groups(3), 0, 0),
            Err(InterpretError::NoSamples)
        ));
        assert!(matches!(
            shapley_values(additive, &[0.0; 3], &[], &singleton_groups(3), 5, 0),
            Err(InterpretError::EmptyBackground)
        ));
    }

    #[test]
    fn beeswarm_round_trip() {
        assert_eq!(beeswarm_csv(&[]), format!("{BEESWARM_HEADER}\n"));
        let names: Vec<String> = vec!["a".into(), "b".into()];
        let mut rows = Vec::new();
        for s in 0..100 {
            rows.extend(beeswarm_rows(s, &names, &[0.1 * s as f64, -0.25], &[9.0, 9.0, s as f64, 0.5]));
        }
        assert_eq!(rows.len(), 200);
        let back = parse_beeswarm(&beeswarm_csv(&rows)).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn column_groups_cover_the_window() {
        let g = column_groups(3, 2);
        assert_eq!(g, vec![vec![0, 2, 4], vec![1, 3, 5]]);
    }
}
