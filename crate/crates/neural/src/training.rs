//! Maximum-likelihood training, evaluation reports and the benchmark grid.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use lobsurv_core::probes::{Dataset, SurvivalSample};
use lobsurv_core::survival::{brier, c_td, rcll_term, CompensatedSum, ConditionalSurvival, KaplanMeier, LOG_FLOOR};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{DecoderConfig, EncoderConfig, EncoderKind, Latent, ModelConfig, ModelError, SurvivalModel};
use crate::params::{clip_global_norm, Adam, AdamConfig};
use crate::tensor::Graph;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms {norms:?}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        norms: Vec<(String, f64)>,
    },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Survival(#[from] lobsurv_core::survival::SurvivalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Chronological split: the earliest share trains, then validation, then
    /// test.
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 64,
            epochs: 60,
            patience: 10,
            clip_norm: 5.0,
            seed: 0,
            val_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.adam.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.adam.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive".into());
        }
        let f = self.val_fraction + self.test_fraction;
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0 && f < 1.0) {
            return bad("split fractions must be non-negative and sum below 1".into());
        }
        Ok(())
    }
}

/// Indices of a chronological train/validation/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Order samples by `(day, submit)` and cut into consecutive blocks.
pub fn chronological_split(samples: &[SurvivalSample], val_fraction: f64, test_fraction: f64) -> Split {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by_key(|i| (samples[*i].meta.day, samples[*i].meta.submit, *i));
    let n = idx.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = (n as f64 * val_fraction).round() as usize;
    let n_train = n.saturating_sub(n_test + n_val);
    Split {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    }
}

/// Model config with the time scale and input standardization fitted on the
/// training samples.
pub fn fitted_config(
    encoder: EncoderConfig,
    decoder: DecoderConfig,
    feature_names: Vec<String>,
    train: &[&SurvivalSample],
    seed: u64,
) -> Result<ModelConfig, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    let f = encoder.features;
    let mut sum = vec![0.0f64; f];
    let mut sq = vec![0.0f64; f];
    let mut count = 0usize;
    for s in train {
        for row in s.x.chunks(f) {
            for (c, v) in row.iter().enumerate() {
                sum[c] += *v as f64;
                sq[c] += (*v as f64).powi(2);
            }
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    let shift: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    let scale: Vec<f32> = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let var = (q / n - (s / n).powi(2)).max(0.0);
            if var.sqrt() < 1e-6 {
                1.0
            } else {
                var.sqrt() as f32
            }
        })
        .collect();
    let t_max = train.iter().map(|s| s.z).fold(0.0, f64::max);
    let mut config = ModelConfig::new(encoder, decoder, t_max, seed);
    config.feature_names = feature_names;
    config.input_shift = shift;
    config.input_scale = scale;
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters with the best validation loss (or the last epoch when there
    /// is no validation set).
    pub model: SurvivalModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

fn views<'a>(samples: &[&'a SurvivalSample]) -> (Vec<&'a [f32]>, Vec<f64>, Vec<bool>) {
    (
        samples.iter().map(|s| s.x.as_slice()).collect(),
        samples.iter().map(|s| s.z).collect(),
        samples.iter().map(|s| s.delta).collect(),
    )
}

/// Mean negative log-likelihood with frozen parameters.
pub fn mean_loss(model: &SurvivalModel, samples: &[&SurvivalSample], batch: usize) -> Result<f64, TrainError> {
    let mut acc = CompensatedSum::default();
    for chunk in samples.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let b = model.store.bind(&mut g, false);
        let (xs, zs, ds) = views(chunk);
        let loss = model.batch_loss(&mut g, &b, &xs, &zs, &ds)?;
        acc.add(g.value(loss).data()[0] as f64 * chunk.len() as f64);
    }
    Ok(acc.value() / samples.len().max(1) as f64)
}

/// Minimize the mean negative right-censored log-likelihood with Adam and
/// gradient clipping, keeping the parameters with the best validation loss.
pub fn fit(
    model: SurvivalModel,
    train: &[&SurvivalSample],
    val: &[&SurvivalSample],
    config: &TrainConfig,
) -> Result<FitResult, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    let mut model = model;
    let mut adam = Adam::new(&model.store, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_a11);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::params::ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut acc = CompensatedSum::default();
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&SurvivalSample> = chunk.iter().map(|i| train[*i]).collect();
            let (xs, zs, ds) = views(&batch);
            let mut g = Graph::new();
            let b = model.store.bind(&mut g, true);
            let loss = model.batch_loss(&mut g, &b, &xs, &zs, &ds)?;
            let value = g.value(loss).data()[0] as f64;
            let grads = g.backward(loss).map_err(ModelError::from)?;
            let mut grads = b.collect(&model.store, &grads);
            let finite = grads.iter().flatten().all(|x| x.is_finite());
            if !value.is_finite() || !finite {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    norms: model.store.norms(),
                });
            }
            clip_global_norm(&mut grads, config.clip_norm);
            adam.step(&mut model.store, &grads);
            acc.add(value * batch.len() as f64);
        }
        let train_loss = acc.value() / train.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(mean_loss(&model, val, 256)?)
        };
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:?}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if let Some(v) = val_loss {
            if !v.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: usize::MAX,
                    norms: model.store.norms(),
                });
            }
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, model.store.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, store)) => {
            model.store = store;
            Some(e)
        }
        None => history.last().map(|h| h.epoch),
    };
    Ok(FitResult {
        model,
        history,
        best_epoch,
        stopped_early,
    })
}

/// Survival values of every window at every event time, so that pairwise
/// metrics need one batched pass.
struct EventTable {
    times: Vec<f64>,
    /// `values[k][j] = S(times[k] | x_j)`.
    values: Vec<Vec<f64>>,
}

impl ConditionalSurvival<usize> for EventTable {
    fn survival(&self, t: f64, j: &usize) -> f64 {
        match self.times.binary_search_by(|p| p.total_cmp(&t)) {
            Ok(k) => self.values[k][*j],
            Err(_) => f64::NAN,
        }
    }

    fn density(&self, _t: f64, _j: &usize) -> f64 {
        f64::NAN
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrierPoint {
    pub horizon: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub events: usize,
    /// Mean of per-sample negative log-likelihood.
    pub neg_rcll_mean: f64,
    /// Standard deviation of per-sample negative log-likelihood.
    pub neg_rcll_std: f64,
    pub c_td: Option<f64>,
    /// Censored Brier score at the quartiles of observed times.
    pub brier: Vec<BrierPoint>,
    pub log_floor: f64,
}

/// Score a model on held-out samples.
pub fn evaluate(model: &SurvivalModel, samples: &[&SurvivalSample]) -> Result<EvalReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let xs: Vec<&[f32]> = samples.iter().map(|s| s.x.as_slice()).collect();
    let lat = model.latents(&xs)?;
    let own: Vec<(&Latent, f64)> = lat.iter().zip(samples).map(|(l, s)| (l, s.z)).collect();
    let preds = model.predict_pairs(&own)?;
    let mut terms = Vec::with_capacity(samples.len());
    for (i, (p, s)) in preds.iter().zip(samples).enumerate() {
        terms.push(-rcll_term(s.delta, p.survival, p.density, i)?);
    }
    let mut acc = CompensatedSum::default();
    terms.iter().for_each(|t| acc.add(*t));
    let mean = acc.value() / terms.len() as f64;
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / terms.len() as f64;

    let obs: Vec<(f64, bool)> = samples.iter().map(|s| (s.z, s.delta)).collect();
    let mut times: Vec<f64> = obs.iter().filter(|o| o.1).map(|o| o.0).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut values = Vec::with_capacity(times.len());
    for t in &times {
        let pairs: Vec<(&Latent, f64)> = lat.iter().map(|l| (l, *t)).collect();
        values.push(model.predict_pairs(&pairs)?.into_iter().map(|p| p.survival).collect());
    }
    let table = EventTable { times, values };
    let ids: Vec<usize> = (0..samples.len()).collect();
    let ctd = c_td(&table, &obs, &ids).ok();

    let g = KaplanMeier::censoring(&obs);
    let mut sorted: Vec<f64> = obs.iter().map(|o| o.0).collect();
    sorted.sort_by(f64::total_cmp);
    let mut brier_points = Vec::new();
    for q in [0.25, 0.5, 0.75] {
        let h = sorted[((sorted.len() - 1) as f64 * q).round() as usize];
        let pairs: Vec<(&Latent, f64)> = lat.iter().map(|l| (l, h)).collect();
        let s_h: Vec<f64> = model.predict_pairs(&pairs)?.into_iter().map(|p| p.survival).collect();
        let fixed = FixedHorizon { h, values: s_h };
        if let Ok(score) = brier(&fixed, &obs, &ids, h, &g) {
            brier_points.push(BrierPoint { horizon: h, score });
        }
    }
    Ok(EvalReport {
        n: samples.len(),
        events: obs.iter().filter(|o| o.1).count(),
        neg_rcll_mean: mean,
        neg_rcll_std: var.sqrt(),
        c_td: ctd,
        brier: brier_points,
        log_floor: LOG_FLOOR,
    })
}

struct FixedHorizon {
    h: f64,
    values: Vec<f64>,
}

impl ConditionalSurvival<usize> for FixedHorizon {
    fn survival(&self, t: f64, j: &usize) -> f64 {
        if t == self.h {
            self.values[*j]
        } else {
            f64::NAN
        }
    }

    fn density(&self, _t: f64, _j: &usize) -> f64 {
        f64::NAN
    }
}

/// Architecture shared by every benchmark cell; kind and lookback vary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub encoders: Vec<EncoderKind>,
    pub lookbacks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub template: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkCell {
    pub encoder: EncoderKind,
    pub lookback: usize,
    pub kernel: usize,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub cells: Vec<BenchmarkCell>,
    pub split: SplitSizes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct Job {
    encoder: EncoderKind,
    lookback: usize,
    kernel: usize,
    seed: u64,
}

fn run_jobs(
    dataset: &Dataset,
    jobs: &[Job],
    template: &EncoderConfig,
    decoder: &DecoderConfig,
    train_cfg: &TrainConfig,
    threads: usize,
) -> Result<BenchmarkResult, TrainError> {
    train_cfg.validate()?;
    let split = chronological_split(&dataset.samples, train_cfg.val_fraction, train_cfg.test_fraction);
    if split.test.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let mut truncated: Vec<(usize, Dataset)> = Vec::new();
    for j in jobs {
        if !truncated.iter().any(|(t, _)| *t == j.lookback) {
            if j.lookback > dataset.manifest.lookback || j.lookback == 0 {
                return Err(TrainError::Config(format!(
                    "lookback {} outside the dataset's 1..={}",
                    j.lookback, dataset.manifest.lookback
                )));
            }
            truncated.push((j.lookback, dataset.truncate_lookback(j.lookback)));
        }
    }
    let results: Mutex<Vec<Option<Result<BenchmarkCell, TrainError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= jobs.len() {
            break;
        }
        let j = &jobs[i];
        let data = &truncated.iter().find(|(t, _)| *t == j.lookback).expect("prepared").1;
        let cell = run_cell(data, &split, j, template, decoder, train_cfg);
        results.lock().expect("no panics while holding the lock")[i] = Some(cell);
    };
    std::thread::scope(|s| {
        for _ in 1..threads.max(1) {
            s.spawn(work);
        }
        work();
    });
    let cells = results
        .into_inner()
        .expect("no panics while holding the lock")
        .into_iter()
        .map(|c| c.expect("every job ran"))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BenchmarkResult {
        cells,
        split: SplitSizes {
            train: split.train.len(),
            val: split.val.len(),
            test: split.test.len(),
        },
    })
}

fn run_cell(
    data: &Dataset,
    split: &Split,
    job: &Job,
    template: &EncoderConfig,
    decoder: &DecoderConfig,
    train_cfg: &TrainConfig,
) -> Result<BenchmarkCell, TrainError> {
    let pick = |idx: &[usize]| -> Vec<&SurvivalSample> { idx.iter().map(|i| &data.samples[*i]).collect() };
    let (train, val, test) = (pick(&split.train), pick(&split.val), pick(&split.test));
    let mut enc = template.clone();
    enc.kind = job.encoder;
    enc.lookback = job.lookback;
    enc.kernel = job.kernel;
    enc.features = data.manifest.width;
    let config = fitted_config(enc, decoder.clone(), data.manifest.feature_names.clone(), &train, job.seed)?;
    let model = SurvivalModel::new(config)?;
    let cfg = TrainConfig {
        seed: job.seed,
        ..train_cfg.clone()
    };
    let fit = fit(model, &train, &val, &cfg)?;
    let report = evaluate(&fit.model, &test)?;
    log::info!(
        "{} T={} s={} seed={}: neg rcll {:.4}",
        job.encoder.name(),
        job.lookback,
        job.kernel,
        job.seed,
        report.neg_rcll_mean
    );
    Ok(BenchmarkCell {
        encoder: job.encoder,
        lookback: job.lookback,
        kernel: job.kernel,
        seed: job.seed,
        epochs_run: fit.history.len(),
        best_epoch: fit.best_epoch,
        report,
    })
}

/// Fit and score every (encoder, lookback, seed) cell on one chronological
/// split of `dataset`, whose windows must be at least as long as the
/// longest lookback.
pub fn benchmark_suite(dataset: &Dataset, spec: &BenchmarkSpec) -> Result<BenchmarkResult, TrainError> {
    if spec.seeds.len() < 2 {
        return Err(TrainError::Config("at least two seeds are needed for a spread".into()));
    }
    let mut jobs = Vec::new();
    for e in &spec.encoders {
        for t in &spec.lookbacks {
            for s in &spec.seeds {
                jobs.push(Job {
                    encoder: *e,
                    lookback: *t,
                    kernel: spec.template.kernel,
                    seed: *s,
                });
            }
        }
    }
    run_jobs(dataset, &jobs, &spec.template, &spec.decoder, &spec.train, spec.threads)
}

/// The attention encoder at one lookback for each kernel size.
pub fn kernel_sweep(
    dataset: &Dataset,
    kernels: &[usize],
    lookback: usize,
    seeds: &[u64],
    template: &EncoderConfig,
    decoder: &DecoderConfig,
    train: &TrainConfig,
    threads: usize,
) -> Result<BenchmarkResult, TrainError> {
    let mut jobs = Vec::new();
    for k in kernels {
        for s in seeds {
            jobs.push(Job {
                encoder: EncoderKind::ConvTransformer,
                lookback,
                kernel: *k,
                seed: *s,
            });
        }
    }
    run_jobs(dataset, &jobs, template, decoder, train, threads)
}

impl BenchmarkResult {
    fn values(&self, keep: impl Fn(&BenchmarkCell) -> bool) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| keep(c))
            .map(|c| c.report.neg_rcll_mean)
            .collect()
    }

    /// Mean and standard deviation over seeds of the negative log-likelihood.
    pub fn summary(&self, encoder: EncoderKind, lookback: usize) -> Option<(f64, f64)> {
        let v = self.values(|c| c.encoder == encoder && c.lookback == lookback);
        (!v.is_empty()).then(|| mean_std(&v))
    }

    fn lookbacks(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.cells.iter().map(|c| c.lookback).collect();
        t.sort();
        t.dedup();
        t
    }

    fn encoders(&self) -> Vec<EncoderKind> {
        let mut out: Vec<EncoderKind> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.encoder) {
                out.push(c.encoder);
            }
        }
        out
    }

    /// Rows per encoder, one `mean ± std` column per lookback.
    pub fn score_table(&self) -> String {
        let ts = self.lookbacks();
        let mut out = String::from("model");
        for t in &ts {
            out.push_str(&format!(",T={t}"));
        }
        out.push('\n');
        for e in self.encoders() {
            out.push_str(e.name());
            for t in &ts {
                match self.summary(e, *t) {
                    Some((m, s)) => out.push_str(&format!(",{m:.4} ± {s:.4}")),
                    None => out.push_str(",-"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Percentage improvement over the MLP baseline,
    /// `100 (mlp - model) / mlp`, from seed means.
    pub fn improvement(&self, encoder: EncoderKind, lookback: usize) -> Option<f64> {
        let (base, _) = self.summary(EncoderKind::Mlp, lookback)?;
        let (m, _) = self.summary(encoder, lookback)?;
        Some(100.0 * (base - m) / base)
    }

    pub fn improvement_table(&self) -> String {
        let ts = self.lookbacks();
        let mut out = String::from("model");
        for t in &ts {
            out.push_str(&format!(",T={t}"));
        }
        out.push('\n');
        for e in self.encoders().into_iter().filter(|e| *e != EncoderKind::Mlp) {
            out.push_str(e.name());
            for t in &ts {
                match self.improvement(e, *t) {
                    Some(p) => out.push_str(&format!(",{p:.2}%")),
                    None => out.push_str(",-"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Kernel size against `mean ± std`.
    pub fn kernel_table(&self) -> String {
        let mut ks: Vec<usize> = self.cells.iter().map(|c| c.kernel).collect();
        ks.sort();
        ks.dedup();
        let mut out = String::from("kernel,neg_rcll\n");
        for k in ks {
            let (m, s) = mean_std(&self.values(|c| c.kernel == k));
            out.push_str(&format!("{k},{m:.4} ± {s:.4}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lobsurv_core::lobster::{Side, Timestamp};
    use lobsurv_core::probes::SampleMeta;
    use rand::Rng;
    use rand_distr::{Distribution, Exp};

    fn sample(x: Vec<f32>, z: f64, delta: bool, i: usize) -> SurvivalSample {
        SurvivalSample {
            x,
            z,
            delta,
            meta: SampleMeta {
                day: i / 100,
                submit: Timestamp(i as u64),
                side: Side::Buy,
                price: 0,
            },
        }
    }

    /// Two clusters with exponential fill times of rates 1 and 10.
    fn toy(n: usize, seed: u64) -> Vec<SurvivalSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let fast = i % 2 == 0;
                let rate = if fast { 10.0 } else { 1.0 };
                let z: f64 = Exp::new(rate).unwrap().sample(&mut rng);
                let c: f64 = Exp::new(0.3).unwrap().sample(&mut rng);
                let x = vec![if fast { 1.0 } else { -1.0 }, rng.random_range(-0.1..0.1)];
                sample(x, z.min(c).max(1e-6), z <= c, i)
            })
            .collect()
    }

    fn small_model(train: &[&SurvivalSample], seed: u64) -> SurvivalModel {
        let mut e = EncoderConfig::new(EncoderKind::Mlp, 1, 2);
        e.hidden = 8;
        e.layers = 1;
        e.latent = 4;
        let names = vec!["a".to_string(), "b".to_string()];
        SurvivalModel::new(fitted_config(e, DecoderConfig { hidden: vec![8, 8] }, names, train, seed).unwrap()).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = toy(50, 1);
        let refs: Vec<&SurvivalSample> = data.iter().collect();
        let m = small_model(&refs, 3);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let r = fit(m.clone(), &refs, &[], &cfg).unwrap();
        assert_eq!(r.model, m);
        assert!(r.history.is_empty());
    }

    #[test]
    fn toy_loss_decreases() {
        let data = toy(400, 2);
        let refs: Vec<&SurvivalSample> = data.iter().collect();
        let m = small_model(&refs, 0);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 400,
            adam: AdamConfig {
                lr: 0.01,
                ..Default::default()
            },
            ..Default::default()
        };
        let r = fit(m, &refs, &[], &cfg).unwrap();
        let losses: Vec<f64> = r.history.iter().map(|h| h.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy(120, 4);
        let refs: Vec<&SurvivalSample> = data.iter().collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..Default::default()
        };
        let a = fit(small_model(&refs, 1), &refs[..90], &refs[90..], &cfg).unwrap();
        let b = fit(small_model(&refs, 1), &refs[..90], &refs[90..], &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        let ra = evaluate(&a.model, &refs[90..]).unwrap();
        let rb = evaluate(&b.model, &refs[90..]).unwrap();
        assert_eq!(ra, rb);
        let json = serde_json::to_string(&ra).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), ra);
    }

    #[test]
    fn split_is_chronological_and_disjoint() {
        let mut data = toy(300, 5);
        data.reverse();
        let s = chronological_split(&data, 0.2, 0.2);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 300);
        let key = |i: &usize| (data[*i].meta.day, data[*i].meta.submit);
        let last_train = s.train.iter().map(key).max().unwrap();
        assert!(s.val.iter().chain(&s.test).all(|i| key(i) >= last_train));
        let last_val = s.val.iter().map(key).max().unwrap();
        assert!(s.test.iter().all(|i| key(i) >= last_val));
    }

    #[test]
    fn evaluate_matches_direct_rcll() {
        let data = toy(60, 6);
        let refs: Vec<&SurvivalSample> = data.iter().collect();
        let m = small_model(&refs, 2);
        let report = evaluate(&m, &refs).unwrap();
        let xs: Vec<&[f32]> = refs.iter().map(|s| s.x.as_slice()).collect();
        let obs: Vec<(f64, bool)> = refs.iter().map(|s| (s.z, s.delta)).collect();
        let lat = m.latents(&xs).unwrap();
        let direct = lobsurv_core::survival::rcll(&m, &obs, &lat).unwrap();
        assert!((report.neg_rcll_mean + direct).abs() < 1e-9);
        let ctd = c_td(&m, &obs, &lat).unwrap();
        assert_eq!(report.c_td, Some(ctd));
        // the graph loss agrees with the evaluation path up to f32 rounding
        let loss = mean_loss(&m, &refs, 7).unwrap();
        assert!((loss - report.neg_rcll_mean).abs() < 1e-4 * report.neg_rcll_mean.abs().max(1.0));
    }

    #[test]
    fn mlp_improvement_over_itself_is_zero() {
        let cell = |e, v| BenchmarkCell {
            encoder: e,
            lookback: 5,
            kernel: 3,
            seed: 0,
            epochs_run: 1,
            best_epoch: Some(0),
            report: EvalReport {
                n: 1,
                events: 1,
                neg_rcll_mean: v,
                neg_rcll_std: 0.0,
                c_td: None,
                brier: vec![],
                log_floor: LOG_FLOOR,
            },
        };
        let r = BenchmarkResult {
            cells: vec![cell(EncoderKind::Mlp, 2.0), cell(EncoderKind::Cnn, 1.5)],
            split: SplitSizes { train: 1, val: 0, test: 1 },
        };
        assert_eq!(r.improvement(EncoderKind::Mlp, 5), Some(0.0));
        assert_eq!(r.improvement(EncoderKind::Cnn, 5), Some(25.0));
        assert!(r.improvement_table().contains("cnn,25.00%"));
    }

    #[test]
    fn bad_configs() {
        let cfg = TrainConfig {
            adam: AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            val_fraction: 0.6,
            test_fraction: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
