//! Survival networks: an encoder maps a feature window to a latent vector and
//! a monotone decoder maps `(latent, t)` to a fill-time CDF.
//!
//! The decoder feeds `t` through weights that are positive on every path to
//! the output and uses increasing activations, so `F(t | x)` is increasing in
//! `t` and `S = 1 - F` is decreasing. The density is obtained by carrying the
//! derivative with respect to the scaled time alongside the forward pass
//! (tangent propagation through the same graph primitives), which keeps the
//! whole log-likelihood differentiable with respect to the parameters.
//! [`SurvivalModel::density_autodiff`] computes the same quantity by reverse
//! mode as an independent route.

use std::path::Path;

use lobsurv_core::probes::DatasetManifest;
use lobsurv_core::survival::ConditionalSurvival;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Bound, Init, ParamError, ParamId, ParamStore};
use crate::tensor::{causal_mask, log_sparse_mask, Graph, Tensor, TensorError, Var};

/// Added to the time derivative of the decoder logit before its log, so an
/// underflowed `tanh'` cannot produce `-inf`.
pub const DERIVATIVE_FLOOR: f32 = 1e-30;

/// Batch size used for inference.
const INFER_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input mismatch: {0}")]
    Input(String),
    #[error("{0} has no attention layer")]
    NoAttention(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("checkpoint architecture: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Mlp,
    Cnn,
    ConvTransformer,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Mlp => "mlp",
            EncoderKind::Cnn => "cnn",
            EncoderKind::ConvTransformer => "conv_transformer",
        }
    }

    pub fn parse(s: &str) -> Option<EncoderKind> {
        match s {
            "mlp" => Some(EncoderKind::Mlp),
            "cnn" => Some(EncoderKind::Cnn),
            "conv_transformer" | "conv-transformer" => Some(EncoderKind::ConvTransformer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Causal,
    LogSparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub lookback: usize,
    pub features: usize,
    pub latent: usize,
    /// Convolution kernel size.
    pub kernel: usize,
    /// Dilation of the first convolution; the CNN doubles it per layer.
    pub dilation: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Convolution layers (CNN) or hidden layers (MLP).
    pub layers: usize,
    /// Hidden width of the MLP.
    pub hidden: usize,
    pub mask: MaskKind,
}

impl EncoderConfig {
    pub fn new(kind: EncoderKind, lookback: usize, features: usize) -> EncoderConfig {
        EncoderConfig {
            kind,
            lookback,
            features,
            latent: 8,
            kernel: 3,
            dilation: 1,
            heads: 4,
            head_dim: 4,
            layers: 2,
            hidden: 16,
            mask: MaskKind::Causal,
        }
    }

    /// Channel width of the convolutional encoders.
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.lookback == 0 || self.features == 0 || self.latent == 0 {
            return bad("lookback, features and latent must be positive");
        }
        if self.kernel == 0 || self.dilation == 0 {
            return bad("kernel size and dilation must be at least 1");
        }
        if self.heads == 0 || self.head_dim == 0 {
            return bad("heads and head_dim must be positive");
        }
        if self.kind != EncoderKind::ConvTransformer && self.layers == 0 {
            return bad("at least one layer");
        }
        if self.kind == EncoderKind::Mlp && self.hidden == 0 {
            return bad("mlp hidden width must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { hidden: vec![16, 16] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Time scale: `t~ = ln(1 + t) / ln(1 + t_max)`.
    pub t_max: f64,
    /// Column names the model was built for, in order.
    pub feature_names: Vec<String>,
    /// Per-column shift and scale applied to inputs before encoding.
    pub input_shift: Vec<f32>,
    pub input_scale: Vec<f32>,
    pub seed: u64,
}

impl ModelConfig {
    /// Config with identity input scaling.
    pub fn new(encoder: EncoderConfig, decoder: DecoderConfig, t_max: f64, seed: u64) -> ModelConfig {
        let f = encoder.features;
        ModelConfig {
            encoder,
            decoder,
            t_max,
            feature_names: (0..f).map(|i| format!("f{i}")).collect(),
            input_shift: vec![0.0; f],
            input_scale: vec![1.0; f],
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        if self.decoder.hidden.is_empty() || self.decoder.hidden.contains(&0) {
            return Err(ModelError::Config("decoder needs non-empty hidden layers".into()));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(ModelError::Config(format!("t_max must be positive, got {}", self.t_max)));
        }
        let f = self.encoder.features;
        if self.feature_names.len() != f || self.input_shift.len() != f || self.input_scale.len() != f {
            return Err(ModelError::Config("feature names and scaling must match the feature count".into()));
        }
        if self.input_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(ModelError::Config("input scales must be positive".into()));
        }
        Ok(())
    }

    /// Derivative of the scaled time with respect to `t`.
    pub fn time_jacobian(&self, t: f64) -> f64 {
        1.0 / ((1.0 + t) * self.t_max.ln_1p())
    }

    pub fn scale_time(&self, t: f64) -> f64 {
        t.ln_1p() / self.t_max.ln_1p()
    }
}

/// Latent vector produced by the encoder for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent(pub Vec<f32>);

/// Encoder output on a graph.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub latent: Var,
    /// `[B*H, m, T]` attention weights, present for the attention encoder.
    pub attention: Option<Var>,
}

/// Decoder output on a graph: the CDF logit and its derivative with respect
/// to the scaled time, both `[B, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    pub logit: Var,
    pub dlogit: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalModel {
    pub config: ModelConfig,
    pub store: ParamStore,
}

/// Survival and density at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub survival: f64,
    pub density: f64,
}

fn enc_names(c: &EncoderConfig) -> Vec<(String, Vec<usize>, Init, bool)> {
    let w = c.width();
    let f = c.features;
    let std = |fan: usize| Init::Normal {
        std: 1.0 / (fan as f32).sqrt(),
    };
    let mut out = Vec::new();
    match c.kind {
        EncoderKind::ConvTransformer => {
            out.push(("enc.q.kernel".into(), vec![c.kernel, f, w], std(c.kernel * f), false));
            out.push(("enc.q.bias".into(), vec![w], Init::Zeros, false));
            out.push(("enc.kv.kernel".into(), vec![c.kernel, f, 2 * w], std(c.kernel * f), false));
            out.push(("enc.kv.bias".into(), vec![2 * w], Init::Zeros, false));
            out.push(("enc.merge.weight".into(), vec![w, c.latent], std(w), false));
            out.push(("enc.merge.bias".into(), vec![c.latent], Init::Zeros, false));
        }
        EncoderKind::Cnn => {
            for l in 0..c.layers {
                let cin = if l == 0 { f } else { w };
                out.push((format!("enc.conv{l}.kernel"), vec![c.kernel, cin, w], std(c.kernel * cin), false));
                out.push((format!("enc.conv{l}.bias"), vec![w], Init::Zeros, false));
            }
            out.push(("enc.out.weight".into(), vec![w, c.latent], std(w), false));
            out.push(("enc.out.bias".into(), vec![c.latent], Init::Zeros, false));
        }
        EncoderKind::Mlp => {
            for l in 0..c.layers {
                let fan = if l == 0 { c.lookback * f } else { c.hidden };
                out.push((format!("enc.dense{l}.weight"), vec![fan, c.hidden], std(fan), false));
                out.push((format!("enc.dense{l}.bias"), vec![c.hidden], Init::Zeros, false));
            }
            out.push(("enc.out.weight".into(), vec![c.hidden, c.latent], std(c.hidden), false));
            out.push(("enc.out.bias".into(), vec![c.latent], Init::Zeros, false));
        }
    }
    out
}

fn dec_names(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init, bool)> {
    let h = &c.decoder.hidden;
    let m = c.encoder.latent;
    let pos = |fan: usize| Init::Positive {
        mean: 1.0 / (fan as f32).sqrt(),
        std: 0.3,
    };
    let mut out = vec![
        (
            "dec.latent.weight".to_string(),
            vec![m, h[0]],
            Init::Normal {
                std: 1.0 / (m as f32).sqrt(),
            },
            false,
        ),
        ("dec.time.weight".to_string(), vec![1, h[0]], pos(1), true),
        ("dec.l0.bias".to_string(), vec![h[0]], Init::Zeros, false),
    ];
    for i in 1..h.len() {
        out.push((format!("dec.l{i}.weight"), vec![h[i - 1], h[i]], pos(h[i - 1]), true));
        out.push((format!("dec.l{i}.bias"), vec![h[i]], Init::Zeros, false));
    }
    out.push(("dec.out.weight".to_string(), vec![h[h.len() - 1], 1], pos(h[h.len() - 1]), true));
    out.push(("dec.out.bias".to_string(), vec![1], Init::Zeros, false));
    out
}

impl SurvivalModel {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<SurvivalModel, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        for (name, shape, init, positive) in enc_names(&config.encoder).into_iter().chain(dec_names(&config)) {
            store.add(&name, shape, init, positive, &mut rng)?;
        }
        Ok(SurvivalModel { config, store })
    }

    pub fn save(&self, stem: &Path) -> Result<(), ModelError> {
        self.store.save(stem, serde_json::to_value(&self.config)?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<SurvivalModel, ModelError> {
        let (store, arch) = ParamStore::load(stem)?;
        let config: ModelConfig = serde_json::from_value(arch)?;
        config.validate()?;
        let expected = enc_names(&config.encoder).into_iter().chain(dec_names(&config));
        for (name, shape, _, positive) in expected {
            let p = store.get(store.id(&name)?);
            if p.raw.shape() != shape.as_slice() || p.positive != positive {
                return Err(ModelError::Config(format!("parameter {name} does not match the architecture")));
            }
        }
        Ok(SurvivalModel { config, store })
    }

    fn id(&self, name: &str) -> ParamId {
        self.store.id(name).expect("parameter registered at construction")
    }

    /// Check a dataset's window layout and column order against the model.
    pub fn check_manifest(&self, manifest: &DatasetManifest) -> Result<(), ModelError> {
        let e = &self.config.encoder;
        if manifest.lookback != e.lookback || manifest.width != e.features {
            return Err(ModelError::Input(format!(
                "dataset windows are {}x{}, model expects {}x{}",
                manifest.lookback, manifest.width, e.lookback, e.features
            )));
        }
        if manifest.feature_names != self.config.feature_names {
            return Err(ModelError::Input("feature names or order differ from the model".into()));
        }
        Ok(())
    }

    /// Scaled input batch `[B, T, F]` as a constant.
    pub fn input(&self, g: &mut Graph, xs: &[&[f32]]) -> Result<Var, ModelError> {
        let e = &self.config.encoder;
        let n = e.lookback * e.features;
        let mut data = Vec::with_capacity(xs.len() * n);
        for x in xs {
            if x.len() != n {
                return Err(ModelError::Input(format!("window has {} values, expected {n}", x.len())));
            }
            for (i, v) in x.iter().enumerate() {
                let c = i % e.features;
                data.push((v - self.config.input_shift[c]) / self.config.input_scale[c]);
            }
        }
        Ok(g.constant(Tensor::new(vec![xs.len(), e.lookback, e.features], data)?))
    }

    fn mask(&self) -> Tensor {
        let t = self.config.encoder.lookback;
        match self.config.encoder.mask {
            MaskKind::Causal => causal_mask(t),
            MaskKind::LogSparse => log_sparse_mask(t),
        }
    }

    /// Encode `x [B, T, F]`. With `full_attention` every query row is
    /// computed (needed for heatmaps); otherwise only the final row, which is
    /// all the latent depends on.
    pub fn encode(&self, g: &mut Graph, b: &Bound, x: Var, full_attention: bool) -> Result<Encoded, ModelError> {
        let e = &self.config.encoder;
        let bs = g.shape(x)[0];
        let t = e.lookback;
        match e.kind {
            EncoderKind::ConvTransformer => {
                let w = e.width();
                let conv = g.dilated_causal_conv1d(x, b.var(self.id("enc.kv.kernel")), e.dilation)?;
                let kv = g.add_row(conv, b.var(self.id("enc.kv.bias")))?;
                let kk = g.slice(kv, 2, 0, w)?;
                let v = g.slice(kv, 2, w, w)?;
                let kh = g.split_heads(kk, e.heads)?;
                let vh = g.split_heads(v, e.heads)?;
                // the final query only sees the last (s - 1) p + 1 input rows
                let span = if full_attention {
                    t
                } else {
                    ((e.kernel - 1) * e.dilation + 1).min(t)
                };
                let xq = g.slice(x, 1, t - span, span)?;
                let conv = g.dilated_causal_conv1d(xq, b.var(self.id("enc.q.kernel")), e.dilation)?;
                let q = g.add_row(conv, b.var(self.id("enc.q.bias")))?;
                let qh = g.split_heads(q, e.heads)?;
                let full_mask = self.mask();
                let (out, weights) = if full_attention {
                    let (o, a) = g.masked_attention(qh, kh, vh, Some(&full_mask))?;
                    (g.slice(o, 1, t - 1, 1)?, a)
                } else {
                    let last = g.slice(qh, 1, span - 1, 1)?;
                    let row = Tensor::new(vec![1, t], full_mask.data()[(t - 1) * t..].to_vec())?;
                    g.masked_attention(last, kh, vh, Some(&row))?
                };
                let merged = g.merge_heads(out, e.heads)?;
                let flat = g.reshape(merged, vec![bs, w])?;
                let lin = g.matmul(flat, b.var(self.id("enc.merge.weight")))?;
                let latent = g.add_row(lin, b.var(self.id("enc.merge.bias")))?;
                Ok(Encoded {
                    latent,
                    attention: Some(weights),
                })
            }
            EncoderKind::Cnn => {
                let w = e.width();
                let mut h = x;
                for l in 0..e.layers {
                    let k = b.var(self.id(&format!("enc.conv{l}.kernel")));
                    let c = g.dilated_causal_conv1d(h, k, e.dilation << l)?;
                    let c = g.add_row(c, b.var(self.id(&format!("enc.conv{l}.bias"))))?;
                    let a = g.tanh(c);
                    h = if l > 0 { g.add(a, h)? } else { a };
                }
                let last = g.slice(h, 1, t - 1, 1)?;
                let flat = g.reshape(last, vec![bs, w])?;
                let lin = g.matmul(flat, b.var(self.id("enc.out.weight")))?;
                let latent = g.add_row(lin, b.var(self.id("enc.out.bias")))?;
                Ok(Encoded { latent, attention: None })
            }
            EncoderKind::Mlp => {
                let mut h = g.reshape(x, vec![bs, t * e.features])?;
                for l in 0..e.layers {
                    let lin = g.matmul(h, b.var(self.id(&format!("enc.dense{l}.weight"))))?;
                    let lin = g.add_row(lin, b.var(self.id(&format!("enc.dense{l}.bias"))))?;
                    h = g.tanh(lin);
                }
                let lin = g.matmul(h, b.var(self.id("enc.out.weight")))?;
                let latent = g.add_row(lin, b.var(self.id("enc.out.bias")))?;
                Ok(Encoded { latent, attention: None })
            }
        }
    }

    /// Decode `latent [B, m]` at scaled times `tt [B, 1]`.
    pub fn decode(&self, g: &mut Graph, b: &Bound, latent: Var, tt: Var) -> Result<Decoded, ModelError> {
        let hidden = &self.config.decoder.hidden;
        let wt = b.var(self.id("dec.time.weight"));
        let a = g.matmul(latent, b.var(self.id("dec.latent.weight")))?;
        let c = g.matmul(tt, wt)?;
        let pre = g.add(a, c)?;
        let pre = g.add_row(pre, b.var(self.id("dec.l0.bias")))?;
        let mut h = g.tanh(pre);
        let wt_row = g.reshape(wt, vec![hidden[0]])?;
        let slope = tanh_slope(g, h);
        let mut dh = g.mul_row(slope, wt_row)?;
        for i in 1..hidden.len() {
            let wi = b.var(self.id(&format!("dec.l{i}.weight")));
            let lin = g.matmul(h, wi)?;
            let lin = g.add_row(lin, b.var(self.id(&format!("dec.l{i}.bias"))))?;
            h = g.tanh(lin);
            let slope = tanh_slope(g, h);
            let carried = g.matmul(dh, wi)?;
            dh = g.mul(slope, carried)?;
        }
        let wo = b.var(self.id("dec.out.weight"));
        let out = g.matmul(h, wo)?;
        let logit = g.add_row(out, b.var(self.id("dec.out.bias")))?;
        let dlogit = g.matmul(dh, wo)?;
        Ok(Decoded { logit, dlogit })
    }

    fn time_column(&self, g: &mut Graph, ts: &[f64]) -> Result<Var, ModelError> {
        let data = ts.iter().map(|t| self.config.scale_time(*t) as f32).collect();
        Ok(g.constant(Tensor::new(vec![ts.len(), 1], data)?))
    }

    /// Mean negative right-censored log-likelihood of a batch, as a graph
    /// scalar. `b` decides which parameters are differentiable.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        b: &Bound,
        xs: &[&[f32]],
        zs: &[f64],
        deltas: &[bool],
    ) -> Result<Var, ModelError> {
        if xs.len() != zs.len() || xs.len() != deltas.len() || xs.is_empty() {
            return Err(ModelError::Input("batch arrays differ in length or are empty".into()));
        }
        if let Some(z) = zs.iter().find(|z| !(**z > 0.0 && z.is_finite())) {
            return Err(ModelError::Input(format!("observed time {z} is not positive")));
        }
        let x = self.input(g, xs)?;
        let enc = self.encode(g, b, x, false)?;
        let tt = self.time_column(g, zs)?;
        let d = self.decode(g, b, enc.latent, tt)?;
        let n = xs.len();
        // log F = -softplus(-o), log S = -softplus(o)
        let neg = g.scale(d.logit, -1.0);
        let sp_neg = g.softplus(neg);
        let sp_pos = g.softplus(d.logit);
        let floored = g.add_scalar(d.dlogit, DERIVATIVE_FLOOR);
        let log_d = g.log(floored)?;
        let jac = g.constant(Tensor::new(
            vec![n, 1],
            zs.iter().map(|z| self.config.time_jacobian(*z).ln() as f32).collect(),
        )?);
        let s1 = g.add(sp_neg, sp_pos)?;
        let s2 = g.sub(log_d, s1)?;
        let log_f = g.add(s2, jac)?;
        let log_s = g.scale(sp_pos, -1.0);
        let ev = g.constant(Tensor::new(vec![n, 1], deltas.iter().map(|d| *d as u8 as f32).collect())?);
        let cens = g.constant(Tensor::new(vec![n, 1], deltas.iter().map(|d| !*d as u8 as f32).collect())?);
        let a = g.mul(ev, log_f)?;
        let c = g.mul(cens, log_s)?;
        let ll = g.add(a, c)?;
        let mean = g.mean(ll);
        Ok(g.scale(mean, -1.0))
    }

    /// Latent vectors for a set of windows.
    pub fn latents(&self, xs: &[&[f32]]) -> Result<Vec<Latent>, ModelError> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(INFER_BATCH) {
            let mut g = Graph::new();
            let b = self.store.bind(&mut g, false);
            let x = self.input(&mut g, chunk)?;
            let enc = self.encode(&mut g, &b, x, false)?;
            let m = self.config.encoder.latent;
            out.extend(g.value(enc.latent).data().chunks(m).map(|c| Latent(c.to_vec())));
        }
        Ok(out)
    }

    /// Survival and density at each `(latent, t)` pair.
    pub fn predict_pairs(&self, pairs: &[(&Latent, f64)]) -> Result<Vec<Prediction>, ModelError> {
        let m = self.config.encoder.latent;
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(INFER_BATCH * 4) {
            let mut g = Graph::new();
            let b = self.store.bind(&mut g, false);
            let mut data = Vec::with_capacity(chunk.len() * m);
            for (l, _) in chunk {
                if l.0.len() != m {
                    return Err(ModelError::Input(format!("latent has {} values, expected {m}", l.0.len())));
                }
                data.extend_from_slice(&l.0);
            }
            let lat = g.constant(Tensor::new(vec![chunk.len(), m], data)?);
            let ts: Vec<f64> = chunk.iter().map(|(_, t)| *t).collect();
            let tt = self.time_column(&mut g, &ts)?;
            let d = self.decode(&mut g, &b, lat, tt)?;
            let (o, dl) = (g.value(d.logit).data(), g.value(d.dlogit).data());
            for i in 0..chunk.len() {
                out.push(self.prediction(o[i] as f64, dl[i] as f64, ts[i]));
            }
        }
        Ok(out)
    }

    fn prediction(&self, logit: f64, dlogit: f64, t: f64) -> Prediction {
        let s = 1.0 / (1.0 + logit.exp());
        let f = 1.0 - s;
        Prediction {
            survival: s,
            density: f * s * dlogit * self.config.time_jacobian(t),
        }
    }

    /// Survival and density of one latent on a time grid.
    pub fn predict_latent(&self, latent: &Latent, ts: &[f64]) -> Result<Vec<Prediction>, ModelError> {
        let pairs: Vec<(&Latent, f64)> = ts.iter().map(|t| (latent, *t)).collect();
        self.predict_pairs(&pairs)
    }

    /// `S(t | x)` on a strictly increasing grid.
    pub fn survival_grid(&self, x: &[f32], grid: &[f64]) -> Result<Vec<f64>, ModelError> {
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ModelError::Input("grid must be strictly increasing".into()));
        }
        let lat = self.latents(&[x])?.remove(0);
        Ok(self.predict_latent(&lat, grid)?.into_iter().map(|p| p.survival).collect())
    }

    /// `-dS/dt` by reverse-mode differentiation with respect to the time
    /// input.
    pub fn density_autodiff(&self, t: f64, x: &[f32]) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let xv = self.input(&mut g, &[x])?;
        let enc = self.encode(&mut g, &b, xv, false)?;
        let tt = g.leaf(Tensor::new(vec![1, 1], vec![self.config.scale_time(t) as f32])?);
        let d = self.decode(&mut g, &b, enc.latent, tt)?;
        let cdf = g.sigmoid(d.logit);
        let dfdt = g.grad_wrt_input(cdf, tt, 0)? as f64;
        Ok(dfdt * self.config.time_jacobian(t))
    }

    /// Post-softmax attention weights `[head][row][col]` for one window.
    pub fn attention(&self, x: &[f32]) -> Result<Vec<Vec<Vec<f32>>>, ModelError> {
        let e = &self.config.encoder;
        if e.kind != EncoderKind::ConvTransformer {
            return Err(ModelError::NoAttention(e.kind.name().to_string()));
        }
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let xv = self.input(&mut g, &[x])?;
        let enc = self.encode(&mut g, &b, xv, true)?;
        let w = g.value(enc.attention.expect("attention encoder"));
        let t = e.lookback;
        Ok(w.data()
            .chunks(t * t)
            .map(|h| h.chunks(t).map(|r| r.to_vec()).collect())
            .collect())
    }
}

/// `1 - h^2`, the tanh derivative written in terms of its output.
fn tanh_slope(g: &mut Graph, h: Var) -> Var {
    let sq = g.mul(h, h).expect("same shape");
    let neg = g.scale(sq, -1.0);
    g.add_scalar(neg, 1.0)
}

impl ConditionalSurvival<Latent> for SurvivalModel {
    fn survival(&self, t: f64, x: &Latent) -> f64 {
        self.predict_latent(x, &[t]).map(|p| p[0].survival).unwrap_or(f64::NAN)
    }

    fn density(&self, t: f64, x: &Latent) -> f64 {
        self.predict_latent(x, &[t]).map(|p| p[0].density).unwrap_or(f64::NAN)
    }
}

impl ConditionalSurvival<[f32]> for SurvivalModel {
    fn survival(&self, t: f64, x: &[f32]) -> f64 {
        self.latents(&[x])
            .and_then(|l| self.predict_latent(&l[0], &[t]))
            .map(|p| p[0].survival)
            .unwrap_or(f64::NAN)
    }

    fn density(&self, t: f64, x: &[f32]) -> f64 {
        self.latents(&[x])
            .and_then(|l| self.predict_latent(&l[0], &[t]))
            .map(|p| p[0].density)
            .unwrap_or(f64::NAN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn model(kind: EncoderKind, t: usize, seed: u64) -> SurvivalModel {
        let mut e = EncoderConfig::new(kind, t, 3);
        e.heads = 2;
        e.head_dim = 2;
        e.latent = 3;
        e.hidden = 5;
        SurvivalModel::new(ModelConfig::new(e, DecoderConfig { hidden: vec![4, 3] }, 100.0, seed)).unwrap()
    }

    fn window(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn decoder_at_floor_gives_one_half() {
        let mut m = model(EncoderKind::Mlp, 4, 1);
        for p in m.store.params().to_vec() {
            let id = m.store.id(&p.name).unwrap();
            if p.name.starts_with("dec.") {
                let fill = if p.positive { -40.0 } else { 0.0 };
                m.store.get_mut(id).raw.data_mut().iter_mut().for_each(|v| *v = fill);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let x = window(&mut rng, 12);
            for t in [0.01, 1.0, 50.0, 1e4] {
                let s = ConditionalSurvival::<[f32]>::survival(&m, t, &x);
                assert!((s - 0.5).abs() < 1e-5, "{s}");
            }
        }
    }

    #[test]
    fn mlp_zero_final_layer_gives_zero_latent() {
        let mut m = model(EncoderKind::Mlp, 4, 1);
        for name in ["enc.out.weight", "enc.out.bias"] {
            let id = m.store.id(name).unwrap();
            m.store.get_mut(id).raw.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let l = m.latents(&[&[0.0; 12]]).unwrap();
        assert!(l[0].0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn last_row_path_matches_full_attention() {
        let m = model(EncoderKind::ConvTransformer, 7, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Vec<f32>> = (0..3).map(|_| window(&mut rng, 21)).collect();
        let refs: Vec<&[f32]> = xs.iter().map(|x| x.as_slice()).collect();
        let mut g = Graph::new();
        let b = m.store.bind(&mut g, false);
        let x = m.input(&mut g, &refs).unwrap();
        let fast = m.encode(&mut g, &b, x, false).unwrap();
        let full = m.encode(&mut g, &b, x, true).unwrap();
        assert_eq!(g.value(fast.latent), g.value(full.latent));
    }

    #[test]
    fn survival_decreases_and_density_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [EncoderKind::Mlp, EncoderKind::Cnn, EncoderKind::ConvTransformer] {
            let m = model(kind, 6, 3);
            let x = window(&mut rng, 18);
            let grid: Vec<f64> = (1..40).map(|i| 0.05 * (i as f64).powi(2)).collect();
            let s = m.survival_grid(&x, &grid).unwrap();
            assert!(s.windows(2).all(|w| w[1] < w[0]), "{kind:?}");
            let lat = m.latents(&[&x]).unwrap().remove(0);
            for t in [0.1, 2.0, 30.0] {
                let f = m.predict_latent(&lat, &[t]).unwrap()[0].density;
                let r = m.density_autodiff(t, &x).unwrap();
                assert!(f > 0.0);
                assert!((f - r).abs() <= 1e-3 * f.abs().max(1e-9), "{kind:?} {f} {r}");
            }
        }
    }

    #[test]
    fn grid_refinement_interleaves() {
        let m = model(EncoderKind::Cnn, 5, 2);
        let x = vec![0.3f32; 15];
        let coarse = m.survival_grid(&x, &[1.0, 3.0, 5.0]).unwrap();
        let fine = m.survival_grid(&x, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(coarse, vec![fine[0], fine[2], fine[4]]);
        let single = m.survival_grid(&x, &[2.0]).unwrap();
        assert_eq!(single[0], ConditionalSurvival::<[f32]>::survival(&m, 2.0, &x));
        assert!(m.survival_grid(&x, &[2.0, 2.0]).is_err());
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let m = model(EncoderKind::ConvTransformer, 6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = m.attention(&window(&mut rng, 18)).unwrap();
        assert_eq!(a.len(), 2);
        for head in &a {
            for (i, row) in head.iter().enumerate() {
                let s: f64 = row.iter().map(|v| *v as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row[i + 1..].iter().all(|v| *v == 0.0));
            }
        }
        assert!(matches!(model(EncoderKind::Mlp, 6, 1).attention(&[0.0; 18]), Err(ModelError::NoAttention(_))));
    }

    #[test]
    fn checkpoint_round_trip_outputs_identical() {
        let m = model(EncoderKind::ConvTransformer, 5, 6);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ct");
        m.save(&stem).unwrap();
        let back = SurvivalModel::load(&stem).unwrap();
        assert_eq!(back, m);
        let x = vec![0.25f32; 15];
        let grid = [0.5, 1.0, 10.0];
        let a = m.survival_grid(&x, &grid).unwrap();
        let b = back.survival_grid(&x, &grid).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn wrong_window_size_is_rejected() {
        let m = model(EncoderKind::Mlp, 4, 1);
        assert!(matches!(m.latents(&[&[0.0; 5]]), Err(ModelError::Input(_))));
    }

    #[test]
    fn invalid_configs() {
        let mut e = EncoderConfig::new(EncoderKind::Cnn, 4, 3);
        e.kernel = 0;
        assert!(SurvivalModel::new(ModelConfig::new(e, DecoderConfig::default(), 1.0, 0)).is_err());
        let e = EncoderConfig::new(EncoderKind::Cnn, 4, 3);
        assert!(SurvivalModel::new(ModelConfig::new(e.clone(), DecoderConfig { hidden: vec![] }, 1.0, 0)).is_err());
        assert!(SurvivalModel::new(ModelConfig::new(e, DecoderConfig::default(), 0.0, 0)).is_err());
    }
}
