//! Named parameters, positivity reparameterization, Adam and checkpoints.
//!
//! Positive parameters store an unconstrained value `u`; the value used by a
//! model is `softplus(u) + POSITIVE_FLOOR`, so any optimizer step keeps them
//! strictly positive.
//!
//! A checkpoint is two files: `<stem>.json` with parameter names, shapes,
//! constraint flags and architecture metadata, and `<stem>.bin` with all raw
//! values as little-endian `f32`, concatenated in manifest order.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const POSITIVE_FLOOR: f32 = 1e-6;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0}")]
    Duplicate(String),
    #[error("unknown parameter {0}")]
    Unknown(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Index of a parameter in its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Const(f32),
    Normal { std: f32 },
    /// Raw values `N(mean, std)`; for positive parameters the mean is given
    /// on the constrained scale and mapped through the inverse softplus.
    Positive { mean: f32, std: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub raw: Tensor,
    pub positive: bool,
    pub init: Init,
}

impl Param {
    /// Value seen by the model.
    pub fn effective(&self) -> Vec<f32> {
        if self.positive {
            self.raw.data().iter().map(|u| positive_map(*u)).collect()
        } else {
            self.raw.data().to_vec()
        }
    }
}

pub fn positive_map(u: f32) -> f32 {
    let sp = if u > 20.0 { u } else { u.exp().ln_1p() };
    sp + POSITIVE_FLOOR
}

/// Raw value whose positive map is `w`.
pub fn positive_inverse(w: f32) -> f32 {
    let y = (w - POSITIVE_FLOOR).max(1e-12);
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add<R: Rng>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        init: Init,
        positive: bool,
        rng: &mut R,
    ) -> Result<ParamId, ParamError> {
        if self.index.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => {
                let d = Normal::new(0.0, std as f64).expect("finite std");
                (0..n).map(|_| d.sample(rng) as f32).collect()
            }
            Init::Positive { mean, std } => {
                let d = Normal::new(positive_inverse(mean) as f64, std as f64).expect("finite std");
                (0..n).map(|_| d.sample(rng) as f32).collect()
            }
        };
        self.params.push(Param {
            name: name.to_string(),
            raw: Tensor::new(shape, data)?,
            positive,
            init,
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId, ParamError> {
        self.index
            .get(name)
            .map(|i| ParamId(*i))
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.raw.len()).sum()
    }

    /// L2 norm of each raw parameter tensor, by name.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .map(|p| {
                let s: f64 = p.raw.data().iter().map(|x| (*x as f64).powi(2)).sum();
                (p.name.clone(), s.sqrt())
            })
            .collect()
    }

    /// Put every parameter on the graph. With `trainable` the raw values are
    /// differentiable leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let mut raw = Vec::with_capacity(self.params.len());
        let mut eff = Vec::with_capacity(self.params.len());
        for p in &self.params {
            if !trainable && p.positive {
                let t = Tensor::new(p.raw.shape().to_vec(), p.effective()).expect("same shape");
                let v = g.constant(t);
                raw.push(v);
                eff.push(v);
                continue;
            }
            let r = if trainable {
                g.leaf(p.raw.clone())
            } else {
                g.constant(p.raw.clone())
            };
            let e = if p.positive {
                let s = g.softplus(r);
                g.add_scalar(s, POSITIVE_FLOOR)
            } else {
                r
            };
            raw.push(r);
            eff.push(e);
        }
        Bound { raw, eff }
    }

    pub fn save(&self, stem: &Path, architecture: serde_json::Value) -> Result<(), ParamError> {
        let (json, bin) = checkpoint_paths(stem);
        let mut bytes = Vec::with_capacity(self.scalar_count() * 4);
        let mut entries = Vec::new();
        let mut offset = 0;
        for p in &self.params {
            for v in p.raw.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.raw.shape().to_vec(),
                positive: p.positive,
                init: p.init,
                offset,
                len: p.raw.len(),
            });
            offset += p.raw.len();
        }
        let manifest = CheckpointManifest {
            format: "lobsurv-checkpoint-1".to_string(),
            positive_floor: POSITIVE_FLOOR,
            params: entries,
            architecture,
        };
        if let Some(dir) = json.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(&json, serde_json::to_string_pretty(&manifest)?)?;
        fs::write(&bin, bytes)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<(ParamStore, serde_json::Value), ParamError> {
        let (json, bin) = checkpoint_paths(stem);
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&json)?)?;
        let bytes = fs::read(&bin)?;
        let total: usize = manifest.params.iter().map(|e| e.len).sum();
        if bytes.len() != total * 4 {
            return Err(ParamError::Mismatch(format!(
                "{} holds {} bytes, manifest needs {}",
                bin.display(),
                bytes.len(),
                total * 4
            )));
        }
        let mut store = ParamStore::new();
        for e in manifest.params {
            let data = bytes[e.offset * 4..(e.offset + e.len) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if store.index.contains_key(&e.name) {
                return Err(ParamError::Duplicate(e.name));
            }
            store.index.insert(e.name.clone(), store.params.len());
            store.params.push(Param {
                name: e.name,
                raw: Tensor::new(e.shape, data)?,
                positive: e.positive,
                init: e.init,
            });
        }
        Ok((store, manifest.architecture))
    }
}

pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    positive: bool,
    init: Init,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    positive_floor: f32,
    params: Vec<ManifestEntry>,
    architecture: serde_json::Value,
}

/// Parameters placed on one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    raw: Vec<Var>,
    eff: Vec<Var>,
}

impl Bound {
    /// Value used by the model.
    pub fn var(&self, id: ParamId) -> Var {
        self.eff[id.0]
    }

    pub fn raw(&self, id: ParamId) -> Var {
        self.raw[id.0]
    }

    /// Raw-parameter gradients in store order; missing entries are zero.
    pub fn collect(&self, store: &ParamStore, grads: &crate::tensor::Gradients) -> Vec<Vec<f32>> {
        self.raw
            .iter()
            .zip(store.params())
            .map(|(v, p)| {
                grads
                    .get_data(*v)
                    .map(|d| d.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.raw.len()])
            })
            .collect()
    }
}

/// Rescale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| (*x as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Adam {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.raw.len()]).collect();
        Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f32>]) {
        self.step += 1;
        let c = self.config;
        let b1t = 1.0 - c.beta1.powi(self.step as i32);
        let b2t = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.raw.data_mut().iter_mut().enumerate() {
                let g = grads[i][j] as f64;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let upd = c.lr * (m[j] / b1t) / ((v[j] / b2t).sqrt() + c.eps);
                *x = (*x as f64 - upd) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.add("w", vec![2, 3], Init::Normal { std: 0.5 }, false, &mut rng).unwrap();
        s.add("pos", vec![4], Init::Positive { mean: 0.3, std: 2.0 }, true, &mut rng)
            .unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            s.add("w", vec![1], Init::Zeros, false, &mut rng),
            Err(ParamError::Duplicate(_))
        ));
    }

    #[test]
    fn positive_inverse_round_trips() {
        for w in [1e-3f32, 0.1, 0.5, 1.0, 3.0, 30.0] {
            assert!((positive_map(positive_inverse(w)) - w).abs() <= 1e-5 * w.max(1.0));
        }
    }

    #[test]
    fn positive_params_stay_positive_under_adam() {
        let mut s = store();
        let mut adam = Adam::new(&s, AdamConfig { lr: 10.0, ..Default::default() });
        for _ in 0..200 {
            // push the positive weights down as hard as possible
            let grads = vec![vec![0.0; 6], vec![1e6; 4]];
            adam.step(&mut s, &grads);
        }
        let p = s.get(s.id("pos").unwrap());
        assert!(p.effective().iter().all(|w| *w > 0.0));
    }

    #[test]
    fn bound_gradient_flows_through_softplus() {
        let s = store();
        let mut g = Graph::new();
        let b = s.bind(&mut g, true);
        let id = s.id("pos").unwrap();
        let total = g.sum(b.var(id));
        let grads = g.backward(total).unwrap();
        let got = b.collect(&s, &grads);
        let raw = s.get(id).raw.data();
        for (gv, u) in got[1].iter().zip(raw) {
            let expect = 1.0 / (1.0 + (-u).exp());
            assert!((gv - expect).abs() < 1e-6);
        }
        assert!(got[0].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn frozen_binding_matches_trainable_values() {
        let s = store();
        let mut g = Graph::new();
        let frozen = s.bind(&mut g, false);
        let live = s.bind(&mut g, true);
        let id = s.id("pos").unwrap();
        assert_eq!(g.value(frozen.var(id)), g.value(live.var(id)));
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0f32], vec![4.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-6 && (g[1][0] - 0.8).abs() < 1e-6);
        let mut small = vec![vec![0.1f32]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = store();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        let arch = serde_json::json!({"kind": "test", "width": 3});
        s.save(&stem, arch.clone()).unwrap();
        let (back, arch_back) = ParamStore::load(&stem).unwrap();
        assert_eq!(back, s);
        assert_eq!(arch_back, arch);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let s = store();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        s.save(&stem, serde_json::Value::Null).unwrap();
        let (_, bin) = checkpoint_paths(&stem);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(ParamStore::load(&stem), Err(ParamError::Mismatch(_))));
    }
}
