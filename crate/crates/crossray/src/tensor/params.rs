//! Named parameter sets with per-parameter Adam state and versioned JSON
//! checkpoints.
//!
//! Parameters live in a `BTreeMap` keyed by path ("field.trunk.0.weight"),
//! which fixes iteration order and therefore update order — one of the
//! ingredients of bit-reproducible training. Initialization seeds derive
//! from the parameter path, so adding or reordering unrelated parameters
//! never changes another parameter's initial values.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Scalar, Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_FORMAT: &str = "crossray-ckpt-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint format {0:?}, expected {CHECKPOINT_FORMAT:?}")]
    Format(String),
}

/// Adam hyperparameters (β=(0.9, 0.999), ε=1e-8 unless overridden).
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn new(lr: f64) -> Self {
        AdamParams { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone)]
struct ParamEntry<S: Scalar> {
    value: Tensor<S>,
    m: Tensor<S>,
    v: Tensor<S>,
    t: u64,
}

/// Named map from parameter path to tensor plus Adam state.
#[derive(Clone, Default)]
pub struct ParamSet<S: Scalar> {
    entries: BTreeMap<String, ParamEntry<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, path: &str, value: Tensor<S>) {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        self.entries.insert(path.to_string(), ParamEntry { value, m, v, t: 0 });
    }

    /// He-uniform weight init: U(−√(6/fan_in), √(6/fan_in)), seeded from the
    /// parameter path so outcomes are order-independent.
    pub fn init_he_uniform(&mut self, path: &str, shape: &[usize], fan_in: usize, master_seed: u64) {
        let limit = (6.0 / fan_in as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(path) ^ master_seed);
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n).map(|_| S::from_f64(rng.gen_range(-limit..limit))).collect();
        self.insert(path, Tensor::from_vec(shape, data).expect("init shape"));
    }

    pub fn init_zeros(&mut self, path: &str, shape: &[usize]) {
        self.insert(path, Tensor::zeros(shape));
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<S>> {
        self.entries.get(path).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<S>> {
        self.entries.get_mut(path).map(|e| &mut e.value)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn step_count(&self, path: &str) -> Option<u64> {
        self.entries.get(path).map(|e| e.t)
    }

    /// Registers every parameter as a tape leaf; `trainable` decides which
    /// paths accumulate gradients.
    pub fn leaves(&self, tape: &Tape<S>, trainable: impl Fn(&str) -> bool) -> BTreeMap<String, Var<S>> {
        self.entries
            .iter()
            .map(|(path, e)| (path.clone(), tape.leaf(e.value.clone(), trainable(path))))
            .collect()
    }

    /// One Adam step with bias correction over the parameters present in
    /// `grads`; parameters without gradients are untouched.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor<S>>,
        hp: AdamParams,
    ) -> Result<(), TensorError> {
        for (path, g) in grads {
            let e = self
                .entries
                .get_mut(path)
                .ok_or_else(|| TensorError::invalid("adam", format!("unknown parameter {path}")))?;
            if g.shape() != e.value.shape() {
                return Err(TensorError::shapes("adam", &[e.value.shape(), g.shape()]));
            }
            e.t += 1;
            let (b1, b2) = (S::from_f64(hp.beta1), S::from_f64(hp.beta2));
            let (ob1, ob2) = (S::from_f64(1.0 - hp.beta1), S::from_f64(1.0 - hp.beta2));
            let bc1 = S::from_f64(1.0 / (1.0 - hp.beta1.powi(e.t as i32)));
            let bc2 = S::from_f64(1.0 / (1.0 - hp.beta2.powi(e.t as i32)));
            let (lr, eps) = (S::from_f64(hp.lr), S::from_f64(hp.eps));
            for i in 0..g.numel() {
                let gv = g.data()[i];
                let m = b1.mulv(e.m.data()[i]).addv(ob1.mulv(gv));
                let v = b2.mulv(e.v.data()[i]).addv(ob2.mulv(gv.mulv(gv)));
                e.m.data_mut()[i] = m;
                e.v.data_mut()[i] = v;
                let mhat = m.mulv(bc1);
                let vhat = v.mulv(bc2);
                let x = e.value.data()[i];
                e.value.data_mut()[i] = x.subv(lr.mulv(mhat).mulv(recip(vhat.sqrt().addv(eps))));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, step: u64, config: serde_json::Value) -> CheckpointData {
        let params = self
            .entries
            .iter()
            .map(|(path, e)| {
                (
                    path.clone(),
                    ParamRecord {
                        shape: e.value.shape().to_vec(),
                        data: e.value.to_f64_vec(),
                        adam_m: e.m.to_f64_vec(),
                        adam_v: e.v.to_f64_vec(),
                        adam_t: e.t,
                    },
                )
            })
            .collect();
        CheckpointData { format: CHECKPOINT_FORMAT.to_string(), dtype: S::DTYPE.to_string(), step, config, params }
    }

    pub fn from_checkpoint(ckpt: &CheckpointData) -> Result<Self, TensorError> {
        let mut out = ParamSet::new();
        for (path, rec) in &ckpt.params {
            let value = Tensor::from_f64_slice(&rec.shape, &rec.data)?;
            let m = Tensor::from_f64_slice(&rec.shape, &rec.adam_m)?;
            let v = Tensor::from_f64_slice(&rec.shape, &rec.adam_v)?;
            out.entries.insert(path.clone(), ParamEntry { value, m, v, t: rec.adam_t });
        }
        Ok(out)
    }
}

fn recip<S: Scalar>(x: S) -> S {
    S::from_f64(1.0 / x.to_f64())
}

pub(crate) fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Serialized checkpoint: format tag, dtype, global step, run-config echo,
/// and per-parameter tensors + Adam state.
#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointData {
    pub format: String,
    pub dtype: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub params: BTreeMap<String, ParamRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub adam_t: u64,
}

impl CheckpointData {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let body = serde_json::to_string(self)
            .map_err(|source| CheckpointError::Parse { path: path.display().to_string(), source })?;
        std::fs::write(path, body)
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let body = std::fs::read_to_string(path)
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        let ckpt: CheckpointData = serde_json::from_str(&body)
            .map_err(|source| CheckpointError::Parse { path: path.display().to_string(), source })?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(ckpt.format));
        }
        Ok(ckpt)
    }
}
