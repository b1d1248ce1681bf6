//! Minimal numeric core: dense layers, softmax, cross-entropy, masked SGD
//! and an early-stopping training loop.
//!
//! Backprop is written per layer type by each model rather than through a
//! general autodiff graph. Models plug into [`train_local`] through the
//! [`Trainable`] trait.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor used by [`cross_entropy`].
pub const CE_EPSILON: f64 = 1e-12;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBuf {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorBuf {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Config(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// Builds a `rows × cols` matrix from nested rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged matrix rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Self { shape: vec![rows.len(), cols], data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Identifies one parameter tensor inside a model.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub module_path: String,
    pub tensor_name: String,
}

impl ParamId {
    pub fn new(module_path: impl Into<String>, tensor_name: impl Into<String>) -> Self {
        Self {
            module_path: module_path.into(),
            tensor_name: tensor_name.into(),
        }
    }

    pub fn weight(module_path: impl Into<String>) -> Self {
        Self::new(module_path, "weight")
    }

    pub fn bias(module_path: impl Into<String>) -> Self {
        Self::new(module_path, "bias")
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.module_path, self.tensor_name)
    }
}

/// Ordered parameter map. Ordering is lexicographic by [`ParamId`].
pub type ParamStore = BTreeMap<ParamId, TensorBuf>;

/// Set of parameters that a training call is allowed to update.
pub type ParamMask = BTreeSet<ParamId>;

/// One labeled feature vector, tagged with the domain it was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    /// Federated rounds per retraining event.
    pub rounds: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            max_epochs: 20,
            batch_size: 8,
            learning_rate: 0.001,
            patience: 5,
            rounds: 5,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.max_epochs", self.max_epochs),
            ("train.batch_size", self.batch_size),
            ("train.patience", self.patience),
            ("train.rounds", self.rounds),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::field(name, "must be positive"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::field("train.learning_rate", "must be a positive finite number"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::field("train.patience", "must not exceed max_epochs"));
        }
        Ok(())
    }
}

/// `out[j] = Σ_i x[i]·W[i,j] + b[j]` with `W` of shape `[n_in, n_out]`.
pub fn dense_forward(x: &TensorBuf, w: &TensorBuf, b: &TensorBuf) -> Result<TensorBuf> {
    let (n_in, n_out) = match w.shape() {
        [i, o] => (*i, *o),
        s => return Err(Error::Config(format!("dense weight must be 2-D, got {s:?}"))),
    };
    if x.len() != n_in || b.len() != n_out {
        return Err(Error::Config(format!(
            "dense shapes do not conform: x {:?}, W {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; n_out];
    dense_into(x.data(), w.data(), b.data(), &mut out);
    Ok(TensorBuf::vector(out))
}

/// Slice form of [`dense_forward`]; callers guarantee the shapes.
#[inline]
pub(crate) fn dense_into(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n_out = out.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n_out..(i + 1) * n_out];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// Accumulates the gradients of a dense layer given `d_out`.
///
/// `gw`/`gb` are skipped when `None`; `gx`, when given, receives `W·d_out`
/// added onto its current contents.
#[inline]
pub(crate) fn dense_backward(
    x: &[f64],
    w: &[f64],
    d_out: &[f64],
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
    gx: Option<&mut [f64]>,
) {
    let n_out = d_out.len();
    if let Some(gw) = gw {
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &mut gw[i * n_out..(i + 1) * n_out];
            for (g, &d) in row.iter_mut().zip(d_out) {
                *g += xi * d;
            }
        }
    }
    if let Some(gb) = gb {
        for (g, &d) in gb.iter_mut().zip(d_out) {
            *g += d;
        }
    }
    if let Some(gx) = gx {
        for (i, g) in gx.iter_mut().enumerate() {
            let row = &w[i * n_out..(i + 1) * n_out];
            *g += row.iter().zip(d_out).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

pub fn softmax(v: &TensorBuf) -> TensorBuf {
    TensorBuf::vector(softmax_slice(v.data()))
}

pub(crate) fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Backprop through softmax: `d_in[i] = p[i]·(d_out[i] − Σ_j p[j]·d_out[j])`.
pub(crate) fn softmax_backward(p: &[f64], d_out: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(d_out).map(|(a, b)| a * b).sum();
    p.iter().zip(d_out).map(|(pi, di)| pi * (di - dot)).collect()
}

pub fn cross_entropy(probs: &TensorBuf, label: usize) -> f64 {
    cross_entropy_slice(probs.data(), label)
}

pub(crate) fn cross_entropy_slice(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(CE_EPSILON).ln()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A model that [`train_local`] can fit.
pub trait Trainable {
    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Class probabilities for one input.
    fn predict(&self, features: &[f64]) -> Result<Vec<f64>>;

    /// Gradient of the mean cross-entropy over `batch` for every id in
    /// `mask`. Implementations may assume `mask` is non-empty.
    fn loss_gradients(&self, batch: &[Sample], mask: &ParamMask) -> Result<ParamStore>;

    fn accuracy(&self, data: &[Sample]) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for s in data {
            if argmax(&self.predict(&s.features)?) == s.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    fn mean_loss(&self, data: &[Sample]) -> Result<f64> {
        let mut total = 0.0;
        for s in data {
            total += cross_entropy_slice(&self.predict(&s.features)?, s.label);
        }
        Ok(total / data.len().max(1) as f64)
    }
}

/// Masked gradient of the mean batch loss.
pub fn backward<M: Trainable + ?Sized>(
    model: &M,
    batch: &[Sample],
    mask: &ParamMask,
) -> Result<ParamStore> {
    if mask.is_empty() {
        return Err(Error::Policy("empty parameter mask: nothing to train".into()));
    }
    if let Some(missing) = mask.iter().find(|id| !model.params().contains_key(*id)) {
        return Err(Error::Lookup(format!("mask names unknown parameter {missing}")));
    }
    model.loss_gradients(batch, mask)
}

/// `p ← p − lr·g` for every key in `grads`; other entries are left untouched.
pub fn sgd_step(params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
    for (id, g) in grads {
        let p = params
            .get_mut(id)
            .ok_or_else(|| Error::Lookup(format!("gradient for unknown parameter {id}")))?;
        if p.len() != g.len() {
            return Err(Error::Config(format!("gradient shape mismatch for {id}")));
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_val_acc: f64,
}

/// Mini-batch SGD over `train` in stored order with early stopping on
/// validation accuracy. On return the masked parameters hold the snapshot
/// with the best validation accuracy (earliest epoch on ties).
pub fn train_local<M: Trainable + ?Sized>(
    model: &mut M,
    train: &[Sample],
    val: &[Sample],
    settings: &TrainSettings,
    mask: &ParamMask,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Protocol("train_local needs non-empty train and val sets".into()));
    }
    settings.validate()?;

    let mut best: Option<(f64, Vec<(ParamId, TensorBuf)>)> = None;
    let mut stale = 0usize;
    let mut epochs_run = 0usize;

    for _epoch in 0..settings.max_epochs {
        for batch in train.chunks(settings.batch_size) {
            let grads = backward(model, batch, mask)?;
            sgd_step(model.params_mut(), &grads, settings.learning_rate)?;
        }
        epochs_run += 1;

        let acc = model.accuracy(val)?;
        match &best {
            Some((best_acc, _)) if acc <= *best_acc => {
                stale += 1;
                if stale >= settings.patience {
                    break;
                }
            }
            _ => {
                let snapshot = mask
                    .iter()
                    .map(|id| (id.clone(), model.params()[id].clone()))
                    .collect();
                best = Some((acc, snapshot));
                stale = 0;
            }
        }
    }

    let (best_val_acc, snapshot) = best.expect("at least one epoch runs");
    let params = model.params_mut();
    for (id, t) in snapshot {
        params.insert(id, t);
    }
    Ok(TrainOutcome {
        epochs_run,
        best_val_acc,
    })
}

/// Single dense layer followed by softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    params: ParamStore,
    n_in: usize,
    n_out: usize,
}

impl LinearClassifier {
    pub fn new(weight: TensorBuf, bias: TensorBuf) -> Result<Self> {
        let (n_in, n_out) = match weight.shape() {
            [i, o] => (*i, *o),
            s => return Err(Error::Config(format!("weight must be 2-D, got {s:?}"))),
        };
        if bias.len() != n_out {
            return Err(Error::Config("bias length must equal n_out".into()));
        }
        let mut params = ParamStore::new();
        params.insert(ParamId::weight("linear"), weight);
        params.insert(ParamId::bias("linear"), bias);
        Ok(Self { params, n_in, n_out })
    }

    pub fn weight_id() -> ParamId {
        ParamId::weight("linear")
    }

    pub fn bias_id() -> ParamId {
        ParamId::bias("linear")
    }
}

impl Trainable for LinearClassifier {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.n_in {
            return Err(Error::Config(format!(
                "expected {} features, got {}",
                self.n_in,
                features.len()
            )));
        }
        let mut out = vec![0.0; self.n_out];
        dense_into(
            features,
            self.params[&Self::weight_id()].data(),
            self.params[&Self::bias_id()].data(),
            &mut out,
        );
        softmax_in_place(&mut out);
        Ok(out)
    }

    fn loss_gradients(&self, batch: &[Sample], mask: &ParamMask) -> Result<ParamStore> {
        let w_id = Self::weight_id();
        let b_id = Self::bias_id();
        let mut gw = vec![0.0; self.n_in * self.n_out];
        let mut gb = vec![0.0; self.n_out];
        let scale = 1.0 / batch.len().max(1) as f64;
        for s in batch {
            let mut d = self.predict(&s.features)?;
            d[s.label] -= 1.0;
            d.iter_mut().for_each(|v| *v *= scale);
            dense_backward(&s.features, &[], &d, Some(&mut gw), Some(&mut gb), None);
        }
        let mut out = ParamStore::new();
        if mask.contains(&w_id) {
            out.insert(w_id, TensorBuf::new(vec![self.n_in, self.n_out], gw)?);
        }
        if mask.contains(&b_id) {
            out.insert(b_id, TensorBuf::vector(gb));
        }
        Ok(out)
    }
}
