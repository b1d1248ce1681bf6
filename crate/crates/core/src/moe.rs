//! Two-branch mixture-of-experts classifier.
//!
//! The shared branch stacks `shared_layers` expert layers. In each layer a
//! hard gate picks the `top_k` highest-scoring experts; their outputs are
//! mixed with the selected scores renormalized to sum to one. The local
//! branch is a plain tanh MLP whose parameters live in swappable *banks*.
//! A soft branch gate mixes the two branches' logits per input.
//!
//! All parameters sit in one [`ParamStore`]; the partition of a parameter is
//! encoded in its module path:
//!
//! | partition    | module path                                   |
//! |--------------|-----------------------------------------------|
//! | shared       | `shared/layer{l}/expert{e}`, `shared/layer{l}/gate`, `shared/head` |
//! | branch gate  | `branch_gate`                                 |
//! | local bank   | `local/{bank}/layer{i}`, `local/{bank}/head`  |

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{
    dense_backward, dense_into, softmax_backward, softmax_in_place, ParamId, ParamMask,
    ParamStore, Sample, TensorBuf, Trainable,
};

pub type BankKey = String;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeSpec {
    pub n_features: usize,
    pub n_classes: usize,
    pub shared_layers: usize,
    pub experts_per_layer: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    pub local_layers: usize,
    pub local_hidden_dim: usize,
}

impl Default for MoeSpec {
    fn default() -> Self {
        Self {
            n_features: 16,
            n_classes: 4,
            shared_layers: 2,
            experts_per_layer: 3,
            top_k: 1,
            hidden_dim: 32,
            local_layers: 1,
            local_hidden_dim: 16,
        }
    }
}

impl MoeSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("model.n_features", self.n_features),
            ("model.n_classes", self.n_classes),
            ("model.shared_layers", self.shared_layers),
            ("model.experts_per_layer", self.experts_per_layer),
            ("model.top_k", self.top_k),
            ("model.hidden_dim", self.hidden_dim),
            ("model.local_layers", self.local_layers),
            ("model.local_hidden_dim", self.local_hidden_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::field(name, "must be at least 1"));
            }
        }
        if self.top_k > self.experts_per_layer {
            return Err(Error::field("model.top_k", "must not exceed experts_per_layer"));
        }
        Ok(())
    }

    /// Width of the flattened gate vector: all layer selections plus the two
    /// branch weights.
    pub fn gate_units(&self) -> usize {
        self.shared_layers * self.experts_per_layer + 2
    }

    pub fn shared_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.n_features
        } else {
            self.hidden_dim
        }
    }

    pub fn local_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.n_features
        } else {
            self.local_hidden_dim
        }
    }

    fn slots_per_layer(&self) -> usize {
        2 + 2 * self.experts_per_layer
    }

    fn n_slots(&self) -> usize {
        self.shared_layers * self.slots_per_layer() + 4 + 2 * self.local_layers + 2
    }

    fn gate_slot(&self, layer: usize) -> usize {
        layer * self.slots_per_layer()
    }

    fn expert_slot(&self, layer: usize, expert: usize) -> usize {
        layer * self.slots_per_layer() + 2 + 2 * expert
    }

    fn head_slot(&self) -> usize {
        self.shared_layers * self.slots_per_layer()
    }

    fn branch_gate_slot(&self) -> usize {
        self.head_slot() + 2
    }

    fn local_slot(&self, layer: usize) -> usize {
        self.head_slot() + 4 + 2 * layer
    }

    fn local_head_slot(&self) -> usize {
        self.local_slot(self.local_layers)
    }

    /// Parameter ids in slot order (weight then bias for every dense layer)
    /// for the network routed through `bank`, with each layer's shape.
    fn slot_layout(&self, bank: &str) -> Vec<(ParamId, Vec<usize>)> {
        let mut out = Vec::with_capacity(self.n_slots());
        let mut dense = |path: String, n_in: usize, n_out: usize| {
            out.push((ParamId::weight(path.clone()), vec![n_in, n_out]));
            out.push((ParamId::bias(path), vec![n_out]));
        };
        for l in 0..self.shared_layers {
            dense(layer_gate_path(l), self.shared_in(l), self.experts_per_layer);
            for e in 0..self.experts_per_layer {
                dense(expert_path(l, e), self.shared_in(l), self.hidden_dim);
            }
        }
        dense(SHARED_HEAD.to_string(), self.hidden_dim, self.n_classes);
        dense(BRANCH_GATE.to_string(), self.n_features, 2);
        for i in 0..self.local_layers {
            dense(local_layer_path(bank, i), self.local_in(i), self.local_hidden_dim);
        }
        dense(local_head_path(bank), self.local_hidden_dim, self.n_classes);
        out
    }
}

const SHARED_HEAD: &str = "shared/head";
const BRANCH_GATE: &str = "branch_gate";

fn expert_path(layer: usize, expert: usize) -> String {
    format!("shared/layer{layer}/expert{expert}")
}

fn layer_gate_path(layer: usize) -> String {
    format!("shared/layer{layer}/gate")
}

fn local_layer_path(bank: &str, layer: usize) -> String {
    format!("local/{bank}/layer{layer}")
}

fn local_head_path(bank: &str) -> String {
    format!("local/{bank}/head")
}

/// Which retraining scope a configuration selects.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamScope {
    FullModel,
    SharedPlusBranchGate,
    LocalBankPlusBranchGate(BankKey),
    /// Shared, branch gate and the participating device's own bank.
    PerDeviceLocalPlusShared,
}

impl ParamScope {
    pub fn label(&self) -> String {
        match self {
            ParamScope::FullModel => "full".into(),
            ParamScope::SharedPlusBranchGate => "shared+branch_gate".into(),
            ParamScope::LocalBankPlusBranchGate(k) => format!("local[{k}]+branch_gate"),
            ParamScope::PerDeviceLocalPlusShared => "per_device_local+shared".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Partition {
    Shared,
    BranchGate,
    LocalBank(BankKey),
}

/// Partition implied by a parameter's module path.
pub fn partition_of(id: &ParamId) -> Option<Partition> {
    let path = id.module_path.as_str();
    if path.starts_with("shared/") {
        Some(Partition::Shared)
    } else if path == BRANCH_GATE {
        Some(Partition::BranchGate)
    } else {
        let rest = path.strip_prefix("local/")?;
        let (bank, _) = rest.split_once('/')?;
        Some(Partition::LocalBank(bank.to_string()))
    }
}

/// True for the shared-partition tensors of the per-layer hard gates.
pub fn is_layer_gate(id: &ParamId) -> bool {
    id.module_path.starts_with("shared/") && id.module_path.ends_with("/gate")
}

/// Gate activity recorded by one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub branch_weights: [f64; 2],
    pub layer_selections: Vec<Vec<u8>>,
    pub layer_scores: Vec<Vec<f64>>,
}

impl GateTrace {
    /// Layer selections followed by the two branch weights.
    pub fn gate_vector(&self, include_branch: bool) -> Vec<f64> {
        let mut g: Vec<f64> = self
            .layer_selections
            .iter()
            .flat_map(|s| s.iter().map(|&b| f64::from(b)))
            .collect();
        if include_branch {
            g.extend_from_slice(&self.branch_weights);
        }
        g
    }

    fn check(&self, top_k: usize) -> bool {
        let [a, b] = self.branch_weights;
        a >= 0.0
            && b >= 0.0
            && (a + b - 1.0).abs() <= 1e-9
            && self
                .layer_selections
                .iter()
                .all(|s| s.iter().map(|&v| v as usize).sum::<usize>() == top_k)
    }
}

/// Indicator vector of the `k` highest scores; ties go to the lower index.
pub fn top_k_select(scores: &[f64], k: usize) -> Vec<u8> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut sel = vec![0u8; scores.len()];
    for &i in order.iter().take(k) {
        sel[i] = 1;
    }
    sel
}

/// Parameter store plus bank registry for one model family.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    spec: MoeSpec,
    params: ParamStore,
    banks: BTreeSet<BankKey>,
}

fn xavier<R: Rng + ?Sized>(rng: &mut R, n_in: usize, n_out: usize) -> Vec<f64> {
    let a = (6.0 / (n_in + n_out) as f64).sqrt();
    (0..n_in * n_out).map(|_| rng.random_range(-a..a)).collect()
}

fn check_bank_key(key: &str) -> Result<()> {
    if key.is_empty() || key.contains('/') {
        return Err(Error::Config(format!("invalid bank key {key:?}")));
    }
    Ok(())
}

impl ModelBundle {
    /// Fresh model with a single local bank named `bank`. The branch gate
    /// starts at zero, so both branches are weighted 0.5 initially.
    pub fn init<R: Rng + ?Sized>(spec: &MoeSpec, bank: &str, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        check_bank_key(bank)?;
        let mut params = ParamStore::new();
        for (id, shape) in spec.slot_layout(bank) {
            let t = if id.tensor_name == "weight" && id.module_path != BRANCH_GATE {
                TensorBuf::new(shape.clone(), xavier(rng, shape[0], shape[1]))?
            } else {
                TensorBuf::zeros(shape)
            };
            params.insert(id, t);
        }
        Ok(Self {
            spec: spec.clone(),
            params,
            banks: [bank.to_string()].into(),
        })
    }

    pub fn spec(&self) -> &MoeSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn banks(&self) -> &BTreeSet<BankKey> {
        &self.banks
    }

    pub fn has_bank(&self, key: &str) -> bool {
        self.banks.contains(key)
    }

    fn require_bank(&self, key: &str) -> Result<()> {
        if self.has_bank(key) {
            Ok(())
        } else {
            Err(Error::Lookup(format!("unknown local bank {key:?}")))
        }
    }

    pub fn partition_ids(&self, part: &Partition) -> BTreeSet<ParamId> {
        self.params
            .keys()
            .filter(|id| partition_of(id).as_ref() == Some(part))
            .cloned()
            .collect()
    }

    pub fn params_for_scope(&self, scope: &ParamScope) -> Result<ParamMask> {
        let mut ids = self.partition_ids(&Partition::BranchGate);
        match scope {
            ParamScope::FullModel | ParamScope::PerDeviceLocalPlusShared => {
                ids = self.params.keys().cloned().collect();
            }
            ParamScope::SharedPlusBranchGate => {
                ids.extend(self.partition_ids(&Partition::Shared));
            }
            ParamScope::LocalBankPlusBranchGate(k) => {
                self.require_bank(k)?;
                ids.extend(self.partition_ids(&Partition::LocalBank(k.clone())));
            }
        }
        Ok(ids)
    }

    /// Mask used when a device routed through `bank` trains under `scope`:
    /// like [`Self::params_for_scope`] but other devices' banks are dropped.
    pub fn training_mask(&self, scope: &ParamScope, bank: &str) -> Result<ParamMask> {
        self.require_bank(bank)?;
        let mut ids = self.params_for_scope(scope)?;
        ids.retain(|id| match partition_of(id) {
            Some(Partition::LocalBank(k)) => k == bank,
            _ => true,
        });
        Ok(ids)
    }

    pub fn clone_bank(&mut self, src: &str, dst: &str) -> Result<()> {
        self.require_bank(src)?;
        check_bank_key(dst)?;
        if self.has_bank(dst) {
            return Err(Error::Conflict(format!("bank {dst:?} already exists")));
        }
        let copies: Vec<(ParamId, TensorBuf)> = self
            .partition_ids(&Partition::LocalBank(src.to_string()))
            .into_iter()
            .map(|id| {
                let suffix = &id.module_path[format!("local/{src}/").len()..];
                let new_id = ParamId::new(format!("local/{dst}/{suffix}"), id.tensor_name.clone());
                (new_id, self.params[&id].clone())
            })
            .collect();
        self.params.extend(copies);
        self.banks.insert(dst.to_string());
        Ok(())
    }

    /// Overwrites bank `dst` with the contents of bank `src` of `other`.
    pub fn copy_bank_from(&mut self, other: &ModelBundle, src: &str, dst: &str) -> Result<()> {
        other.require_bank(src)?;
        self.require_bank(dst)?;
        for id in other.partition_ids(&Partition::LocalBank(src.to_string())) {
            let suffix = &id.module_path[format!("local/{src}/").len()..];
            let new_id = ParamId::new(format!("local/{dst}/{suffix}"), id.tensor_name.clone());
            self.params.insert(new_id, other.params[&id].clone());
        }
        Ok(())
    }

    pub fn remove_bank(&mut self, key: &str) -> Result<()> {
        self.require_bank(key)?;
        let ids = self.partition_ids(&Partition::LocalBank(key.to_string()));
        for id in ids {
            self.params.remove(&id);
        }
        self.banks.remove(key);
        Ok(())
    }

    fn net(&self, bank: &str) -> Result<Net<'_>> {
        self.require_bank(bank)?;
        let slots = self
            .spec
            .slot_layout(bank)
            .into_iter()
            .map(|(id, _)| {
                self.params
                    .get(&id)
                    .map(|t| t.data())
                    .ok_or_else(|| Error::Lookup(format!("missing parameter {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Net { spec: &self.spec, slots })
    }

    pub fn branch_gate(&self, x: &[f64]) -> Result<[f64; 2]> {
        self.check_input(x)?;
        let w = self.params[&ParamId::weight(BRANCH_GATE)].data();
        let b = self.params[&ParamId::bias(BRANCH_GATE)].data();
        let mut out = [0.0; 2];
        dense_into(x, w, b, &mut out);
        softmax_in_place(&mut out);
        Ok(out)
    }

    /// Hard gate of shared layer `layer` applied to that layer's input `h`.
    pub fn layer_gate(&self, layer: usize, h: &[f64]) -> Result<(Vec<u8>, Vec<f64>)> {
        if layer >= self.spec.shared_layers || h.len() != self.spec.shared_in(layer) {
            return Err(Error::Config(format!("bad layer gate input for layer {layer}")));
        }
        let path = layer_gate_path(layer);
        let mut scores = vec![0.0; self.spec.experts_per_layer];
        dense_into(
            h,
            self.params[&ParamId::weight(path.clone())].data(),
            self.params[&ParamId::bias(path)].data(),
            &mut scores,
        );
        softmax_in_place(&mut scores);
        Ok((top_k_select(&scores, self.spec.top_k), scores))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.n_features {
            return Err(Error::Config(format!(
                "expected {} features, got {}",
                self.spec.n_features,
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, bank: &str, x: &[f64]) -> Result<(Vec<f64>, GateTrace)> {
        self.check_input(x)?;
        let net = self.net(bank)?;
        let cache = net.forward(x);
        let trace = cache.trace(&self.spec);
        debug_assert!(trace.check(self.spec.top_k), "gate trace invariant violated");
        Ok((cache.probs, trace))
    }

    /// Mean cross-entropy gradient over `batch` for the ids in `mask`, with
    /// the local branch routed through `bank`. Masked ids outside that route
    /// receive zero gradients.
    pub fn gradients(&self, bank: &str, batch: &[Sample], mask: &ParamMask) -> Result<ParamStore> {
        let net = self.net(bank)?;
        let layout = self.spec.slot_layout(bank);
        let mut grads: Vec<Option<Vec<f64>>> = layout
            .iter()
            .map(|(id, shape)| mask.contains(id).then(|| vec![0.0; shape.iter().product()]))
            .collect();
        let scale = 1.0 / batch.len().max(1) as f64;
        for s in batch {
            self.check_input(&s.features)?;
            if s.label >= self.spec.n_classes {
                return Err(Error::Config(format!("label {} out of range", s.label)));
            }
            let cache = net.forward(&s.features);
            net.backward(&cache, s.label, scale, &mut grads);
        }
        let mut out = ParamStore::new();
        for ((id, shape), g) in layout.into_iter().zip(grads) {
            if let Some(g) = g {
                out.insert(id, TensorBuf::new(shape, g)?);
            }
        }
        for id in mask {
            if !out.contains_key(id) {
                let t = self
                    .params
                    .get(id)
                    .ok_or_else(|| Error::Lookup(format!("mask names unknown parameter {id}")))?;
                out.insert(id.clone(), TensorBuf::zeros(t.shape().to_vec()));
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            banks: self.banks.iter().cloned().collect(),
            records: self
                .params
                .iter()
                .map(|(id, t)| CheckpointRecord {
                    id: id.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.spec.validate()?;
        let mut params = ParamStore::new();
        for r in ckpt.records {
            if partition_of(&r.id).is_none() {
                return Err(Error::Protocol(format!("unpartitioned parameter {}", r.id)));
            }
            let t = TensorBuf::new(r.shape, r.values)?;
            if params.insert(r.id.clone(), t).is_some() {
                return Err(Error::Protocol(format!("duplicate parameter {}", r.id)));
            }
        }
        let bundle = Self {
            spec: ckpt.spec,
            params,
            banks: ckpt.banks.into_iter().collect(),
        };
        for bank in &bundle.banks {
            for (id, shape) in bundle.spec.slot_layout(bank) {
                match bundle.params.get(&id) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    _ => return Err(Error::Protocol(format!("checkpoint lacks {id} with shape {shape:?}"))),
                }
            }
        }
        Ok(bundle)
    }
}

/// Flat checkpoint: records ordered lexicographically by parameter id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: MoeSpec,
    pub banks: Vec<BankKey>,
    pub records: Vec<CheckpointRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub id: ParamId,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Parameter slices resolved for one bank, in slot order.
struct Net<'a> {
    spec: &'a MoeSpec,
    slots: Vec<&'a [f64]>,
}

struct LayerCache {
    input: Vec<f64>,
    scores: Vec<f64>,
    selected: Vec<usize>,
    mix: Vec<f64>,
    expert_out: Vec<Vec<f64>>,
}

struct ForwardCache {
    x: Vec<f64>,
    layers: Vec<LayerCache>,
    shared_top: Vec<f64>,
    shared_logits: Vec<f64>,
    local_acts: Vec<Vec<f64>>,
    local_logits: Vec<f64>,
    branch: [f64; 2],
    probs: Vec<f64>,
}

impl ForwardCache {
    fn trace(&self, spec: &MoeSpec) -> GateTrace {
        GateTrace {
            branch_weights: self.branch,
            layer_selections: self
                .layers
                .iter()
                .map(|l| {
                    let mut s = vec![0u8; spec.experts_per_layer];
                    for &e in &l.selected {
                        s[e] = 1;
                    }
                    s
                })
                .collect(),
            layer_scores: self.layers.iter().map(|l| l.scores.clone()).collect(),
        }
    }
}

fn tanh_layer(x: &[f64], w: &[f64], b: &[f64], n_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_out];
    dense_into(x, w, b, &mut out);
    out.iter_mut().for_each(|v| *v = v.tanh());
    out
}

impl Net<'_> {
    fn forward(&self, x: &[f64]) -> ForwardCache {
        let spec = self.spec;
        let mut h = x.to_vec();
        let mut layers = Vec::with_capacity(spec.shared_layers);
        for l in 0..spec.shared_layers {
            let g = spec.gate_slot(l);
            let mut scores = vec![0.0; spec.experts_per_layer];
            dense_into(&h, self.slots[g], self.slots[g + 1], &mut scores);
            softmax_in_place(&mut scores);
            let sel = top_k_select(&scores, spec.top_k);
            let selected: Vec<usize> = (0..sel.len()).filter(|&e| sel[e] == 1).collect();
            let total: f64 = selected.iter().map(|&e| scores[e]).sum();
            let mix: Vec<f64> = selected.iter().map(|&e| scores[e] / total).collect();
            let mut out = vec![0.0; spec.hidden_dim];
            let mut expert_out = Vec::with_capacity(selected.len());
            for (&e, &a) in selected.iter().zip(&mix) {
                let s = spec.expert_slot(l, e);
                let y = tanh_layer(&h, self.slots[s], self.slots[s + 1], spec.hidden_dim);
                for (o, v) in out.iter_mut().zip(&y) {
                    *o += a * v;
                }
                expert_out.push(y);
            }
            layers.push(LayerCache {
                input: std::mem::replace(&mut h, out),
                scores,
                selected,
                mix,
                expert_out,
            });
        }
        let hs = spec.head_slot();
        let mut shared_logits = vec![0.0; spec.n_classes];
        dense_into(&h, self.slots[hs], self.slots[hs + 1], &mut shared_logits);

        let mut local_acts: Vec<Vec<f64>> = Vec::with_capacity(spec.local_layers);
        for i in 0..spec.local_layers {
            let s = spec.local_slot(i);
            let input = local_acts.last().map_or(x, |v| v.as_slice());
            let act = tanh_layer(input, self.slots[s], self.slots[s + 1], spec.local_hidden_dim);
            local_acts.push(act);
        }
        let lh = spec.local_head_slot();
        let mut local_logits = vec![0.0; spec.n_classes];
        dense_into(
            local_acts.last().expect("local_layers >= 1"),
            self.slots[lh],
            self.slots[lh + 1],
            &mut local_logits,
        );

        let bg = spec.branch_gate_slot();
        let mut branch = [0.0; 2];
        dense_into(x, self.slots[bg], self.slots[bg + 1], &mut branch);
        softmax_in_place(&mut branch);

        let mut probs: Vec<f64> = shared_logits
            .iter()
            .zip(&local_logits)
            .map(|(s, l)| branch[0] * s + branch[1] * l)
            .collect();
        softmax_in_place(&mut probs);

        ForwardCache {
            x: x.to_vec(),
            layers,
            shared_top: h,
            shared_logits,
            local_acts,
            local_logits,
            branch,
            probs,
        }
    }

    /// Adds `scale · ∂CE/∂θ` into the enabled gradient slots.
    fn backward(&self, c: &ForwardCache, label: usize, scale: f64, grads: &mut [Option<Vec<f64>>]) {
        let spec = self.spec;
        let mut dz = c.probs.clone();
        dz[label] -= 1.0;
        dz.iter_mut().for_each(|v| *v *= scale);

        let need = |range: std::ops::Range<usize>, grads: &[Option<Vec<f64>>]| {
            grads[range].iter().any(Option::is_some)
        };
        let n_slots = grads.len();
        let need_shared = need(0..spec.branch_gate_slot(), grads);
        let need_branch = need(spec.branch_gate_slot()..spec.branch_gate_slot() + 2, grads);
        let need_local = need(spec.local_slot(0)..n_slots, grads);

        if need_branch {
            let dw: Vec<f64> = [&c.shared_logits, &c.local_logits]
                .iter()
                .map(|z| z.iter().zip(&dz).map(|(a, b)| a * b).sum())
                .collect();
            let dg = softmax_backward(&c.branch, &dw);
            let bg = spec.branch_gate_slot();
            let (gw, gb) = pair_mut(grads, bg);
            dense_backward(&c.x, self.slots[bg], &dg, gw, gb, None);
        }

        if need_local {
            let dzl: Vec<f64> = dz.iter().map(|v| c.branch[1] * v).collect();
            let lh = spec.local_head_slot();
            let top = c.local_acts.last().expect("local_layers >= 1");
            let mut d_act = vec![0.0; spec.local_hidden_dim];
            {
                let (gw, gb) = pair_mut(grads, lh);
                dense_backward(top, self.slots[lh], &dzl, gw, gb, Some(&mut d_act));
            }
            for i in (0..spec.local_layers).rev() {
                let act = &c.local_acts[i];
                let d_pre: Vec<f64> = d_act.iter().zip(act).map(|(d, a)| d * (1.0 - a * a)).collect();
                let input = if i == 0 { &c.x } else { &c.local_acts[i - 1] };
                let s = spec.local_slot(i);
                let mut d_in = vec![0.0; input.len()];
                let (gw, gb) = pair_mut(grads, s);
                let gx = (i > 0).then_some(d_in.as_mut_slice());
                dense_backward(input, self.slots[s], &d_pre, gw, gb, gx);
                d_act = d_in;
            }
        }

        if need_shared {
            let dzs: Vec<f64> = dz.iter().map(|v| c.branch[0] * v).collect();
            let hs = spec.head_slot();
            let mut dh = vec![0.0; spec.hidden_dim];
            {
                let (gw, gb) = pair_mut(grads, hs);
                dense_backward(&c.shared_top, self.slots[hs], &dzs, gw, gb, Some(&mut dh));
            }
            for l in (0..spec.shared_layers).rev() {
                let lc = &c.layers[l];
                let mut d_in = vec![0.0; lc.input.len()];
                let mut d_mix = Vec::with_capacity(lc.selected.len());
                for ((&e, &a), y) in lc.selected.iter().zip(&lc.mix).zip(&lc.expert_out) {
                    d_mix.push(dh.iter().zip(y).map(|(d, v)| d * v).sum::<f64>());
                    let d_pre: Vec<f64> = dh.iter().zip(y).map(|(d, v)| a * d * (1.0 - v * v)).collect();
                    let s = spec.expert_slot(l, e);
                    let (gw, gb) = pair_mut(grads, s);
                    dense_backward(&lc.input, self.slots[s], &d_pre, gw, gb, Some(&mut d_in));
                }
                // mix_e = score_e / Σ_sel score; unselected experts get no gradient
                let total: f64 = lc.selected.iter().map(|&e| lc.scores[e]).sum();
                let weighted: f64 = lc.mix.iter().zip(&d_mix).map(|(a, d)| a * d).sum();
                let mut d_scores = vec![0.0; spec.experts_per_layer];
                for (&e, d) in lc.selected.iter().zip(&d_mix) {
                    d_scores[e] = (d - weighted) / total;
                }
                let d_logits = softmax_backward(&lc.scores, &d_scores);
                let g = spec.gate_slot(l);
                let (gw, gb) = pair_mut(grads, g);
                dense_backward(&lc.input, self.slots[g], &d_logits, gw, gb, Some(&mut d_in));
                dh = d_in;
            }
        }
    }
}

fn pair_mut(grads: &mut [Option<Vec<f64>>], slot: usize) -> (Option<&mut [f64]>, Option<&mut [f64]>) {
    let (a, b) = grads[slot..slot + 2].split_at_mut(1);
    (a[0].as_deref_mut(), b[0].as_deref_mut())
}

/// A bundle viewed through one local bank, trainable by [`crate::learner::train_local`].
#[derive(Debug, Clone)]
pub struct RoutedModel {
    pub bundle: ModelBundle,
    pub bank: BankKey,
}

impl RoutedModel {
    pub fn new(bundle: ModelBundle, bank: impl Into<BankKey>) -> Result<Self> {
        let bank = bank.into();
        bundle.require_bank(&bank)?;
        Ok(Self { bundle, bank })
    }
}

impl Trainable for RoutedModel {
    fn params(&self) -> &ParamStore {
        &self.bundle.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.bundle.params
    }

    fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.bundle.forward(&self.bank, features)?.0)
    }

    fn loss_gradients(&self, batch: &[Sample], mask: &ParamMask) -> Result<ParamStore> {
        self.bundle.gradients(&self.bank, batch, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::{self, backward, ParamMask};
    use crate::seed::SeedTree;

    fn bundle(spec: &MoeSpec, seed: u64) -> ModelBundle {
        ModelBundle::init(spec, "b0", &mut SeedTree::new(seed).rng("init", &[])).unwrap()
    }

    fn random_x(spec: &MoeSpec, rng: &mut impl Rng) -> Vec<f64> {
        (0..spec.n_features).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    fn set(b: &mut ModelBundle, id: ParamId, data: Vec<f64>) {
        let t = b.params_mut().get_mut(&id).unwrap();
        t.data_mut().copy_from_slice(&data);
    }

    #[test]
    fn zero_branch_gate_is_even() {
        let spec = MoeSpec::default();
        let b = bundle(&spec, 1);
        let mut rng = SeedTree::new(2).rng("x", &[]);
        let w = b.branch_gate(&random_x(&spec, &mut rng)).unwrap();
        assert_eq!(w, [0.5, 0.5]);
    }

    #[test]
    fn branch_gate_closed_form() {
        let spec = MoeSpec::default();
        let mut b = bundle(&spec, 1);
        set(&mut b, ParamId::bias(BRANCH_GATE), vec![3f64.ln(), 1f64.ln()]);
        let w = b.branch_gate(&vec![0.0; spec.n_features]).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn branch_weights_and_probs_sum_to_one() {
        let spec = MoeSpec { top_k: 2, ..Default::default() };
        let mut b = bundle(&spec, 3);
        let mut rng = SeedTree::new(4).rng("x", &[]);
        let w: Vec<f64> = (0..spec.n_features * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        set(&mut b, ParamId::weight(BRANCH_GATE), w);
        for _ in 0..1000 {
            let x = random_x(&spec, &mut rng);
            let (probs, trace) = b.forward("b0", &x).unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((trace.branch_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(trace.check(2));
        }
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_select(&[0.2, 0.5, 0.3], 1), vec![0, 1, 0]);
        assert_eq!(top_k_select(&[0.4, 0.4, 0.2], 2), vec![1, 1, 0]);
        assert_eq!(top_k_select(&[0.2, 0.4, 0.4], 1), vec![0, 1, 0]);
        assert_eq!(top_k_select(&[0.1, 0.7, 0.2], 3), vec![1, 1, 1]);
    }

    #[test]
    fn layer_gate_selects_top_k() {
        let spec = MoeSpec { top_k: 2, ..Default::default() };
        let b = bundle(&spec, 5);
        let (sel, scores) = b.layer_gate(0, &vec![0.3; spec.n_features]).unwrap();
        assert_eq!(sel.iter().map(|&v| v as usize).sum::<usize>(), 2);
        assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(sel, top_k_select(&scores, 2));
    }

    #[test]
    fn single_expert_is_plain_two_branch_net() {
        let spec = MoeSpec { experts_per_layer: 1, top_k: 1, ..Default::default() };
        let b = bundle(&spec, 6);
        let x: Vec<f64> = (0..spec.n_features).map(|i| (i as f64 * 0.37).sin()).collect();
        let (probs, _) = b.forward("b0", &x).unwrap();

        let p = b.params();
        let dense = |path: &str, input: &[f64], n: usize, act: bool| {
            let mut out = vec![0.0; n];
            dense_into(input, p[&ParamId::weight(path)].data(), p[&ParamId::bias(path)].data(), &mut out);
            if act {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            out
        };
        let h1 = dense("shared/layer0/expert0", &x, spec.hidden_dim, true);
        let h2 = dense("shared/layer1/expert0", &h1, spec.hidden_dim, true);
        let zs = dense(SHARED_HEAD, &h2, spec.n_classes, false);
        let u = dense("local/b0/layer0", &x, spec.local_hidden_dim, true);
        let zl = dense("local/b0/head", &u, spec.n_classes, false);
        let mut z: Vec<f64> = zs.iter().zip(&zl).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        softmax_in_place(&mut z);
        for (a, b) in probs.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_only_routing_ignores_local_bank() {
        let spec = MoeSpec::default();
        let mut b = bundle(&spec, 7);
        set(&mut b, ParamId::bias(BRANCH_GATE), vec![1000.0, -1000.0]);
        b.clone_bank("b0", "b1").unwrap();
        let mut rng = SeedTree::new(8).rng("x", &[]);
        let ids: Vec<ParamId> = b.partition_ids(&Partition::LocalBank("b1".into())).into_iter().collect();
        for id in ids {
            for v in b.params_mut().get_mut(&id).unwrap().data_mut() {
                *v = rng.random_range(-5.0..5.0);
            }
        }
        let x = random_x(&spec, &mut rng);
        assert_eq!(b.forward("b0", &x).unwrap().0, b.forward("b1", &x).unwrap().0);
    }

    #[test]
    fn unknown_bank_is_lookup_error() {
        let b = bundle(&MoeSpec::default(), 1);
        assert!(matches!(b.forward("nope", &[0.0; 16]), Err(Error::Lookup(_))));
        assert!(matches!(
            b.params_for_scope(&ParamScope::LocalBankPlusBranchGate("nope".into())),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn scope_partition_arithmetic() {
        let mut b = bundle(&MoeSpec::default(), 1);
        b.clone_bank("b0", "b1").unwrap();
        let shared = b.partition_ids(&Partition::Shared);
        let gate = b.partition_ids(&Partition::BranchGate);
        let bank0 = b.partition_ids(&Partition::LocalBank("b0".into()));
        let bank1 = b.partition_ids(&Partition::LocalBank("b1".into()));
        let full = b.params_for_scope(&ParamScope::FullModel).unwrap();
        assert_eq!(full.len(), shared.len() + gate.len() + bank0.len() + bank1.len());

        let sg = b.params_for_scope(&ParamScope::SharedPlusBranchGate).unwrap();
        let l0 = b.params_for_scope(&ParamScope::LocalBankPlusBranchGate("b0".into())).unwrap();
        let l1 = b.params_for_scope(&ParamScope::LocalBankPlusBranchGate("b1".into())).unwrap();
        assert_eq!(sg.intersection(&l0).cloned().collect::<BTreeSet<_>>(), gate);
        assert!(bank0.is_disjoint(&bank1));
        assert_eq!(l0.intersection(&l1).cloned().collect::<BTreeSet<_>>(), gate);
        // layer gates belong to the shared partition
        assert!(sg.iter().any(is_layer_gate));
        assert!(!l0.iter().any(is_layer_gate));
        assert_eq!(sg, b.params_for_scope(&ParamScope::SharedPlusBranchGate).unwrap());
    }

    #[test]
    fn clone_bank_semantics() {
        let spec = MoeSpec::default();
        let mut b = bundle(&spec, 1);
        b.clone_bank("b0", "b1").unwrap();
        let x = vec![0.1; spec.n_features];
        assert_eq!(b.forward("b0", &x).unwrap(), b.forward("b1", &x).unwrap());
        assert!(matches!(b.clone_bank("b0", "b1"), Err(Error::Conflict(_))));
        assert!(matches!(b.clone_bank("zz", "b2"), Err(Error::Lookup(_))));

        let before = b.partition_ids(&Partition::LocalBank("b0".into()))
            .into_iter()
            .map(|id| (id.clone(), b.params()[&id].clone()))
            .collect::<Vec<_>>();
        let mut model = RoutedModel::new(b, "b1").unwrap();
        let mask = model.bundle.params_for_scope(&ParamScope::LocalBankPlusBranchGate("b1".into())).unwrap();
        let batch: Vec<Sample> = (0..4)
            .map(|i| Sample { features: vec![0.2 * i as f64; spec.n_features], label: i % 4, domain: 0 })
            .collect();
        let settings = learner::TrainSettings { max_epochs: 3, patience: 3, learning_rate: 0.5, ..Default::default() };
        learner::train_local(&mut model, &batch, &batch, &settings, &mask).unwrap();
        for (id, t) in before {
            assert_eq!(&model.bundle.params()[&id], &t);
        }
    }

    #[test]
    fn unselected_experts_get_zero_gradient() {
        let spec = MoeSpec::default();
        let b = bundle(&spec, 9);
        let x: Vec<f64> = (0..spec.n_features).map(|i| 0.1 * i as f64 - 0.5).collect();
        let (_, trace) = b.forward("b0", &x).unwrap();
        let mask = b.params_for_scope(&ParamScope::FullModel).unwrap();
        let g = b.gradients("b0", &[Sample { features: x, label: 2, domain: 0 }], &mask).unwrap();
        for (l, sel) in trace.layer_selections.iter().enumerate() {
            for (e, &on) in sel.iter().enumerate() {
                let gw = &g[&ParamId::weight(expert_path(l, e))];
                if on == 0 {
                    assert!(gw.data().iter().all(|&v| v == 0.0));
                } else {
                    assert!(gw.data().iter().any(|&v| v != 0.0));
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for top_k in [1, 2] {
            let spec = MoeSpec { top_k, ..Default::default() };
            let mut b = bundle(&spec, 11);
            let mut rng = SeedTree::new(12).rng("x", &[]);
            let w: Vec<f64> = (0..spec.n_features * 2).map(|_| rng.random_range(-0.5..0.5)).collect();
            set(&mut b, ParamId::weight(BRANCH_GATE), w);
            let batch: Vec<Sample> = (0..5)
                .map(|i| Sample { features: random_x(&spec, &mut rng), label: i % spec.n_classes, domain: 0 })
                .collect();
            let model = RoutedModel::new(b, "b0").unwrap();
            let mask: ParamMask = model.params().keys().cloned().collect();
            let analytic = backward(&model, &batch, &mask).unwrap();
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for id in &mask {
                let n = model.params()[id].len();
                for k in (0..n).step_by(7) {
                    let mut plus = model.clone();
                    plus.params_mut().get_mut(id).unwrap().data_mut()[k] += h;
                    let mut minus = model.clone();
                    minus.params_mut().get_mut(id).unwrap().data_mut()[k] -= h;
                    let numeric = (plus.mean_loss(&batch).unwrap() - minus.mean_loss(&batch).unwrap()) / (2.0 * h);
                    let a = analytic[id].data()[k];
                    worst = worst.max((a - numeric).abs() / (numeric.abs() + 1e-8));
                }
            }
            assert!(worst < 1e-4, "top_k={top_k}: worst relative error {worst}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut b = bundle(&MoeSpec::default(), 13);
        b.clone_bank("b0", "g1").unwrap();
        let json = serde_json::to_string(&b.to_checkpoint()).unwrap();
        let back = ModelBundle::from_checkpoint(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, b);
        let ids: Vec<_> = b.to_checkpoint().records.iter().map(|r| r.id.clone()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn partition_of_paths() {
        assert_eq!(partition_of(&ParamId::weight("shared/head")), Some(Partition::Shared));
        assert_eq!(partition_of(&ParamId::bias(BRANCH_GATE)), Some(Partition::BranchGate));
        assert_eq!(
            partition_of(&ParamId::weight("local/g3/layer0")),
            Some(Partition::LocalBank("g3".into()))
        );
        assert_eq!(partition_of(&ParamId::weight("other")), None);
    }
}
