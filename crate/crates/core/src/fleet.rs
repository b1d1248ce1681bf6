//! Device-side inference: each device scores its recent validation data and
//! reports an [`Observation`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{argmax, Sample};
use crate::moe::{BankKey, GateTrace, ModelBundle};

/// `n_classes × gate_units` matrix, row per class.
pub type GateMatrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub device_id: usize,
    /// Local bank this device routes through.
    pub current_group: BankKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub device_id: usize,
    pub avg_local_acc: f64,
    pub gating_matrix: GateMatrix,
}

/// Soft-label weighted per-class mean of the gate vectors.
///
/// Row `y` is `Σ_x p(y|x)·g(x) / Σ_x p(y|x)`; a row whose total weight is
/// zero falls back to the plain mean gate vector over all samples.
pub fn aggregate_gating(traces: &[GateTrace], probs: &[Vec<f64>], include_branch: bool) -> Result<GateMatrix> {
    if traces.len() != probs.len() {
        return Err(Error::Protocol("need one probability vector per gate trace".into()));
    }
    let Some(first) = probs.first() else {
        return Err(Error::Protocol("cannot aggregate gates over zero samples".into()));
    };
    let n_classes = first.len();
    let gates: Vec<Vec<f64>> = traces.iter().map(|t| t.gate_vector(include_branch)).collect();
    let units = gates[0].len();

    let mut mean = vec![0.0; units];
    for g in &gates {
        mean.iter_mut().zip(g).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= gates.len() as f64);

    let mut matrix = vec![vec![0.0; units]; n_classes];
    let mut weight = vec![0.0; n_classes];
    for (g, p) in gates.iter().zip(probs) {
        if p.len() != n_classes {
            return Err(Error::Protocol("probability vectors differ in length".into()));
        }
        for (y, &py) in p.iter().enumerate() {
            weight[y] += py;
            matrix[y].iter_mut().zip(g).for_each(|(m, v)| *m += py * v);
        }
    }
    for (row, &w) in matrix.iter_mut().zip(&weight) {
        if w > 0.0 {
            row.iter_mut().for_each(|m| *m /= w);
        } else {
            row.clone_from(&mean);
        }
    }
    Ok(matrix)
}

/// Runs the model over `val` without touching parameters.
pub fn local_inference(
    device_id: usize,
    bundle: &ModelBundle,
    bank: &str,
    val: &[Sample],
    include_branch: bool,
) -> Result<Observation> {
    if val.is_empty() {
        return Err(Error::Protocol(format!("device {device_id} has no validation samples")));
    }
    let mut traces = Vec::with_capacity(val.len());
    let mut probs = Vec::with_capacity(val.len());
    let mut correct = 0usize;
    for s in val {
        let (p, t) = bundle.forward(bank, &s.features)?;
        if argmax(&p) == s.label {
            correct += 1;
        }
        probs.push(p);
        traces.push(t);
    }
    Ok(Observation {
        device_id,
        avg_local_acc: correct as f64 / val.len() as f64,
        gating_matrix: aggregate_gating(&traces, &probs, include_branch)?,
    })
}

/// Top-1 accuracy of `bank`'s route over `data`.
pub fn accuracy(bundle: &ModelBundle, bank: &str, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Protocol("accuracy over an empty set".into()));
    }
    let mut correct = 0usize;
    for s in data {
        if argmax(&bundle.forward(bank, &s.features)?.0) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
