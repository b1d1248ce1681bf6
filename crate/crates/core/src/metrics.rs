//! FLOP accounting, accuracy aggregation and efficiency.
//!
//! Cost model: one training sample-epoch costs a forward pass over the whole
//! evaluated path plus twice the forward cost of the trainable part of that
//! path. A dense layer `n_in → n_out` costs `2·n_in·n_out + n_out` forward.
//! Gated layers only count the `top_k` experts that actually run.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{MoeSpec, ParamScope};
use crate::policy::RetrainConfig;

pub fn dense_flops(n_in: usize, n_out: usize) -> f64 {
    (2 * n_in * n_out + n_out) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitPart {
    Shared,
    BranchGate,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseUnit {
    pub part: UnitPart,
    pub n_in: usize,
    pub n_out: usize,
    /// How many copies run per forward pass.
    pub count: usize,
}

impl DenseUnit {
    fn flops(&self) -> f64 {
        self.count as f64 * dense_flops(self.n_in, self.n_out)
    }
}

/// Dense layers evaluated by one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub units: Vec<DenseUnit>,
}

fn trains(scope: &ParamScope, part: UnitPart) -> bool {
    match scope {
        ParamScope::FullModel | ParamScope::PerDeviceLocalPlusShared => true,
        ParamScope::SharedPlusBranchGate => part != UnitPart::Local,
        ParamScope::LocalBankPlusBranchGate(_) => part != UnitPart::Shared,
    }
}

impl CostProfile {
    pub fn new(units: Vec<DenseUnit>) -> Self {
        Self { units }
    }

    pub fn for_model(spec: &MoeSpec) -> Self {
        let mut units = Vec::new();
        let mut push = |part, n_in, n_out, count| units.push(DenseUnit { part, n_in, n_out, count });
        for l in 0..spec.shared_layers {
            push(UnitPart::Shared, spec.shared_in(l), spec.experts_per_layer, 1);
            push(UnitPart::Shared, spec.shared_in(l), spec.hidden_dim, spec.top_k);
        }
        push(UnitPart::Shared, spec.hidden_dim, spec.n_classes, 1);
        push(UnitPart::BranchGate, spec.n_features, 2, 1);
        for i in 0..spec.local_layers {
            push(UnitPart::Local, spec.local_in(i), spec.local_hidden_dim, 1);
        }
        push(UnitPart::Local, spec.local_hidden_dim, spec.n_classes, 1);
        Self { units }
    }

    pub fn forward(&self) -> f64 {
        self.units.iter().map(DenseUnit::flops).sum()
    }

    pub fn trainable_forward(&self, scope: &ParamScope) -> f64 {
        self.units.iter().filter(|u| trains(scope, u.part)).map(DenseUnit::flops).sum()
    }

    /// Training FLOPs for one sample over one epoch.
    pub fn per_sample_epoch(&self, scope: &ParamScope) -> f64 {
        self.forward() + 2.0 * self.trainable_forward(scope)
    }
}

/// κ for one device and one round.
pub fn kappa(profile: &CostProfile, scope: &ParamScope, n_train_samples: usize, epochs_run: usize) -> Result<f64> {
    if epochs_run == 0 {
        return Err(Error::Protocol("kappa needs at least one epoch".into()));
    }
    Ok(epochs_run as f64 * n_train_samples as f64 * profile.per_sample_epoch(scope))
}

/// Per-round κ by device.
pub type RoundKappas = BTreeMap<usize, f64>;

/// Σ over rounds of Σ over participants of κ.
pub fn event_cost(config: &RetrainConfig, rounds: &[RoundKappas]) -> Result<f64> {
    if !config.trig {
        return Ok(0.0);
    }
    if config.devices.is_empty() {
        return Err(Error::Protocol("triggered config has no participants".into()));
    }
    let mut total = 0.0;
    for round in rounds {
        let reported: BTreeSet<usize> = round.keys().copied().collect();
        if reported != config.devices {
            return Err(Error::Protocol("kappa reports do not match the participant set".into()));
        }
        total += round.values().sum::<f64>();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEvent {
    pub step: usize,
    pub kind: String,
    pub rounds: Vec<RoundKappas>,
    pub cost: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub events: Vec<CostEvent>,
    pub cumulative: f64,
}

impl CostLedger {
    pub fn record(&mut self, step: usize, config: &RetrainConfig, rounds: Vec<RoundKappas>) -> Result<f64> {
        if self.events.last().is_some_and(|e| e.step > step) {
            return Err(Error::Protocol("cost events must arrive in step order".into()));
        }
        let cost = event_cost(config, &rounds)?;
        self.events.push(CostEvent { step, kind: config.kind.label(), rounds, cost });
        self.cumulative += cost;
        Ok(cost)
    }

    pub fn step_cost(&self, step: usize) -> f64 {
        self.events.iter().filter(|e| e.step == step).map(|e| e.cost).sum()
    }

    /// Recomputes the total from the events.
    pub fn audit(&self) -> f64 {
        self.events.iter().map(|e| e.cost).sum()
    }
}

/// Mean over all devices.
pub fn step_accuracy(accs: &[f64]) -> Result<f64> {
    if accs.is_empty() {
        return Err(Error::Protocol("step accuracy over zero devices".into()));
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Ā / TC. A run that never retrained has TC = 0 and reports +∞.
pub fn efficiency(mean_acc: f64, total_cost: f64) -> f64 {
    if total_cost == 0.0 {
        log::warn!("total cost is zero; efficiency reported as +inf");
        return f64::INFINITY;
    }
    mean_acc / total_cost
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Steps on which each method sits strictly above the pooled median of all
/// methods' per-step accuracies.
pub fn above_reference_count(per_step: &BTreeMap<String, Vec<f64>>) -> Result<(f64, BTreeMap<String, usize>)> {
    let mut lengths = per_step.values().map(Vec::len);
    let Some(n) = lengths.next() else {
        return Err(Error::Protocol("no methods to compare".into()));
    };
    if lengths.any(|m| m != n) {
        return Err(Error::Protocol("methods do not share a step grid".into()));
    }
    let pooled: Vec<f64> = per_step.values().flatten().copied().collect();
    let reference = median(&pooled).ok_or_else(|| Error::Protocol("empty step grid".into()))?;
    let counts = per_step
        .iter()
        .map(|(m, accs)| (m.clone(), accs.iter().filter(|&&a| a > reference).count()))
        .collect();
    Ok((reference, counts))
}

/// Gaussian smoothing for plotting. Kernel is cut at ±4σ and renormalised over
/// the taps that fall inside the series.
pub fn smooth_curve(series: &[f64], sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).floor() as isize;
    let weight = |d: isize| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
    let n = series.len() as isize;
    (0..n)
        .map(|i| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for d in -radius..=radius {
                let j = i + d;
                if (0..n).contains(&j) {
                    let w = weight(d);
                    acc += w * series[j as usize];
                    norm += w;
                }
            }
            acc / norm
        })
        .collect()
}

mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad efficiency {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    /// Post-retraining accuracy per step (headline).
    pub per_step_acc: Vec<f64>,
    /// Accuracy observed before any retraining in the step.
    pub per_step_acc_pre: Vec<f64>,
    pub mean_acc: f64,
    pub total_cost_raw: f64,
    /// Raw FLOPs of retraining the full model on every device at every step.
    pub cost_normalizer: f64,
    pub total_cost: f64,
    #[serde(with = "inf_as_string")]
    pub efficiency: f64,
    pub events_by_kind: BTreeMap<String, usize>,
    #[serde(default)]
    pub above_reference_count: Option<usize>,
}

impl MetricsReport {
    pub fn build(
        method: &str,
        seed: u64,
        per_step_acc: Vec<f64>,
        per_step_acc_pre: Vec<f64>,
        ledger: &CostLedger,
        cost_normalizer: f64,
    ) -> Result<Self> {
        if per_step_acc.is_empty() || per_step_acc.len() != per_step_acc_pre.len() {
            return Err(Error::Protocol("per-step accuracy series are empty or misaligned".into()));
        }
        if cost_normalizer <= 0.0 {
            return Err(Error::Protocol("cost normaliser must be positive".into()));
        }
        let mean_acc = per_step_acc.iter().sum::<f64>() / per_step_acc.len() as f64;
        let total_cost = ledger.cumulative / cost_normalizer;
        let mut events_by_kind = BTreeMap::new();
        for e in &ledger.events {
            let family = e.kind.trim_end_matches(|c: char| c.is_ascii_digit()).to_string();
            *events_by_kind.entry(family).or_insert(0) += 1;
        }
        Ok(Self {
            method: method.to_string(),
            seed,
            per_step_acc,
            per_step_acc_pre,
            mean_acc,
            total_cost_raw: ledger.cumulative,
            cost_normalizer,
            total_cost,
            efficiency: efficiency(mean_acc, total_cost),
            events_by_kind,
            above_reference_count: None,
        })
    }

    pub fn cell(&self) -> String {
        format_cell(self.efficiency, self.mean_acc, self.total_cost)
    }
}

/// `E (Ā / TC)` with two decimals each.
pub fn format_cell(e: f64, mean_acc: f64, tc: f64) -> String {
    let e = if e.is_finite() { format!("{e:.2}") } else { "inf".to_string() };
    format!("{e} ({mean_acc:.2} / {tc:.2})")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ConfigKind;

    fn config(devices: &[usize]) -> RetrainConfig {
        RetrainConfig {
            trig: !devices.is_empty(),
            devices: devices.iter().copied().collect(),
            scope: ParamScope::FullModel,
            kind: ConfigKind::BaselineFull,
        }
    }

    #[test]
    fn single_layer_kappa() {
        let p = CostProfile::new(vec![DenseUnit { part: UnitPart::Shared, n_in: 16, n_out: 4, count: 1 }]);
        assert_eq!(kappa(&p, &ParamScope::FullModel, 30, 1).unwrap(), 11_880.0);
        // frozen: only the forward term
        let frozen = kappa(&p, &ParamScope::LocalBankPlusBranchGate("b".into()), 30, 1).unwrap();
        assert_eq!(frozen, 30.0 * 132.0);
        assert_eq!(kappa(&p, &ParamScope::FullModel, 30, 2).unwrap(), 2.0 * 11_880.0);
        assert!(kappa(&p, &ParamScope::FullModel, 30, 0).is_err());
    }

    #[test]
    fn default_model_profile() {
        let p = CostProfile::for_model(&MoeSpec::default());
        // hand count of the default architecture, forward only
        let fwd = 99.0 + 1056.0 + 195.0 + 2080.0 + 260.0 + 66.0 + 528.0 + 132.0;
        assert_eq!(p.forward(), fwd);
        assert_eq!(p.per_sample_epoch(&ParamScope::FullModel), 3.0 * fwd);
        assert_eq!(p.per_sample_epoch(&ParamScope::SharedPlusBranchGate), fwd + 2.0 * 3756.0);
        assert_eq!(p.per_sample_epoch(&ParamScope::LocalBankPlusBranchGate("g".into())), fwd + 2.0 * 726.0);
    }

    #[test]
    fn group_event_cheaper_than_global() {
        let p = CostProfile::for_model(&MoeSpec::default());
        let local = ParamScope::LocalBankPlusBranchGate("g".into());
        for s in 1..10 {
            let group = s as f64 * kappa(&p, &local, 30, 5).unwrap();
            let global = 10.0 * kappa(&p, &ParamScope::SharedPlusBranchGate, 30, 5).unwrap();
            assert!(group < global);
        }
    }

    #[test]
    fn event_cost_double_sum() {
        let c = config(&[0, 1, 2]);
        let round: RoundKappas = [(0, 2.0), (1, 2.0), (2, 2.0)].into();
        assert_eq!(event_cost(&c, &vec![round; 5]).unwrap(), 30.0);
        assert_eq!(event_cost(&config(&[]), &[]).unwrap(), 0.0);
        let bad: RoundKappas = [(0, 2.0), (7, 2.0), (2, 2.0)].into();
        assert!(event_cost(&c, &[bad]).is_err());
        let mut empty = config(&[]);
        empty.trig = true;
        assert!(event_cost(&empty, &[]).is_err());
    }

    #[test]
    fn ledger_audit() {
        let mut l = CostLedger::default();
        let c = config(&[1]);
        l.record(1, &c, vec![[(1, 3.0)].into()]).unwrap();
        l.record(1, &c, vec![[(1, 1.0)].into(), [(1, 1.0)].into()]).unwrap();
        l.record(4, &c, vec![[(1, 0.5)].into()]).unwrap();
        assert_eq!(l.cumulative, l.audit());
        assert_eq!(l.step_cost(1), 5.0);
        assert!(l.record(2, &c, vec![[(1, 0.5)].into()]).is_err());
    }

    #[test]
    fn step_accuracy_examples() {
        assert_eq!(step_accuracy(&[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!((step_accuracy(&[0.7; 5]).unwrap() - 0.7).abs() < 1e-15);
        assert!((step_accuracy(&[0.2, 0.4, 0.9]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn efficiency_examples() {
        assert!((efficiency(0.85, 0.07) - 12.14).abs() < 0.005);
        assert!((efficiency(0.60, 0.16) - 3.75).abs() < 0.005);
        assert!((efficiency(0.61, 0.29) - 2.10).abs() < 0.005);
        assert_eq!(efficiency(0.5, 0.0), f64::INFINITY);
    }

    #[test]
    fn reference_counts() {
        let m: BTreeMap<String, Vec<f64>> = [("a".into(), vec![0.9; 6]), ("b".into(), vec![0.1; 6])].into();
        let (r, c) = above_reference_count(&m).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
        assert_eq!((c["a"], c["b"]), (6, 0));

        let one: BTreeMap<String, Vec<f64>> = [("x".into(), vec![0.2, 0.4, 0.6, 0.8])].into();
        let (r, c) = above_reference_count(&one).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
        assert_eq!(c["x"], 2);

        let same: BTreeMap<String, Vec<f64>> = [("p".into(), vec![0.1, 0.5, 0.9]), ("q".into(), vec![0.1, 0.5, 0.9])].into();
        let (_, c) = above_reference_count(&same).unwrap();
        assert_eq!((c["p"], c["q"]), (1, 1));

        let ragged: BTreeMap<String, Vec<f64>> = [("p".into(), vec![0.1]), ("q".into(), vec![0.1, 0.2])].into();
        assert!(above_reference_count(&ragged).is_err());
    }

    #[test]
    fn smoothing() {
        let c = smooth_curve(&[0.3; 7], 1.5);
        assert!(c.iter().all(|v| (v - 0.3).abs() < 1e-15));

        let s = smooth_curve(&[0.0, 1.0, 4.0, 1.0, 0.0], 1.5);
        assert!((s[0] - s[4]).abs() < 1e-15 && (s[1] - s[3]).abs() < 1e-15);

        // the kernel reaches ±6 but only ±4 lies inside a length-9 series,
        // so the centre is w(0) / Σ_{|d|≤4} w(d)
        let mut x = vec![0.0; 9];
        x[4] = 1.0;
        let norm: f64 = (-4..=4).map(|d: i32| (-(d * d) as f64 / 4.5).exp()).sum();
        assert!((smooth_curve(&x, 1.5)[4] - 1.0 / norm).abs() < 1e-15);
    }

    #[test]
    fn report_identities() {
        let mut l = CostLedger::default();
        l.record(1, &config(&[0]), vec![[(0, 50.0)].into()]).unwrap();
        let r = MetricsReport::build("m", 1, vec![0.5, 0.7], vec![0.4, 0.6], &l, 1000.0).unwrap();
        assert!((r.mean_acc - 0.6).abs() < 1e-12);
        assert!((r.efficiency * r.total_cost - r.mean_acc).abs() < 1e-9);
        assert_eq!(r.events_by_kind["full"], 1);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);

        let idle = MetricsReport::build("m", 1, vec![0.5], vec![0.5], &CostLedger::default(), 1.0).unwrap();
        assert_eq!(idle.efficiency, f64::INFINITY);
        let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&idle).unwrap()).unwrap();
        assert_eq!(back.efficiency, f64::INFINITY);
    }

    #[test]
    fn cell_format() {
        assert_eq!(format_cell(efficiency(0.85, 0.07), 0.85, 0.07), "12.14 (0.85 / 0.07)");
    }
}
