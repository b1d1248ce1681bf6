//! Retraining configurations: whether to retrain, who participates, and
//! which parameters move. One generator per policy; all are pure.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clustering::Grouping;
use crate::error::{Error, Result};
use crate::fleet::Observation;
use crate::moe::ParamScope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Driftguard,
    FclAvetrig,
    FclPerdevice,
    PflAvetrig,
    PflPerdevice,
    ClusterBased,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Driftguard,
        PolicyKind::FclAvetrig,
        PolicyKind::FclPerdevice,
        PolicyKind::PflAvetrig,
        PolicyKind::PflPerdevice,
        PolicyKind::ClusterBased,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Driftguard => "driftguard",
            PolicyKind::FclAvetrig => "fcl_avetrig",
            PolicyKind::FclPerdevice => "fcl_perdevice",
            PolicyKind::PflAvetrig => "pfl_avetrig",
            PolicyKind::PflPerdevice => "pfl_perdevice",
            PolicyKind::ClusterBased => "cluster_based",
        }
    }

    /// Whether the policy groups devices every step.
    pub fn clusters(self) -> bool {
        matches!(self, PolicyKind::Driftguard | PolicyKind::ClusterBased)
    }

    pub fn is_pfl(self) -> bool {
        matches!(self, PolicyKind::PflAvetrig | PolicyKind::PflPerdevice)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::field("policies", format!("unknown policy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", content = "group", rename_all = "snake_case")]
pub enum ConfigKind {
    Global,
    Group(usize),
    BaselineFull,
    BaselinePerDevice,
    BaselinePfl,
    BaselinePflPerDevice,
    BaselineCluster(usize),
}

impl ConfigKind {
    pub fn label(&self) -> String {
        match self {
            ConfigKind::Global => "global".into(),
            ConfigKind::Group(g) => format!("group{g}"),
            ConfigKind::BaselineFull => "full".into(),
            ConfigKind::BaselinePerDevice => "per_device".into(),
            ConfigKind::BaselinePfl => "pfl".into(),
            ConfigKind::BaselinePflPerDevice => "pfl_per_device".into(),
            ConfigKind::BaselineCluster(g) => format!("cluster{g}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub trig: bool,
    pub devices: BTreeSet<usize>,
    pub scope: ParamScope,
    pub kind: ConfigKind,
}

impl RetrainConfig {
    fn triggered(devices: BTreeSet<usize>, scope: ParamScope, kind: ConfigKind) -> Self {
        Self { trig: true, devices, scope, kind }
    }

    /// Checks the config against a fleet of `fleet` devices.
    pub fn validate(&self, fleet: &BTreeSet<usize>, grouping: Option<&Grouping>) -> Result<()> {
        if !self.trig && !self.devices.is_empty() {
            return Err(Error::Protocol("untriggered config lists devices".into()));
        }
        if self.trig && self.devices.is_empty() {
            return Err(Error::Protocol("triggered config has no participants".into()));
        }
        if !self.devices.is_subset(fleet) {
            return Err(Error::Protocol("config names devices outside the fleet".into()));
        }
        if let (ConfigKind::Group(j), Some(g)) = (&self.kind, grouping) {
            let bank = g.banks.get(*j).ok_or_else(|| Error::Protocol(format!("no group {j}")))?;
            if self.scope != ParamScope::LocalBankPlusBranchGate(bank.clone()) {
                return Err(Error::Protocol("group config does not carry its group's bank".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyThresholds {
    pub tau_global: f64,
    pub tau_group: f64,
    /// Trigger threshold shared by all baselines.
    pub tau_device: f64,
}

impl Default for PolicyThresholds {
    fn default() -> Self {
        Self {
            tau_global: 0.55,
            tau_group: 0.55,
            tau_device: 0.55,
        }
    }
}

impl PolicyThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("thresholds.tau_global", self.tau_global),
            ("thresholds.tau_group", self.tau_group),
            ("thresholds.tau_device", self.tau_device),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::field(name, "must lie strictly between 0 and 1"));
            }
        }
        Ok(())
    }
}

fn mean_acc<'a>(obs: impl IntoIterator<Item = &'a Observation>) -> Option<f64> {
    let (sum, n) = obs.into_iter().fold((0.0, 0usize), |(s, n), o| (s + o.avg_local_acc, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn all_devices(observations: &[Observation]) -> BTreeSet<usize> {
    observations.iter().map(|o| o.device_id).collect()
}

fn below(observations: &[Observation], tau: f64) -> BTreeSet<usize> {
    observations.iter().filter(|o| o.avg_local_acc < tau).map(|o| o.device_id).collect()
}

fn group_means<'a>(observations: &'a [Observation], grouping: &'a Grouping) -> impl Iterator<Item = (usize, f64)> + 'a {
    grouping.groups.iter().enumerate().filter_map(move |(j, g)| {
        mean_acc(observations.iter().filter(|o| g.contains(&o.device_id))).map(|m| (j, m))
    })
}

/// Global config when the fleet mean drops below `tau_global`, then one
/// group config per group whose mean drops below `tau_group`.
pub fn driftguard_configs(observations: &[Observation], grouping: &Grouping, t: &PolicyThresholds) -> Vec<RetrainConfig> {
    let mut out = Vec::new();
    if mean_acc(observations).is_some_and(|m| m < t.tau_global) {
        out.push(RetrainConfig::triggered(
            all_devices(observations),
            ParamScope::SharedPlusBranchGate,
            ConfigKind::Global,
        ));
    }
    for (j, m) in group_means(observations, grouping) {
        if m < t.tau_group {
            out.push(RetrainConfig::triggered(
                grouping.groups[j].iter().copied().collect(),
                ParamScope::LocalBankPlusBranchGate(grouping.banks[j].clone()),
                ConfigKind::Group(j),
            ));
        }
    }
    out
}

fn ave_trig(observations: &[Observation], tau: f64, scope: ParamScope, kind: ConfigKind) -> Vec<RetrainConfig> {
    match mean_acc(observations) {
        Some(m) if m < tau => vec![RetrainConfig::triggered(all_devices(observations), scope, kind)],
        _ => Vec::new(),
    }
}

fn per_device(observations: &[Observation], tau: f64, scope: ParamScope, kind: ConfigKind) -> Vec<RetrainConfig> {
    let s = below(observations, tau);
    if s.is_empty() {
        Vec::new()
    } else {
        vec![RetrainConfig::triggered(s, scope, kind)]
    }
}

pub fn fcl_avetrig(observations: &[Observation], t: &PolicyThresholds) -> Vec<RetrainConfig> {
    ave_trig(observations, t.tau_device, ParamScope::FullModel, ConfigKind::BaselineFull)
}

pub fn fcl_perdevice(observations: &[Observation], t: &PolicyThresholds) -> Vec<RetrainConfig> {
    per_device(observations, t.tau_device, ParamScope::FullModel, ConfigKind::BaselinePerDevice)
}

pub fn pfl_avetrig(observations: &[Observation], t: &PolicyThresholds) -> Vec<RetrainConfig> {
    ave_trig(observations, t.tau_device, ParamScope::PerDeviceLocalPlusShared, ConfigKind::BaselinePfl)
}

pub fn pfl_perdevice(observations: &[Observation], t: &PolicyThresholds) -> Vec<RetrainConfig> {
    per_device(
        observations,
        t.tau_device,
        ParamScope::PerDeviceLocalPlusShared,
        ConfigKind::BaselinePflPerDevice,
    )
}

/// One full-model config per group whose mean drops below `tau_device`; the
/// runtime trains that group's own model replica.
pub fn cluster_based(observations: &[Observation], grouping: &Grouping, t: &PolicyThresholds) -> Vec<RetrainConfig> {
    group_means(observations, grouping)
        .filter(|&(_, m)| m < t.tau_device)
        .map(|(j, _)| {
            RetrainConfig::triggered(
                grouping.groups[j].iter().copied().collect(),
                ParamScope::FullModel,
                ConfigKind::BaselineCluster(j),
            )
        })
        .collect()
}

/// Dispatches to the generator for `policy`. Clustering policies need a
/// grouping.
pub fn generate(
    policy: PolicyKind,
    observations: &[Observation],
    grouping: Option<&Grouping>,
    t: &PolicyThresholds,
) -> Result<Vec<RetrainConfig>> {
    if observations.is_empty() {
        return Err(Error::Protocol("policies need at least one observation".into()));
    }
    let need_grouping = || grouping.ok_or_else(|| Error::Protocol(format!("{policy} needs a grouping")));
    Ok(match policy {
        PolicyKind::Driftguard => driftguard_configs(observations, need_grouping()?, t),
        PolicyKind::FclAvetrig => fcl_avetrig(observations, t),
        PolicyKind::FclPerdevice => fcl_perdevice(observations, t),
        PolicyKind::PflAvetrig => pfl_avetrig(observations, t),
        PolicyKind::PflPerdevice => pfl_perdevice(observations, t),
        PolicyKind::ClusterBased => cluster_based(observations, need_grouping()?, t),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(accs: &[f64]) -> Vec<Observation> {
        accs.iter()
            .enumerate()
            .map(|(i, &a)| Observation { device_id: i, avg_local_acc: a, gating_matrix: vec![vec![0.0]] })
            .collect()
    }

    fn grouping(groups: Vec<Vec<usize>>) -> Grouping {
        let n = groups.len();
        Grouping {
            groups,
            centroids: vec![vec![vec![0.0]]; n],
            banks: (0..n).map(|j| format!("g{j}")).collect(),
        }
    }

    #[test]
    fn perfect_accuracy_triggers_nothing() {
        let o = obs(&[1.0; 4]);
        let g = grouping(vec![vec![0, 1], vec![2, 3]]);
        let t = PolicyThresholds::default();
        for p in PolicyKind::ALL {
            assert!(generate(p, &o, Some(&g), &t).unwrap().is_empty(), "{p}");
        }
    }

    #[test]
    fn global_and_group_in_one_step() {
        let o = obs(&[0.3, 0.3, 0.5, 0.5]);
        let g = grouping(vec![vec![0, 1], vec![2, 3]]);
        let t = PolicyThresholds::default();
        let c = driftguard_configs(&o, &g, &t);
        // mean 0.40: global; group 0 mean 0.30 and group 1 mean 0.50 both below
        assert_eq!(c[0].kind, ConfigKind::Global);
        assert_eq!(c[0].scope, ParamScope::SharedPlusBranchGate);
        assert_eq!(c[0].devices.len(), 4);
        assert_eq!(c[1].kind, ConfigKind::Group(0));
        assert_eq!(c[1].devices, BTreeSet::from([0, 1]));
        assert_eq!(c[1].scope, ParamScope::LocalBankPlusBranchGate("g0".into()));
    }

    #[test]
    fn only_the_degraded_group() {
        let o = obs(&[0.9, 0.9, 0.4, 0.4]);
        let g = grouping(vec![vec![0, 1], vec![2, 3]]);
        let c = driftguard_configs(&o, &g, &PolicyThresholds::default());
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].kind, ConfigKind::Group(1));
    }

    #[test]
    fn avetrig_strict_threshold() {
        let t = PolicyThresholds::default();
        assert!(fcl_avetrig(&obs(&[0.56, 0.56]), &t).is_empty());
        assert!(fcl_avetrig(&obs(&[0.55, 0.55]), &t).is_empty());
        let c = fcl_avetrig(&obs(&[0.54, 0.54]), &t);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].scope, ParamScope::FullModel);
        assert_eq!(c[0].devices, BTreeSet::from([0, 1]));

        let p = pfl_avetrig(&obs(&[0.54, 0.54]), &t);
        assert_eq!(p[0].scope, ParamScope::PerDeviceLocalPlusShared);
        assert_eq!(p[0].devices, BTreeSet::from([0, 1]));
        assert_ne!(p[0].scope, c[0].scope);
    }

    #[test]
    fn per_device_selection() {
        let t = PolicyThresholds::default();
        for f in [fcl_perdevice, pfl_perdevice] {
            let c = f(&obs(&[0.9, 0.3, 0.9]), &t);
            assert_eq!(c.len(), 1);
            assert_eq!(c[0].devices, BTreeSet::from([1]));
            assert!(f(&obs(&[0.9, 0.9]), &t).is_empty());
            assert_eq!(f(&obs(&[0.1, 0.2]), &t)[0].devices, BTreeSet::from([0, 1]));
        }
        assert_eq!(pfl_perdevice(&obs(&[0.1]), &t)[0].scope, ParamScope::PerDeviceLocalPlusShared);
    }

    #[test]
    fn cluster_based_cases() {
        let t = PolicyThresholds::default();
        let g = grouping(vec![vec![0, 1], vec![2, 3]]);
        let c = cluster_based(&obs(&[0.2, 0.3, 0.9, 0.9]), &g, &t);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].devices.len(), 2);
        assert_eq!(c[0].kind, ConfigKind::BaselineCluster(0));
        assert!(cluster_based(&obs(&[0.9; 4]), &g, &t).is_empty());
        assert_eq!(cluster_based(&obs(&[0.1; 4]), &g, &t).len(), 2);
    }

    #[test]
    fn scope_families() {
        let o = obs(&[0.1, 0.2, 0.3, 0.2]);
        let g = grouping(vec![vec![0, 1], vec![2, 3]]);
        let t = PolicyThresholds::default();
        let fleet: BTreeSet<usize> = (0..4).collect();
        for c in generate(PolicyKind::Driftguard, &o, Some(&g), &t).unwrap() {
            assert_ne!(c.scope, ParamScope::FullModel);
            c.validate(&fleet, Some(&g)).unwrap();
        }
        for p in [PolicyKind::FclAvetrig, PolicyKind::FclPerdevice] {
            for c in generate(p, &o, None, &t).unwrap() {
                assert_eq!(c.scope, ParamScope::FullModel);
                c.validate(&fleet, None).unwrap();
            }
        }
        assert!(generate(PolicyKind::Driftguard, &o, None, &t).is_err());
    }

    #[test]
    fn threshold_extremes() {
        let o = obs(&[0.3, 0.6, 0.99, 0.45]);
        let g = grouping(vec![vec![0, 1], vec![2, 3]]);
        let lo = PolicyThresholds { tau_global: 1e-9, tau_group: 1e-9, tau_device: 1e-9 };
        let hi = PolicyThresholds { tau_global: 1.0 - 1e-9, tau_group: 1.0 - 1e-9, tau_device: 1.0 - 1e-9 };
        for p in PolicyKind::ALL {
            assert!(generate(p, &o, Some(&g), &lo).unwrap().is_empty());
            assert!(!generate(p, &o, Some(&g), &hi).unwrap().is_empty());
        }
    }

    #[test]
    fn policy_names_round_trip() {
        for p in PolicyKind::ALL {
            assert_eq!(p.name().parse::<PolicyKind>().unwrap(), p);
        }
        assert!(matches!("nope".parse::<PolicyKind>(), Err(Error::InvalidField { .. })));
    }
}
