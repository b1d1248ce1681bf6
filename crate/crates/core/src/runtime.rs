//! Federated execution: masked local training on per-device copies, FedAvg,
//! and the per-step loop that ties inference, clustering, policy and
//! retraining together.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_devices, BankNamer, BankStore, ClusterSettings, Grouping, Groups};
use crate::error::{Error, Result};
use crate::fleet::{accuracy, local_inference, Observation};
use crate::learner::{train_local, ParamId, ParamStore, Sample, TensorBuf, TrainSettings};
use crate::metrics::{kappa, step_accuracy, CostLedger, CostProfile, MetricsReport, RoundKappas};
use crate::moe::{partition_of, BankKey, ModelBundle, Partition, ParamScope, RoutedModel};
use crate::policy::{generate, ConfigKind, PolicyKind, PolicyThresholds, RetrainConfig};
use crate::world::WorldTrace;

/// Bank every run starts from.
pub const INITIAL_BANK: &str = "b0";

/// Sample-weighted mean of each parameter. Contributions are summed in a
/// canonical order so the result does not depend on the order of `updates`.
pub fn fedavg_aggregate(updates: &[(ParamStore, usize)]) -> Result<ParamStore> {
    let Some((first, _)) = updates.first() else {
        return Err(Error::Protocol("fedavg needs at least one update".into()));
    };
    for (p, _) in updates {
        if p.len() != first.len() || !p.keys().eq(first.keys()) {
            return Err(Error::Protocol("fedavg updates carry different parameter sets".into()));
        }
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Protocol("fedavg over zero samples".into()));
    }
    let weights: Vec<f64> = updates.iter().map(|(_, n)| *n as f64 / total as f64).collect();
    let mut out = ParamStore::new();
    let mut terms = Vec::with_capacity(updates.len());
    for (id, t0) in first {
        let mut data = vec![0.0; t0.len()];
        for (i, v) in data.iter_mut().enumerate() {
            terms.clear();
            for ((p, _), w) in updates.iter().zip(&weights) {
                let t = &p[id];
                if t.shape() != t0.shape() {
                    return Err(Error::Protocol(format!("shape mismatch for {id}")));
                }
                terms.push(w * t.data()[i]);
            }
            terms.sort_by(f64::total_cmp);
            *v = terms.iter().sum();
        }
        out.insert(id.clone(), TensorBuf::new(t0.shape().to_vec(), data)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeSettings {
    pub train: TrainSettings,
    pub thresholds: PolicyThresholds,
    pub cluster: ClusterSettings,
    /// Append the two branch weights to the per-layer selections when
    /// building gating matrices.
    pub gate_includes_branch: bool,
    /// Worker threads for per-device training; 0 lets rayon decide.
    pub threads: usize,
}

impl Default for RuntimeSettings {
    fn default() -> Self {
        Self {
            train: TrainSettings::default(),
            thresholds: PolicyThresholds::default(),
            cluster: ClusterSettings::default(),
            gate_includes_branch: true,
            threads: 0,
        }
    }
}

impl RuntimeSettings {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.thresholds.validate()?;
        self.cluster.validate()
    }
}

/// What one device sends back after a round.
#[derive(Debug, Clone)]
pub struct DeviceUpdate {
    pub device: usize,
    pub params: ParamStore,
    pub n_samples: usize,
    pub epochs_run: usize,
}

/// One participant's job for a round.
pub struct Participant<'a> {
    pub device: usize,
    pub bank: BankKey,
    pub train: &'a [Sample],
    pub val: &'a [Sample],
}

fn train_participants(
    bundle: &ModelBundle,
    participants: &[Participant<'_>],
    scope: &ParamScope,
    settings: &TrainSettings,
    pool: &rayon::ThreadPool,
) -> Result<Vec<DeviceUpdate>> {
    pool.install(|| {
        participants
            .par_iter()
            .map(|p| {
                let mask = bundle.training_mask(scope, &p.bank)?;
                let mut model = RoutedModel::new(bundle.clone(), p.bank.clone())?;
                let outcome = train_local(&mut model, p.train, p.val, settings, &mask)?;
                let params = mask
                    .iter()
                    .map(|id| (id.clone(), model.bundle.params()[id].clone()))
                    .collect();
                Ok(DeviceUpdate {
                    device: p.device,
                    params,
                    n_samples: p.train.len(),
                    epochs_run: outcome.epochs_run,
                })
            })
            .collect::<Result<Vec<_>>>()
    })
}

/// Which trained tensors are kept per device instead of averaged.
fn is_individual(scope: &ParamScope, id: &ParamId) -> bool {
    matches!(scope, ParamScope::PerDeviceLocalPlusShared)
        && matches!(partition_of(id), Some(Partition::LocalBank(_)))
}

/// Outcome of one executed configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainOutcome {
    /// Epochs per device, one map per round.
    pub epochs: Vec<BTreeMap<usize, usize>>,
    pub kappas: Vec<RoundKappas>,
}

/// R rounds of masked local training and aggregation, written back into
/// `bundle`. Tensors outside the scope are never touched.
pub fn run_retraining(
    bundle: &mut ModelBundle,
    participants: &[Participant<'_>],
    scope: &ParamScope,
    settings: &TrainSettings,
    profile: &CostProfile,
    pool: &rayon::ThreadPool,
) -> Result<RetrainOutcome> {
    if participants.is_empty() {
        return Err(Error::Protocol("retraining needs at least one participant".into()));
    }
    let mut outcome = RetrainOutcome { epochs: Vec::new(), kappas: Vec::new() };
    for _round in 0..settings.rounds {
        let updates = train_participants(bundle, participants, scope, settings, pool)?;

        let mut shared_updates = Vec::with_capacity(updates.len());
        for u in &updates {
            let (own, shared): (ParamStore, ParamStore) =
                u.params.iter().map(|(k, v)| (k.clone(), v.clone())).partition(|(id, _)| is_individual(scope, id));
            bundle.params_mut().extend(own);
            shared_updates.push((shared, u.n_samples));
        }
        if shared_updates.iter().any(|(p, _)| !p.is_empty()) {
            bundle.params_mut().extend(fedavg_aggregate(&shared_updates)?);
        }

        let mut epochs = BTreeMap::new();
        let mut kappas = RoundKappas::new();
        for u in &updates {
            epochs.insert(u.device, u.epochs_run);
            kappas.insert(u.device, kappa(profile, scope, u.n_samples, u.epochs_run)?);
        }
        outcome.epochs.push(epochs);
        outcome.kappas.push(kappas);
    }
    Ok(outcome)
}

/// Full-model replicas kept by the cluster-based baseline, one per group.
#[derive(Debug, Clone, Default)]
pub struct Replicas(pub BTreeMap<BankKey, ModelBundle>);

impl BankStore for Replicas {
    fn has_bank(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    fn clone_bank(&mut self, src: &str, dst: &str) -> Result<()> {
        if self.0.contains_key(dst) {
            return Err(Error::Conflict(format!("replica {dst:?} already exists")));
        }
        let copy = self.0.get(src).ok_or_else(|| Error::Lookup(format!("unknown replica {src:?}")))?.clone();
        self.0.insert(dst.to_string(), copy);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutedConfig {
    pub kind: String,
    pub scope: String,
    pub devices: Vec<usize>,
    pub epochs: Vec<BTreeMap<usize, usize>>,
    pub flops: f64,
}

/// One line of the run trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub drift_events: usize,
    pub acc_pre: Vec<f64>,
    pub acc_post: Vec<f64>,
    pub mean_acc_pre: f64,
    pub mean_acc_post: f64,
    pub groups: Option<Groups>,
    pub routes: Vec<BankKey>,
    pub configs: Vec<ExecutedConfig>,
    pub flops_step: f64,
    pub flops_cum: f64,
}

/// Snapshot handed to an event hook around every executed configuration.
pub struct EventView<'a> {
    pub step: usize,
    pub config: &'a RetrainConfig,
    pub before: &'a ModelBundle,
    pub after: &'a ModelBundle,
}

/// Raw FLOPs of retraining the full model on every device at every step for
/// every round at the epoch cap.
pub fn cost_normalizer(
    profile: &CostProfile,
    devices: usize,
    steps: usize,
    n_train: usize,
    settings: &TrainSettings,
) -> Result<f64> {
    let per = kappa(profile, &ParamScope::FullModel, n_train, settings.max_epochs)?;
    Ok(devices as f64 * steps as f64 * settings.rounds as f64 * per)
}

pub struct Simulation<'w> {
    policy: PolicyKind,
    world: &'w WorldTrace,
    settings: RuntimeSettings,
    profile: CostProfile,
    bundle: ModelBundle,
    replicas: Replicas,
    grouping: Option<Grouping>,
    namer: BankNamer,
    ledger: CostLedger,
    records: Vec<StepRecord>,
    pool: rayon::ThreadPool,
}

fn pfl_bank(device: usize) -> BankKey {
    format!("dev{device}")
}

impl<'w> Simulation<'w> {
    /// `initial` must hold exactly the bank [`INITIAL_BANK`].
    pub fn new(policy: PolicyKind, world: &'w WorldTrace, initial: ModelBundle, settings: RuntimeSettings) -> Result<Self> {
        settings.validate()?;
        if !initial.has_bank(INITIAL_BANK) || initial.banks().len() != 1 {
            return Err(Error::Config(format!("initial model must hold exactly bank {INITIAL_BANK:?}")));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(settings.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            policy,
            world,
            profile: CostProfile::for_model(initial.spec()),
            bundle: initial,
            settings,
            replicas: Replicas::default(),
            grouping: None,
            namer: BankNamer::default(),
            ledger: CostLedger::default(),
            records: Vec::new(),
            pool,
        })
    }

    pub fn policy(&self) -> PolicyKind {
        self.policy
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn replicas(&self) -> &Replicas {
        &self.replicas
    }

    pub fn grouping(&self) -> Option<&Grouping> {
        self.grouping.as_ref()
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn profile(&self) -> &CostProfile {
        &self.profile
    }

    pub fn next_step(&self) -> usize {
        self.records.len() + 1
    }

    pub fn finished(&self) -> bool {
        self.records.len() >= self.world.steps.len()
    }

    fn devices(&self) -> impl Iterator<Item = usize> {
        0..self.world.n_devices
    }

    /// Model and bank a device currently predicts with.
    fn route(&self, device: usize) -> Result<(&ModelBundle, BankKey)> {
        let grouped = || {
            self.grouping
                .as_ref()
                .and_then(|g| g.bank_of(device))
                .cloned()
                .ok_or_else(|| Error::Protocol(format!("device {device} has no group")))
        };
        Ok(match (self.policy, &self.grouping) {
            (_, None) if self.policy.clusters() => (&self.bundle, INITIAL_BANK.to_string()),
            (PolicyKind::Driftguard, _) => (&self.bundle, grouped()?),
            (PolicyKind::ClusterBased, _) => {
                let key = grouped()?;
                let replica = self.replicas.0.get(&key).ok_or_else(|| Error::Lookup(format!("no replica {key:?}")))?;
                (replica, INITIAL_BANK.to_string())
            }
            (p, _) if p.is_pfl() => {
                let bank = pfl_bank(device);
                if self.bundle.has_bank(&bank) {
                    (&self.bundle, bank)
                } else {
                    (&self.bundle, INITIAL_BANK.to_string())
                }
            }
            _ => (&self.bundle, INITIAL_BANK.to_string()),
        })
    }

    fn routes(&self) -> Result<Vec<BankKey>> {
        self.devices().map(|c| Ok(self.route(c)?.1)).collect()
    }

    fn observe(&self, step: usize) -> Result<Vec<Observation>> {
        let include = self.settings.gate_includes_branch;
        self.devices()
            .map(|c| {
                let (model, bank) = self.route(c)?;
                local_inference(c, model, &bank, self.world.val_set(step, c), include)
            })
            .collect()
    }

    fn accuracies(&self, step: usize) -> Result<Vec<f64>> {
        self.devices()
            .map(|c| {
                let (model, bank) = self.route(c)?;
                accuracy(model, &bank, self.world.val_set(step, c))
            })
            .collect()
    }

    fn regroup(&mut self, observations: &[Observation]) -> Result<()> {
        let prev = self.grouping.take();
        let settings = self.settings.cluster.clone();
        let grouping = match self.policy {
            PolicyKind::ClusterBased => {
                if prev.is_none() {
                    self.replicas.0.insert(INITIAL_BANK.to_string(), self.bundle.clone());
                }
                let g = cluster_devices(observations, &settings, prev.as_ref(), INITIAL_BANK, &mut self.replicas, &mut self.namer)?;
                let live: BTreeSet<&BankKey> = g.banks.iter().collect();
                self.replicas.0.retain(|k, _| live.contains(k));
                g
            }
            _ => {
                let g = cluster_devices(observations, &settings, prev.as_ref(), INITIAL_BANK, &mut self.bundle, &mut self.namer)?;
                let stale: Vec<BankKey> = self.bundle.banks().iter().filter(|k| !g.banks.contains(k)).cloned().collect();
                for k in stale {
                    self.bundle.remove_bank(&k)?;
                }
                g
            }
        };
        self.grouping = Some(grouping);
        Ok(())
    }

    fn execute(
        &mut self,
        step: usize,
        config: &RetrainConfig,
        hook: &mut dyn FnMut(EventView<'_>),
    ) -> Result<ExecutedConfig> {
        let world = self.world;
        let trains: Vec<(usize, Vec<Sample>)> = config.devices.iter().map(|&c| (c, world.train_set(step, c))).collect();
        let participants: Vec<Participant<'_>> = trains
            .iter()
            .map(|(c, train)| {
                let bank = match &config.kind {
                    ConfigKind::Group(_) => match &config.scope {
                        ParamScope::LocalBankPlusBranchGate(k) => k.clone(),
                        _ => unreachable!("group configs carry a local scope"),
                    },
                    ConfigKind::BaselineCluster(_) => INITIAL_BANK.to_string(),
                    _ => self.route(*c)?.1,
                };
                Ok(Participant { device: *c, bank, train, val: world.val_set(step, *c) })
            })
            .collect::<Result<_>>()?;

        let target = match config.kind {
            ConfigKind::BaselineCluster(j) => {
                let key = self.grouping.as_ref().and_then(|g| g.banks.get(j)).cloned();
                let key = key.ok_or_else(|| Error::Protocol(format!("no group {j}")))?;
                self.replicas.0.get_mut(&key).ok_or_else(|| Error::Lookup(format!("no replica {key:?}")))?
            }
            _ => &mut self.bundle,
        };
        let before = target.clone();
        let outcome =
            run_retraining(target, &participants, &config.scope, &self.settings.train, &self.profile, &self.pool)?;
        hook(EventView { step, config, before: &before, after: target });
        let flops = self.ledger.record(step, config, outcome.kappas)?;
        Ok(ExecutedConfig {
            kind: config.kind.label(),
            scope: config.scope.label(),
            devices: config.devices.iter().copied().collect(),
            epochs: outcome.epochs,
            flops,
        })
    }

    fn bootstrap(&mut self, hook: &mut dyn FnMut(EventView<'_>)) -> Result<ExecutedConfig> {
        let config = RetrainConfig {
            trig: true,
            devices: self.devices().collect(),
            scope: ParamScope::FullModel,
            kind: ConfigKind::BaselineFull,
        };
        let mut done = self.execute(1, &config, hook)?;
        done.kind = "bootstrap".into();
        if let Some(e) = self.ledger.events.last_mut() {
            e.kind = "bootstrap".into();
        }
        if self.policy.is_pfl() {
            for c in 0..self.world.n_devices {
                self.bundle.clone_bank(INITIAL_BANK, &pfl_bank(c))?;
            }
            self.bundle.remove_bank(INITIAL_BANK)?;
        }
        Ok(done)
    }

    pub fn step(&mut self) -> Result<&StepRecord> {
        self.step_with(&mut |_| {})
    }

    /// Advances one step. `hook` sees every executed configuration.
    pub fn step_with(&mut self, hook: &mut dyn FnMut(EventView<'_>)) -> Result<&StepRecord> {
        if self.finished() {
            return Err(Error::Protocol("the world has no more steps".into()));
        }
        let step = self.next_step();
        let cum_before = self.ledger.cumulative;
        let observations = self.observe(step)?;
        let acc_pre: Vec<f64> = observations.iter().map(|o| o.avg_local_acc).collect();
        let mut configs = Vec::new();

        if step == 1 {
            configs.push(self.bootstrap(hook)?);
            if self.policy.clusters() {
                let post = self.observe(step)?;
                self.regroup(&post)?;
            }
        } else {
            if self.policy.clusters() {
                self.regroup(&observations)?;
            }
            let generated = generate(self.policy, &observations, self.grouping.as_ref(), &self.settings.thresholds)?;
            let fleet: BTreeSet<usize> = self.devices().collect();
            for config in &generated {
                config.validate(&fleet, self.grouping.as_ref())?;
                configs.push(self.execute(step, config, hook)?);
            }
        }

        let acc_post = self.accuracies(step)?;
        let record = StepRecord {
            step,
            drift_events: self.world.snapshot(step).events.len(),
            mean_acc_pre: step_accuracy(&acc_pre)?,
            mean_acc_post: step_accuracy(&acc_post)?,
            acc_pre,
            acc_post,
            groups: self.grouping.as_ref().map(|g| g.groups.clone()),
            routes: self.routes()?,
            configs,
            flops_step: self.ledger.cumulative - cum_before,
            flops_cum: self.ledger.cumulative,
        };
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.finished() {
            self.step()?;
        }
        Ok(())
    }

    pub fn report(&self, seed: u64, n_train: usize) -> Result<MetricsReport> {
        let normalizer =
            cost_normalizer(&self.profile, self.world.n_devices, self.world.steps.len(), n_train, &self.settings.train)?;
        MetricsReport::build(
            self.policy.name(),
            seed,
            self.records.iter().map(|r| r.mean_acc_post).collect(),
            self.records.iter().map(|r| r.mean_acc_pre).collect(),
            &self.ledger,
            normalizer,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::MoeSpec;
    use crate::seed::SeedTree;

    fn store(v: &[f64]) -> ParamStore {
        [(ParamId::weight("w"), TensorBuf::vector(v.to_vec()))].into()
    }

    fn w(p: &ParamStore) -> Vec<f64> {
        p[&ParamId::weight("w")].data().to_vec()
    }

    #[test]
    fn fedavg_examples() {
        assert_eq!(w(&fedavg_aggregate(&[(store(&[1.0]), 5), (store(&[3.0]), 5)]).unwrap()), [2.0]);
        assert_eq!(w(&fedavg_aggregate(&[(store(&[1.0]), 10), (store(&[3.0]), 30)]).unwrap()), [2.5]);
        assert_eq!(w(&fedavg_aggregate(&[(store(&[0.1, -7.0]), 30)]).unwrap()), [0.1, -7.0]);
    }

    #[test]
    fn fedavg_errors() {
        assert!(fedavg_aggregate(&[]).is_err());
        let other: ParamStore = [(ParamId::bias("w"), TensorBuf::vector(vec![1.0]))].into();
        assert!(matches!(fedavg_aggregate(&[(store(&[1.0]), 1), (other, 1)]), Err(Error::Protocol(_))));
    }

    #[test]
    fn fedavg_permutation_invariant() {
        let ups: Vec<(ParamStore, usize)> = (0..6)
            .map(|i| (store(&[0.1 * i as f64, 1.0 / (i + 1) as f64, 1e10 * (i % 2) as f64]), 3 + i))
            .collect();
        let a = fedavg_aggregate(&ups).unwrap();
        let mut rev = ups.clone();
        rev.reverse();
        rev.swap(1, 4);
        assert_eq!(a, fedavg_aggregate(&rev).unwrap());
    }

    fn pool() -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap()
    }

    fn data(seed: u64, n: usize) -> Vec<Sample> {
        use rand::Rng;
        let mut rng = SeedTree::new(seed).rng("d", &[]);
        (0..n)
            .map(|_| {
                let label = rng.random_range(0..4);
                let mut features: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                features[label] += 2.0;
                Sample { features, label, domain: 0 }
            })
            .collect()
    }

    fn settings() -> TrainSettings {
        TrainSettings { max_epochs: 3, patience: 2, rounds: 1, learning_rate: 0.05, ..TrainSettings::default() }
    }

    #[test]
    fn single_participant_equals_train_local() {
        let spec = MoeSpec::default();
        let b = ModelBundle::init(&spec, "b0", &mut SeedTree::new(1).rng("init", &[])).unwrap();
        let (train, val) = (data(2, 30), data(3, 10));
        let scope = ParamScope::SharedPlusBranchGate;
        let profile = CostProfile::for_model(&spec);

        let mut fed = b.clone();
        let p = [Participant { device: 0, bank: "b0".into(), train: &train, val: &val }];
        run_retraining(&mut fed, &p, &scope, &settings(), &profile, &pool()).unwrap();

        let mut solo = RoutedModel::new(b, "b0").unwrap();
        let mask = solo.bundle.training_mask(&scope, "b0").unwrap();
        train_local(&mut solo, &train, &val, &settings(), &mask).unwrap();
        assert_eq!(fed, solo.bundle);
    }

    #[test]
    fn identical_devices_match_solo() {
        let spec = MoeSpec::default();
        let b = ModelBundle::init(&spec, "b0", &mut SeedTree::new(1).rng("init", &[])).unwrap();
        let (train, val) = (data(4, 30), data(5, 10));
        let profile = CostProfile::for_model(&spec);
        let scope = ParamScope::FullModel;

        let mut one = b.clone();
        let p1 = [Participant { device: 0, bank: "b0".into(), train: &train, val: &val }];
        run_retraining(&mut one, &p1, &scope, &settings(), &profile, &pool()).unwrap();

        let mut two = b;
        let p2 = [
            Participant { device: 0, bank: "b0".into(), train: &train, val: &val },
            Participant { device: 1, bank: "b0".into(), train: &train, val: &val },
        ];
        let out = run_retraining(&mut two, &p2, &scope, &settings(), &profile, &pool()).unwrap();
        // w/2 + w/2 can differ from w in the last bit
        for (id, t) in one.params() {
            for (a, b) in t.data().iter().zip(two.params()[id].data()) {
                assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0), "{id}");
            }
        }
        assert_eq!(out.kappas[0].len(), 2);
    }

    #[test]
    fn group_scope_leaves_shared_untouched() {
        let spec = MoeSpec::default();
        let mut b = ModelBundle::init(&spec, "b0", &mut SeedTree::new(1).rng("init", &[])).unwrap();
        b.clone_bank("b0", "g1").unwrap();
        let before = b.clone();
        let (train, val) = (data(6, 30), data(7, 10));
        let p = [
            Participant { device: 0, bank: "g1".into(), train: &train, val: &val },
            Participant { device: 3, bank: "g1".into(), train: &val, val: &train },
        ];
        let scope = ParamScope::LocalBankPlusBranchGate("g1".into());
        run_retraining(&mut b, &p, &scope, &settings(), &CostProfile::for_model(&spec), &pool()).unwrap();
        for (id, t) in before.params() {
            let moved = b.params()[id] != *t;
            let allowed = matches!(partition_of(id), Some(Partition::BranchGate))
                || partition_of(id) == Some(Partition::LocalBank("g1".into()));
            assert!(allowed || !moved, "{id} moved");
        }
        assert_ne!(before, b);
    }

    #[test]
    fn pfl_keeps_local_banks_individual() {
        let spec = MoeSpec::default();
        let mut b = ModelBundle::init(&spec, "b0", &mut SeedTree::new(1).rng("init", &[])).unwrap();
        b.clone_bank("b0", "dev0").unwrap();
        b.clone_bank("b0", "dev1").unwrap();
        let (t0, v0, t1, v1) = (data(8, 30), data(9, 10), data(10, 30), data(11, 10));
        let p = [
            Participant { device: 0, bank: "dev0".into(), train: &t0, val: &v0 },
            Participant { device: 1, bank: "dev1".into(), train: &t1, val: &v1 },
        ];
        let before = b.clone();
        run_retraining(&mut b, &p, &ParamScope::PerDeviceLocalPlusShared, &settings(), &CostProfile::for_model(&spec), &pool())
            .unwrap();
        let head = |k: &str| b.params()[&ParamId::weight(format!("local/{k}/head"))].clone();
        assert_ne!(head("dev0"), head("dev1"));
        assert_eq!(b.params()[&ParamId::weight("local/b0/head")], before.params()[&ParamId::weight("local/b0/head")]);
    }
}
