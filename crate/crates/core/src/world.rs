//! Per-device data streams under asynchronous drift.
//!
//! Each step: pick a band-limited number of devices for new drift events,
//! apply every pending event in trigger order to each device's domain
//! mixture, then draw that step's train and validation samples from the
//! updated mixture.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::learner::Sample;
use crate::seed::{SeedTree, SimRng};

pub type Mixture = BTreeMap<usize, f64>;

/// Class-conditional Gaussians pushed through a per-domain rotation and shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub class_means: Vec<Vec<f64>>,
    pub noise_scale: f64,
    /// Row-major `n × n` orthogonal matrix.
    pub rotation: Vec<f64>,
    pub shift: Vec<f64>,
}

impl DomainSpec {
    pub fn n_features(&self) -> usize {
        self.shift.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn draw<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        let n = self.n_features();
        let z: Vec<f64> = self.class_means[class]
            .iter()
            .map(|m| m + self.noise_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (0..n)
            .map(|i| {
                let row = &self.rotation[i * n..(i + 1) * n];
                row.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + self.shift[i]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticWorld {
    pub n_domains: usize,
    /// Scale of the shared class means.
    pub class_separation: f64,
    pub noise: f64,
    /// Scale of each domain's offset.
    pub domain_shift: f64,
}

impl Default for SyntheticWorld {
    fn default() -> Self {
        Self {
            n_domains: 3,
            class_separation: 0.5,
            noise: 0.33,
            domain_shift: 0.67,
        }
    }
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
fn random_rotation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    rows.concat()
}

impl SyntheticWorld {
    pub fn validate(&self) -> Result<()> {
        if self.n_domains == 0 {
            return Err(Error::field("world.synthetic.n_domains", "must be at least 1"));
        }
        for (name, v) in [
            ("world.synthetic.class_separation", self.class_separation),
            ("world.synthetic.noise", self.noise),
            ("world.synthetic.domain_shift", self.domain_shift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::field(name, "must be a non-negative finite number"));
            }
        }
        Ok(())
    }

    pub fn build(&self, n_features: usize, n_classes: usize, rng: &mut SimRng) -> Vec<DomainSpec> {
        let class_means: Vec<Vec<f64>> = (0..n_classes)
            .map(|_| {
                (0..n_features)
                    .map(|_| self.class_separation * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        (0..self.n_domains)
            .map(|d| DomainSpec {
                domain_id: d,
                class_means: class_means.clone(),
                noise_scale: self.noise,
                rotation: random_rotation(n_features, rng),
                shift: (0..n_features)
                    .map(|_| self.domain_shift * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            })
            .collect()
    }
}

/// Labeled samples loaded from a file, one pool per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalPools {
    pub n_features: usize,
    pub n_classes: usize,
    pub pools: Vec<Vec<Sample>>,
}

/// Parses the labeled-vector format:
///
/// ```text
/// #features=3 domains=2 classes=2
/// 0,1,0.5,-1.2,3.0
/// ```
pub fn parse_external(text: &str) -> Result<ExternalPools> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or(Error::Load { line: 1, message: "empty file".into() })?;
    let header = header.trim();
    let body = header.strip_prefix('#').ok_or_else(|| Error::Load {
        line: hline + 1,
        message: "expected header `#features=n domains=m classes=c`".into(),
    })?;
    let mut dims: BTreeMap<&str, usize> = BTreeMap::new();
    for part in body.split_whitespace() {
        let (k, v) = part.split_once('=').ok_or_else(|| Error::Load {
            line: hline + 1,
            message: format!("malformed header entry {part:?}"),
        })?;
        let v = v.parse::<usize>().map_err(|_| Error::Load {
            line: hline + 1,
            message: format!("header value for {k} is not a count"),
        })?;
        dims.insert(k, v);
    }
    let get = |k: &str| {
        dims.get(k).copied().filter(|&v| v > 0).ok_or_else(|| Error::Load {
            line: hline + 1,
            message: format!("header lacks positive `{k}`"),
        })
    };
    let (n_features, n_domains, n_classes) = (get("features")?, get("domains")?, get("classes")?);

    let mut pools = vec![Vec::new(); n_domains];
    for (idx, raw) in lines {
        let line = idx + 1;
        let fields: Vec<&str> = raw.trim().split(',').map(str::trim).collect();
        if fields.len() != n_features + 2 {
            return Err(Error::Load {
                line,
                message: format!("expected {} fields, found {}", n_features + 2, fields.len()),
            });
        }
        let domain: usize = fields[0].parse().map_err(|_| Error::Load {
            line,
            message: format!("domain id {:?} is not an index", fields[0]),
        })?;
        if domain >= n_domains {
            return Err(Error::Load { line, message: format!("unknown domain id {domain}") });
        }
        let label: usize = fields[1].parse().map_err(|_| Error::Load {
            line,
            message: format!("class id {:?} is not an index", fields[1]),
        })?;
        if label >= n_classes {
            return Err(Error::Load { line, message: format!("unknown class id {label}") });
        }
        let features = fields[2..]
            .iter()
            .map(|f| {
                f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Load {
                    line,
                    message: format!("non-numeric feature {f:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        pools[domain].push(Sample { features, label, domain });
    }
    if let Some(d) = pools.iter().position(Vec::is_empty) {
        return Err(Error::Load { line: hline + 1, message: format!("domain {d} has no samples") });
    }
    Ok(ExternalPools { n_features, n_classes, pools })
}

pub fn load_external(path: &Path) -> Result<ExternalPools> {
    let text = fs::read_to_string(path)?;
    parse_external(&text)
}

/// Where samples for a domain come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(Vec<DomainSpec>),
    External(ExternalPools),
}

impl DataSource {
    pub fn n_domains(&self) -> usize {
        match self {
            DataSource::Synthetic(d) => d.len(),
            DataSource::External(p) => p.pools.len(),
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            DataSource::Synthetic(d) => d[0].n_features(),
            DataSource::External(p) => p.n_features,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            DataSource::Synthetic(d) => d[0].n_classes(),
            DataSource::External(p) => p.n_classes,
        }
    }
}

/// Per-device without-replacement cursor over the external pools.
#[derive(Debug, Clone)]
pub struct PoolCursor {
    order: Vec<Vec<usize>>,
    next: Vec<usize>,
    epoch: Vec<u64>,
    device: usize,
}

impl PoolCursor {
    pub fn new(pools: &ExternalPools, device: usize) -> Self {
        let n = pools.pools.len();
        Self {
            order: vec![Vec::new(); n],
            next: vec![0; n],
            epoch: vec![0; n],
            device,
        }
    }

    fn take(&mut self, pools: &ExternalPools, domain: usize, seeds: &SeedTree) -> Sample {
        let pool = &pools.pools[domain];
        if self.next[domain] >= self.order[domain].len() {
            let mut order: Vec<usize> = (0..pool.len()).collect();
            let mut rng = seeds.rng("pool", &[self.device as u64, domain as u64, self.epoch[domain]]);
            order.shuffle(&mut rng);
            self.order[domain] = order;
            self.next[domain] = 0;
            self.epoch[domain] += 1;
        }
        let s = pool[self.order[domain][self.next[domain]]].clone();
        self.next[domain] += 1;
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftPattern {
    Instantaneous,
    Incremental { length: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub device: usize,
    pub start_step: usize,
    pub pattern: DriftPattern,
    pub target_domain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ActiveEvent {
    event: DriftEvent,
    base: Option<Mixture>,
    progress: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDistribution {
    mixture: Mixture,
    pending: VecDeque<ActiveEvent>,
}

impl DeviceDistribution {
    pub fn pure(domain: usize) -> Self {
        Self {
            mixture: [(domain, 1.0)].into(),
            pending: VecDeque::new(),
        }
    }

    pub fn mixture(&self) -> &Mixture {
        &self.mixture
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Highest-weight domain, lowest id on ties.
    pub fn dominant_domain(&self) -> usize {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (&d, &w) in &self.mixture {
            if w > best.1 {
                best = (d, w);
            }
        }
        best.0
    }

    pub fn push(&mut self, event: DriftEvent) -> Result<()> {
        if let Some(last) = self.pending.back() {
            if last.event.start_step > event.start_step {
                return Err(Error::Protocol("drift events must be queued in trigger order".into()));
            }
        }
        if let DriftPattern::Incremental { length: 0 } = event.pattern {
            return Err(Error::Config("incremental drift length must be at least 1".into()));
        }
        self.pending.push_back(ActiveEvent { event, base: None, progress: 0 });
        Ok(())
    }

    /// Applies every pending event that has started by `step`, in trigger
    /// order. An event starting at `step` supersedes older ones: they apply
    /// their progress for this step, then the newer event composes on top
    /// and the older ones are retired.
    pub fn update(&mut self, step: usize) {
        let newest_start = self
            .pending
            .iter()
            .filter(|a| a.event.start_step <= step)
            .map(|a| a.event.start_step)
            .max();
        let Some(newest_start) = newest_start else {
            return;
        };
        let mut keep = VecDeque::new();
        while let Some(mut active) = self.pending.pop_front() {
            if active.event.start_step > step {
                keep.push_back(active);
                continue;
            }
            let target = active.event.target_domain;
            let done = match active.event.pattern {
                DriftPattern::Instantaneous => {
                    self.mixture = [(target, 1.0)].into();
                    true
                }
                DriftPattern::Incremental { length } => {
                    let base = active.base.get_or_insert_with(|| self.mixture.clone()).clone();
                    active.progress += 1;
                    let f = active.progress as f64 / length as f64;
                    let mut next: Mixture = Mixture::new();
                    for (&d, &w) in &base {
                        let v = (1.0 - f) * w;
                        if v > 0.0 {
                            next.insert(d, v);
                        }
                    }
                    *next.entry(target).or_insert(0.0) += f;
                    self.mixture = next;
                    active.progress >= length
                }
            };
            let superseded = active.event.start_step < newest_start;
            if !done && !superseded {
                keep.push_back(active);
            }
        }
        self.pending = keep;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftSettings {
    pub rate_min: f64,
    pub rate_max: f64,
    pub incremental_min_len: usize,
    pub incremental_max_len: usize,
    pub instantaneous_prob: f64,
}

impl Default for DriftSettings {
    fn default() -> Self {
        Self {
            rate_min: 0.10,
            rate_max: 0.15,
            incremental_min_len: 2,
            incremental_max_len: 4,
            instantaneous_prob: 0.5,
        }
    }
}

impl DriftSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate_min) || !(0.0..=1.0).contains(&self.rate_max) {
            return Err(Error::field("world.drift.rate_min", "rates must lie in [0, 1]"));
        }
        if self.rate_min > self.rate_max {
            return Err(Error::field("world.drift.rate_min", "must not exceed rate_max"));
        }
        if self.incremental_min_len == 0 || self.incremental_min_len > self.incremental_max_len {
            return Err(Error::field(
                "world.drift.incremental_min_len",
                "need 1 <= incremental_min_len <= incremental_max_len",
            ));
        }
        if !(0.0..=1.0).contains(&self.instantaneous_prob) {
            return Err(Error::field("world.drift.instantaneous_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Admissible number of drifting devices for a fleet of `k`.
    pub fn drift_count_range(&self, k: usize) -> (usize, usize) {
        if self.rate_max == 0.0 || k == 0 {
            return (0, 0);
        }
        let lo = (self.rate_min * k as f64 - 1e-9).ceil().max(0.0) as usize;
        let hi = (self.rate_max * k as f64 + 1e-9).floor() as usize;
        let lo = lo.min(k);
        let hi = hi.max(lo).max(1).min(k);
        (lo, hi)
    }

    /// Longest incremental drift for a horizon of `steps`: the configured
    /// cap, limited to 15% of the horizon (rounded up).
    pub fn max_incremental_len(&self, steps: usize) -> usize {
        let horizon_cap = (0.15 * steps as f64 - 1e-9).ceil().max(1.0) as usize;
        self.incremental_max_len.min(horizon_cap).max(self.incremental_min_len)
    }
}

/// Draws this step's new drift events. `current` holds every device's
/// distribution before the step's update.
pub fn schedule_events(
    step: usize,
    current: &[DeviceDistribution],
    n_domains: usize,
    steps: usize,
    settings: &DriftSettings,
    rng: &mut SimRng,
) -> Vec<DriftEvent> {
    let k = current.len();
    if step < 2 || n_domains < 2 {
        return Vec::new();
    }
    let (lo, hi) = settings.drift_count_range(k);
    if hi == 0 {
        return Vec::new();
    }
    let n_drift = rng.random_range(lo..=hi);
    let mut devices: Vec<usize> = rand::seq::index::sample(rng, k, n_drift).into_vec();
    devices.sort_unstable();
    let max_len = settings.max_incremental_len(steps);
    devices
        .into_iter()
        .map(|device| {
            let pattern = if rng.random_bool(settings.instantaneous_prob) {
                DriftPattern::Instantaneous
            } else {
                DriftPattern::Incremental {
                    length: rng.random_range(settings.incremental_min_len..=max_len),
                }
            };
            let dominant = current[device].dominant_domain();
            let targets: Vec<usize> = (0..n_domains).filter(|&d| d != dominant).collect();
            let target_domain = *targets.choose(rng).expect("at least two domains");
            DriftEvent { device, start_step: step, pattern, target_domain }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleCounts {
    pub train: usize,
    pub val: usize,
}

impl Default for SampleCounts {
    fn default() -> Self {
        Self { train: 20, val: 10 }
    }
}

fn pick_domain<R: Rng + ?Sized>(mixture: &Mixture, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (&d, &w) in mixture {
        acc += w;
        last = d;
        if u < acc {
            return d;
        }
    }
    last
}

/// Draws one step of data: domain ∝ mixture, class uniform (synthetic) or
/// next pool entry (external), then features.
pub fn sample_step(
    mixture: &Mixture,
    source: &DataSource,
    counts: SampleCounts,
    rng: &mut SimRng,
    cursor: Option<&mut PoolCursor>,
    seeds: &SeedTree,
) -> StepData {
    let mut cursor = cursor;
    let mut draw = |rng: &mut SimRng| {
        let domain = pick_domain(mixture, rng);
        match source {
            DataSource::Synthetic(domains) => {
                let spec = &domains[domain];
                let label = rng.random_range(0..spec.n_classes());
                Sample { features: spec.draw(label, rng), label, domain }
            }
            DataSource::External(pools) => cursor
                .as_deref_mut()
                .expect("external sources need a pool cursor")
                .take(pools, domain, seeds),
        }
    };
    let train = (0..counts.train).map(|_| draw(rng)).collect();
    let val = (0..counts.val).map(|_| draw(rng)).collect();
    StepData { train, val }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialAssignment {
    RoundRobin,
    Random,
    /// Every device starts in domain 0.
    Common,
}

/// Everything a run needs from the world: one snapshot per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSnapshot {
    pub step: usize,
    pub events: Vec<DriftEvent>,
    pub mixtures: Vec<Mixture>,
    pub data: Vec<StepData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldTrace {
    pub n_devices: usize,
    pub n_domains: usize,
    pub initial_domains: Vec<usize>,
    pub steps: Vec<StepSnapshot>,
}

pub struct TraceParams<'a> {
    pub source: &'a DataSource,
    pub steps: usize,
    pub devices: usize,
    pub counts: SampleCounts,
    pub drift: &'a DriftSettings,
    pub initial: InitialAssignment,
}

impl WorldTrace {
    /// Evolves the world for `steps` steps. Pure in (params, seeds).
    pub fn generate(p: &TraceParams<'_>, seeds: &SeedTree) -> Self {
        let n_domains = p.source.n_domains();
        let mut init_rng = seeds.rng("world.initial", &[]);
        let initial_domains: Vec<usize> = (0..p.devices)
            .map(|c| match p.initial {
                InitialAssignment::RoundRobin => c % n_domains,
                InitialAssignment::Random => init_rng.random_range(0..n_domains),
                InitialAssignment::Common => 0,
            })
            .collect();
        let mut dists: Vec<DeviceDistribution> =
            initial_domains.iter().map(|&d| DeviceDistribution::pure(d)).collect();
        let mut cursors: Vec<Option<PoolCursor>> = (0..p.devices)
            .map(|c| match p.source {
                DataSource::External(pools) => Some(PoolCursor::new(pools, c)),
                DataSource::Synthetic(_) => None,
            })
            .collect();
        let mut sched_rng = seeds.rng("world.schedule", &[]);
        let mut out = Vec::with_capacity(p.steps);
        for step in 1..=p.steps {
            let events = schedule_events(step, &dists, n_domains, p.steps, p.drift, &mut sched_rng);
            for ev in &events {
                dists[ev.device].push(ev.clone()).expect("events are generated in order");
            }
            for d in dists.iter_mut() {
                d.update(step);
            }
            let data = dists
                .iter()
                .zip(cursors.iter_mut())
                .enumerate()
                .map(|(c, (dist, cursor))| {
                    let mut rng = seeds.rng("world.sample", &[c as u64, step as u64]);
                    sample_step(dist.mixture(), p.source, p.counts, &mut rng, cursor.as_mut(), seeds)
                })
                .collect();
            out.push(StepSnapshot {
                step,
                events,
                mixtures: dists.iter().map(|d| d.mixture().clone()).collect(),
                data,
            });
        }
        Self {
            n_devices: p.devices,
            n_domains,
            initial_domains,
            steps: out,
        }
    }

    pub fn snapshot(&self, step: usize) -> &StepSnapshot {
        &self.steps[step - 1]
    }

    /// Training data of `device` at `step`: the step's train split plus the
    /// previous step's validation split (absent at step 1).
    pub fn train_set(&self, step: usize, device: usize) -> Vec<Sample> {
        let mut train = self.snapshot(step).data[device].train.clone();
        if step > 1 {
            train.extend(self.snapshot(step - 1).data[device].val.iter().cloned());
        }
        train
    }

    pub fn val_set(&self, step: usize, device: usize) -> &[Sample] {
        &self.snapshot(step).data[device].val
    }

    /// SHA-256 over the canonical JSON encoding, hex encoded.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("trace serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dists(k: usize) -> Vec<DeviceDistribution> {
        (0..k).map(|c| DeviceDistribution::pure(c % 3)).collect()
    }

    #[test]
    fn drift_count_band_for_twenty_devices() {
        let s = DriftSettings::default();
        assert_eq!(s.drift_count_range(20), (2, 3));
        assert_eq!(s.drift_count_range(10), (1, 1));
        assert_eq!(s.drift_count_range(5), (1, 1));
        let zero = DriftSettings { rate_min: 0.0, rate_max: 0.0, ..Default::default() };
        assert_eq!(zero.drift_count_range(20), (0, 0));
    }

    #[test]
    fn schedule_counts_and_uniform_selection() {
        let s = DriftSettings::default();
        let d = dists(20);
        let mut rng = SeedTree::new(1).rng("sched", &[]);
        let mut seen = [0usize; 4];
        let mut per_device = [0usize; 20];
        let trials = 10_000;
        for _ in 0..trials {
            let ev = schedule_events(2, &d, 3, 30, &s, &mut rng);
            seen[ev.len()] += 1;
            for e in &ev {
                per_device[e.device] += 1;
                assert_ne!(e.target_domain, d[e.device].dominant_domain());
                if let DriftPattern::Incremental { length } = e.pattern {
                    assert!((2..=4).contains(&length));
                }
            }
            let mut devs: Vec<_> = ev.iter().map(|e| e.device).collect();
            devs.dedup();
            assert_eq!(devs.len(), ev.len());
        }
        assert_eq!(seen[0] + seen[1], 0);
        assert!(seen[2] > 0 && seen[3] > 0);
        for n in per_device {
            let freq = n as f64 / trials as f64;
            assert!((freq - 0.125).abs() < 0.01, "freq {freq}");
        }
    }

    #[test]
    fn zero_rate_and_first_step_schedule_nothing() {
        let zero = DriftSettings { rate_min: 0.0, rate_max: 0.0, ..Default::default() };
        let mut rng = SeedTree::new(2).rng("sched", &[]);
        for step in 2..200 {
            assert!(schedule_events(step, &dists(20), 3, 30, &zero, &mut rng).is_empty());
        }
        assert!(schedule_events(1, &dists(20), 3, 30, &DriftSettings::default(), &mut rng).is_empty());
    }

    #[test]
    fn incremental_schedule_is_linear() {
        let mut d = DeviceDistribution::pure(0);
        d.push(DriftEvent {
            device: 0,
            start_step: 3,
            pattern: DriftPattern::Incremental { length: 4 },
            target_domain: 2,
        })
        .unwrap();
        d.update(2);
        assert_eq!(d.mixture(), &Mixture::from([(0, 1.0)]));
        let mut weights = Vec::new();
        for step in 3..=7 {
            d.update(step);
            weights.push(d.mixture().get(&2).copied().unwrap_or(0.0));
            assert!((d.mixture().values().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(weights, vec![0.25, 0.5, 0.75, 1.0, 1.0]);
        assert_eq!(d.mixture(), &Mixture::from([(2, 1.0)]));
        assert_eq!(d.pending_len(), 0);
    }

    #[test]
    fn instantaneous_is_pure_target() {
        let mut d = DeviceDistribution::pure(1);
        d.push(DriftEvent { device: 0, start_step: 2, pattern: DriftPattern::Instantaneous, target_domain: 0 })
            .unwrap();
        d.update(2);
        assert_eq!(d.mixture(), &Mixture::from([(0, 1.0)]));
    }

    #[test]
    fn instantaneous_overrides_ongoing_incremental() {
        let mut d = DeviceDistribution::pure(0);
        d.push(DriftEvent { device: 0, start_step: 2, pattern: DriftPattern::Incremental { length: 4 }, target_domain: 1 })
            .unwrap();
        d.update(2);
        d.update(3);
        assert_eq!(d.mixture(), &Mixture::from([(0, 0.5), (1, 0.5)]));
        d.push(DriftEvent { device: 0, start_step: 4, pattern: DriftPattern::Instantaneous, target_domain: 2 })
            .unwrap();
        for step in 4..8 {
            d.update(step);
            assert_eq!(d.mixture(), &Mixture::from([(2, 1.0)]));
        }
    }

    #[test]
    fn later_incremental_rebases_on_current_mixture() {
        let mut d = DeviceDistribution::pure(0);
        d.push(DriftEvent { device: 0, start_step: 2, pattern: DriftPattern::Incremental { length: 2 }, target_domain: 1 })
            .unwrap();
        d.update(2);
        d.push(DriftEvent { device: 0, start_step: 3, pattern: DriftPattern::Incremental { length: 2 }, target_domain: 2 })
            .unwrap();
        d.update(3);
        // older event completes ({1: 1}), newer one starts from that base
        assert_eq!(d.mixture(), &Mixture::from([(1, 0.5), (2, 0.5)]));
        d.update(4);
        assert_eq!(d.mixture(), &Mixture::from([(2, 1.0)]));
    }

    #[test]
    fn out_of_order_push_is_rejected() {
        let mut d = DeviceDistribution::pure(0);
        d.push(DriftEvent { device: 0, start_step: 5, pattern: DriftPattern::Instantaneous, target_domain: 1 })
            .unwrap();
        let err = d.push(DriftEvent { device: 0, start_step: 4, pattern: DriftPattern::Instantaneous, target_domain: 1 });
        assert!(err.is_err());
    }

    fn synthetic(seed: u64) -> DataSource {
        let mut rng = SeedTree::new(seed).rng("domains", &[]);
        DataSource::Synthetic(SyntheticWorld::default().build(16, 4, &mut rng))
    }

    #[test]
    fn sampling_follows_mixture() {
        let src = synthetic(3);
        let seeds = SeedTree::new(3);
        let mut rng = seeds.rng("s", &[]);
        let pure = sample_step(&Mixture::from([(0, 1.0)]), &src, SampleCounts::default(), &mut rng, None, &seeds);
        assert_eq!(pure.train.len() + pure.val.len(), 30);
        assert!(pure.train.iter().chain(&pure.val).all(|s| s.domain == 0));

        let half = sample_step(
            &Mixture::from([(0, 0.5), (1, 0.5)]),
            &src,
            SampleCounts { train: 10_000, val: 0 },
            &mut rng,
            None,
            &seeds,
        );
        let frac = half.train.iter().filter(|s| s.domain == 0).count() as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");

        let a = sample_step(&Mixture::from([(1, 1.0)]), &src, SampleCounts::default(), &mut seeds.rng("t", &[]), None, &seeds);
        let b = sample_step(&Mixture::from([(1, 1.0)]), &src, SampleCounts::default(), &mut seeds.rng("t", &[]), None, &seeds);
        assert_eq!(a, b);
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = SeedTree::new(4).rng("r", &[]);
        let n = 6;
        let r = random_rotation(n, &mut rng);
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| r[i * n + k] * r[j * n + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9);
            }
        }
    }

    fn external_text(domains: usize, classes: usize, rows: usize) -> String {
        let mut s = format!("#features=2 domains={domains} classes={classes}\n");
        for d in 0..domains {
            for c in 0..classes {
                for r in 0..rows {
                    s.push_str(&format!("{d},{c},{}.5,{}\n", r, c as f64 - 0.25));
                }
            }
        }
        s
    }

    #[test]
    fn external_loader_counts() {
        let pools = parse_external(&external_text(2, 2, 10)).unwrap();
        assert_eq!(pools.pools.len(), 2);
        assert!(pools.pools.iter().all(|p| p.len() == 20));
        assert_eq!((pools.n_features, pools.n_classes), (2, 2));
    }

    #[test]
    fn external_loader_errors_name_line() {
        let mut text = external_text(1, 1, 2);
        text.push_str("0,0,abc,1.0\n");
        match parse_external(&text) {
            Err(Error::Load { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("abc"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut text = external_text(1, 1, 1);
        text.push_str("5,0,1.0,1.0\n");
        assert!(matches!(parse_external(&text), Err(Error::Load { line: 3, .. })));
        assert!(matches!(parse_external(""), Err(Error::Load { .. })));
    }

    #[test]
    fn external_pool_draws_without_replacement() {
        let pools = parse_external(&external_text(1, 2, 5)).unwrap();
        let seeds = SeedTree::new(5);
        let src = DataSource::External(pools.clone());
        let mut cursor = PoolCursor::new(&pools, 0);
        let mut rng = seeds.rng("s", &[]);
        let data = sample_step(
            &Mixture::from([(0, 1.0)]),
            &src,
            SampleCounts { train: 10, val: 0 },
            &mut rng,
            Some(&mut cursor),
            &seeds,
        );
        let mut seen: Vec<String> = data.train.iter().map(|s| format!("{:?}", s)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn trace_is_pure_function_of_seed() {
        let src = synthetic(6);
        let drift = DriftSettings::default();
        let p = TraceParams {
            source: &src,
            steps: 10,
            devices: 20,
            counts: SampleCounts::default(),
            drift: &drift,
            initial: InitialAssignment::RoundRobin,
        };
        let a = WorldTrace::generate(&p, &SeedTree::new(9));
        let b = WorldTrace::generate(&p, &SeedTree::new(9));
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), WorldTrace::generate(&p, &SeedTree::new(10)).digest());
        assert!(a.steps[0].events.is_empty());
        for s in &a.steps[1..] {
            assert!((2..=3).contains(&s.events.len()));
        }
        assert_eq!(a.train_set(1, 0).len(), 20);
        assert_eq!(a.train_set(2, 0).len(), 30);
    }
}
