//! Experiment configuration, the policy × seed matrix, and result files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::ClusterSettings;
use crate::error::{Error, Result};
use crate::learner::TrainSettings;
use crate::metrics::{above_reference_count, efficiency, format_cell, median, MetricsReport};
use crate::moe::{ModelBundle, MoeSpec};
use crate::policy::{PolicyKind, PolicyThresholds};
use crate::runtime::{RuntimeSettings, Simulation, StepRecord, INITIAL_BANK};
use crate::seed::SeedTree;
use crate::world::{
    load_external, DataSource, DriftSettings, InitialAssignment, SampleCounts, SyntheticWorld, TraceParams, WorldTrace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Synthetic,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub source: SourceKind,
    /// Pool file, only with `source = "external"`.
    pub external_path: Option<PathBuf>,
    pub initial: InitialAssignment,
    pub synthetic: SyntheticWorld,
    pub samples: SampleCounts,
    pub drift: DriftSettings,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            source: SourceKind::Synthetic,
            external_path: None,
            initial: InitialAssignment::Common,
            synthetic: SyntheticWorld::default(),
            samples: SampleCounts::default(),
            drift: DriftSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExecutionConfig {
    /// Worker threads per run for device training; 0 means all cores.
    pub threads: usize,
    /// Run the policy × seed matrix concurrently.
    pub parallel_runs: bool,
    pub gate_includes_branch: bool,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self { threads: 0, parallel_runs: true, gate_includes_branch: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Time steps T.
    pub steps: usize,
    /// Devices K.
    pub devices: usize,
    pub seeds: Vec<u64>,
    pub policies: Vec<String>,
    pub output_dir: Option<PathBuf>,
    pub world: WorldConfig,
    pub model: MoeSpec,
    pub train: TrainSettings,
    pub thresholds: PolicyThresholds,
    pub cluster: ClusterSettings,
    pub execution: ExecutionConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            steps: 20,
            devices: 10,
            seeds: vec![1],
            policies: PolicyKind::ALL.iter().map(|p| p.name().to_string()).collect(),
            output_dir: None,
            world: WorldConfig::default(),
            model: MoeSpec::default(),
            train: TrainSettings::default(),
            thresholds: PolicyThresholds::default(),
            cluster: ClusterSettings::default(),
            execution: ExecutionConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        // relative pool paths resolve against the config file
        if let (Some(p), Some(dir)) = (&cfg.world.external_path, path.parent()) {
            if p.is_relative() {
                cfg.world.external_path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn policy_kinds(&self) -> Result<Vec<PolicyKind>> {
        self.policies.iter().map(|p| p.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::field("steps", "need at least 2 steps"));
        }
        if self.devices == 0 {
            return Err(Error::field("devices", "need at least one device"));
        }
        if self.seeds.is_empty() {
            return Err(Error::field("seeds", "need at least one seed"));
        }
        if self.policies.is_empty() {
            return Err(Error::field("policies", "need at least one policy"));
        }
        let kinds = self.policy_kinds()?;
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(Error::field("policies", format!("{k} is listed twice")));
            }
        }
        match (self.world.source, &self.world.external_path) {
            (SourceKind::External, None) => {
                return Err(Error::field("world.external_path", "required with source = \"external\""));
            }
            (SourceKind::Synthetic, Some(_)) => {
                return Err(Error::field("world.external_path", "only valid with source = \"external\""));
            }
            _ => {}
        }
        if self.world.samples.train == 0 || self.world.samples.val == 0 {
            return Err(Error::field("world.samples", "train and val counts must be positive"));
        }
        self.world.synthetic.validate()?;
        self.world.drift.validate()?;
        self.model.validate()?;
        self.runtime_settings().validate()
    }

    pub fn runtime_settings(&self) -> RuntimeSettings {
        RuntimeSettings {
            train: self.train.clone(),
            thresholds: self.thresholds.clone(),
            cluster: self.cluster.clone(),
            gate_includes_branch: self.execution.gate_includes_branch,
            threads: self.execution.threads,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Training samples per device at a steady-state step.
    pub fn n_train(&self) -> usize {
        self.world.samples.train + self.world.samples.val
    }

    pub fn data_source(&self, seeds: &SeedTree) -> Result<DataSource> {
        let source = match self.world.source {
            SourceKind::Synthetic => DataSource::Synthetic(self.world.synthetic.build(
                self.model.n_features,
                self.model.n_classes,
                &mut seeds.rng("world.domains", &[]),
            )),
            SourceKind::External => {
                let path = self.world.external_path.as_ref().expect("validated");
                DataSource::External(load_external(path)?)
            }
        };
        if source.n_features() != self.model.n_features || source.n_classes() != self.model.n_classes {
            return Err(Error::field(
                "model.n_features",
                format!(
                    "data has {} features and {} classes; model expects {} and {}",
                    source.n_features(),
                    source.n_classes(),
                    self.model.n_features,
                    self.model.n_classes
                ),
            ));
        }
        Ok(source)
    }

    pub fn world_trace(&self, seed: u64) -> Result<WorldTrace> {
        let seeds = SeedTree::new(seed);
        let source = self.data_source(&seeds)?;
        Ok(WorldTrace::generate(
            &TraceParams {
                source: &source,
                steps: self.steps,
                devices: self.devices,
                counts: self.world.samples,
                drift: &self.world.drift,
                initial: self.world.initial,
            },
            &seeds,
        ))
    }

    pub fn initial_model(&self, seed: u64) -> Result<ModelBundle> {
        ModelBundle::init(&self.model, INITIAL_BANK, &mut SeedTree::new(seed).rng("init", &[]))
    }
}

/// Everything one policy × seed run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub experiment: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub trace_hash: String,
    pub metrics: MetricsReport,
}

pub struct RunOutput {
    pub report: RunReport,
    pub records: Vec<StepRecord>,
}

/// Runs one policy against a prepared trace.
pub fn run_policy(cfg: &ExperimentConfig, policy: PolicyKind, seed: u64, world: &WorldTrace, trace_hash: &str) -> Result<RunOutput> {
    let mut sim = Simulation::new(policy, world, cfg.initial_model(seed)?, cfg.runtime_settings())?;
    sim.run_to_end()?;
    let metrics = sim.report(seed, cfg.n_train())?;
    Ok(RunOutput {
        report: RunReport {
            experiment: cfg.name.clone(),
            config_hash: cfg.hash(),
            master_seed: seed,
            trace_hash: trace_hash.to_string(),
            metrics,
        },
        records: sim.records().to_vec(),
    })
}

/// Runs the whole matrix in memory. Output order is seed-major, then the
/// configured policy order.
pub fn run_matrix(cfg: &ExperimentConfig) -> Result<Vec<RunOutput>> {
    cfg.validate()?;
    let policies = cfg.policy_kinds()?;
    let traces = cfg
        .seeds
        .iter()
        .map(|&s| {
            let w = cfg.world_trace(s)?;
            let h = w.digest();
            Ok((s, w, h))
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, PolicyKind)> =
        (0..traces.len()).flat_map(|i| policies.iter().map(move |&p| (i, p))).collect();
    let run = |&(i, p): &(usize, PolicyKind)| {
        let (seed, world, hash) = &traces[i];
        log::info!("running {p} with seed {seed}");
        run_policy(cfg, p, *seed, world, hash)
    };
    let mut outputs: Vec<Result<RunOutput>> = if cfg.execution.parallel_runs {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };
    let mut out = Vec::with_capacity(outputs.len());
    for o in outputs.drain(..) {
        out.push(o?);
    }
    let mut by_seed: BTreeMap<u64, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for o in &out {
        let m = &o.report.metrics;
        by_seed.entry(m.seed).or_default().insert(m.method.clone(), m.per_step_acc.clone());
    }
    for o in &mut out {
        let m = &mut o.report.metrics;
        let (_, counts) = above_reference_count(&by_seed[&m.seed])?;
        m.above_reference_count = Some(counts[&m.method]);
    }
    Ok(out)
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip form, stable across platforms
    format!("{v:?}")
}

pub fn steps_csv(outputs: &[RunOutput]) -> String {
    let mut s = String::from("step,method,seed,mean_acc_pre,mean_acc_post,event_kinds,flops_step,flops_cum\n");
    for o in outputs {
        for r in &o.records {
            let kinds: Vec<&str> = r.configs.iter().map(|c| c.kind.as_str()).collect();
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.step,
                o.report.metrics.method,
                o.report.master_seed,
                fmt_f64(r.mean_acc_pre),
                fmt_f64(r.mean_acc_post),
                kinds.join(";"),
                fmt_f64(r.flops_step),
                fmt_f64(r.flops_cum)
            )
            .expect("writing to a string");
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub mean_acc: f64,
    pub total_cost: f64,
    pub efficiency: f64,
    pub median_efficiency: f64,
    pub above_reference: f64,
    pub runs: usize,
}

/// Per experiment, one row per method: seed-averaged Ā and TC with
/// E = Ā / TC, plus the median of per-seed E.
pub fn summarize(reports: &[RunReport]) -> BTreeMap<String, Vec<SummaryRow>> {
    let mut grouped: BTreeMap<&str, BTreeMap<&str, Vec<&MetricsReport>>> = BTreeMap::new();
    for r in reports {
        grouped.entry(&r.experiment).or_default().entry(&r.metrics.method).or_default().push(&r.metrics);
    }
    grouped
        .into_iter()
        .map(|(exp, methods)| {
            let mut rows: Vec<SummaryRow> = methods
                .into_iter()
                .map(|(method, ms)| {
                    let n = ms.len() as f64;
                    let mean_acc = ms.iter().map(|m| m.mean_acc).sum::<f64>() / n;
                    let total_cost = ms.iter().map(|m| m.total_cost).sum::<f64>() / n;
                    let es: Vec<f64> = ms.iter().map(|m| m.efficiency).collect();
                    let above = ms.iter().filter_map(|m| m.above_reference_count).map(|c| c as f64).sum::<f64>() / n;
                    SummaryRow {
                        method: method.to_string(),
                        mean_acc,
                        total_cost,
                        efficiency: efficiency(mean_acc, total_cost),
                        median_efficiency: median(&es).unwrap_or(f64::NAN),
                        above_reference: above,
                        runs: ms.len(),
                    }
                })
                .collect();
            let order = |m: &str| PolicyKind::ALL.iter().position(|p| p.name() == m).unwrap_or(usize::MAX);
            rows.sort_by_key(|r| order(&r.method));
            (exp.to_string(), rows)
        })
        .collect()
}

/// Text table: one block per experiment, `*` on the best E.
pub fn render_summary(reports: &[RunReport]) -> String {
    let mut s = String::new();
    for (exp, rows) in summarize(reports) {
        let best = rows.iter().map(|r| r.efficiency).fold(f64::NEG_INFINITY, f64::max);
        writeln!(s, "{exp}").unwrap();
        writeln!(s, "{:<16} {:<24} {:>10} {:>12} {:>5}", "method", "E (A / TC)", "median E", "above ref", "runs").unwrap();
        for r in rows {
            let mark = if r.efficiency == best { "*" } else { "" };
            let cell = format!("{}{mark}", format_cell(r.efficiency, r.mean_acc, r.total_cost));
            writeln!(
                s,
                "{:<16} {:<24} {:>10.2} {:>12.1} {:>5}",
                r.method, cell, r.median_efficiency, r.above_reference, r.runs
            )
            .unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Incomplete,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub policies: Vec<String>,
    pub status: RunStatus,
    pub files: Vec<String>,
}

fn write_file(dir: &Path, name: &str, contents: &[u8], files: &mut Vec<String>) -> Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(&path)?.write_all(contents)?;
    files.push(name.to_string());
    Ok(())
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(m)?)?;
    Ok(())
}

/// Runs the matrix and writes every result file into `dir`. The manifest is
/// written first as incomplete and flipped to complete at the end.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        experiment: cfg.name.clone(),
        config_hash: cfg.hash(),
        seeds: cfg.seeds.clone(),
        policies: cfg.policies.clone(),
        status: RunStatus::Incomplete,
        files: Vec::new(),
    };
    write_manifest(dir, &manifest)?;
    let toml_text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    write_file(dir, "config.toml", toml_text.as_bytes(), &mut manifest.files)?;

    let outputs = run_matrix(cfg)?;
    for o in &outputs {
        let stem = format!("{}_seed{}", o.report.metrics.method, o.report.master_seed);
        write_file(dir, &format!("runs/{stem}.json"), &serde_json::to_vec_pretty(&o.report)?, &mut manifest.files)?;
        let mut lines = Vec::new();
        for r in &o.records {
            serde_json::to_writer(&mut lines, r)?;
            lines.push(b'\n');
        }
        write_file(dir, &format!("traces/{stem}.jsonl"), &lines, &mut manifest.files)?;
    }
    write_file(dir, "steps.csv", steps_csv(&outputs).as_bytes(), &mut manifest.files)?;
    let reports: Vec<RunReport> = outputs.into_iter().map(|o| o.report).collect();
    let header = format!(
        "# config {}\n# TC = raw FLOPs / (devices x steps x rounds x full-model kappa at max_epochs)\n",
        cfg.hash()
    );
    write_file(dir, "summary.txt", format!("{header}{}", render_summary(&reports)).as_bytes(), &mut manifest.files)?;
    write_file(dir, "summary.json", &serde_json::to_vec_pretty(&summarize(&reports))?, &mut manifest.files)?;

    manifest.status = RunStatus::Complete;
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Drift trace of one seed as JSON lines: a header then one line per step
/// with events and mixtures (samples omitted).
pub fn trace_jsonl(cfg: &ExperimentConfig, seed: u64) -> Result<String> {
    let w = cfg.world_trace(seed)?;
    let mut s = serde_json::to_string(&serde_json::json!({
        "seed": seed,
        "devices": w.n_devices,
        "domains": w.n_domains,
        "initial_domains": w.initial_domains,
        "trace_hash": w.digest(),
    }))?;
    s.push('\n');
    for snap in &w.steps {
        s.push_str(&serde_json::to_string(&serde_json::json!({
            "step": snap.step,
            "events": snap.events,
            "mixtures": snap.mixtures,
        }))?);
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::from_toml("").unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("stepz = 3").is_err());
        assert!(ExperimentConfig::from_toml("[model]\nwidth = 3").is_err());
    }

    #[test]
    fn field_level_errors() {
        let e = ExperimentConfig::from_toml("policies = [\"driftguard\", \"magic\"]").unwrap_err();
        assert!(matches!(&e, Error::InvalidField { field, .. } if field == "policies"), "{e}");
        let e = ExperimentConfig::from_toml("[thresholds]\ntau_global = 1.5").unwrap_err();
        assert!(matches!(&e, Error::InvalidField { field, .. } if field == "thresholds.tau_global"), "{e}");
        let e = ExperimentConfig::from_toml("[world]\nsource = \"external\"").unwrap_err();
        assert!(matches!(&e, Error::InvalidField { field, .. } if field == "world.external_path"), "{e}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.steps += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
