// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stage execution over the experiment grid.
//!
//! Every artifact has a `<file>.stamp.json` sidecar holding the hash of the
//! inputs that produced it. Stage hashes chain (train → harvest → sae →
//! probe/sweep), so changing a downstream setting never invalidates
//! upstream artifacts. A requested stage whose stamp matches is skipped; an
//! upstream artifact that is missing or stamped by a different spec is a
//! hard error naming the command that produces it.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ffnprobe_core::data::{DatasetRegistry, Partition, RegistryEntry, SeriesDataset};
use ffnprobe_core::forecaster::{Forecaster, ForecasterConfig};
use ffnprobe_core::nn::{Precision, Scalar};
use ffnprobe_core::probes::{
    base_eval, causal_intervention, dead_latent_rate, degradation_pct, latent_stats, substitution_eval, top_k,
    zero_ablation, SweepCell,
};
use ffnprobe_core::report::{self, CellKey, Manifest, ProbeReport, ScaleResult, ZeroAblationResult};
use ffnprobe_core::sae::{
    fidelity_metrics, harvest, harvest_partition, train_sae, ActivationStore, SaeConfig, SaeParams, ACTIVITY_THRESHOLD,
};
use ffnprobe_core::trainer::{evaluate, train_forecaster, Metrics, TrainConfig, TrainLog};
use serde::{Deserialize, Serialize};

use crate::spec::{hash_of, ExperimentSpec, Stage};

/// Bumped whenever artifact semantics change.
const PIPELINE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: Stage,
    pub hash: String,
    pub seed: u64,
}

fn stamp_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().expect("artifact paths name a file").to_os_string();
    name.push(".stamp.json");
    artifact.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Freshness {
    Fresh,
    Missing,
    Stale(String),
}

pub fn freshness(artifact: &Path, hash: &str) -> Freshness {
    let Ok(text) = std::fs::read_to_string(stamp_path(artifact)) else {
        return Freshness::Missing;
    };
    if !artifact.exists() {
        return Freshness::Missing;
    }
    match serde_json::from_str::<Stamp>(&text) {
        Ok(s) if s.hash == hash => Freshness::Fresh,
        Ok(s) => Freshness::Stale(s.hash),
        Err(_) => Freshness::Stale("<unreadable stamp>".into()),
    }
}

fn write_stamp(artifact: &Path, stage: Stage, hash: &str, seed: u64) -> Result<()> {
    let stamp = Stamp {
        stage,
        hash: hash.to_string(),
        seed,
    };
    write_json(&stamp_path(artifact), &stamp)
}

/// Writes JSON via a temporary file and rename.
pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

/// Artifact locations of one cell.
#[derive(Debug, Clone)]
pub struct CellPaths {
    pub dir: PathBuf,
}

impl CellPaths {
    pub fn new(out: &Path, key: &CellKey) -> Self {
        Self {
            dir: out
                .join("cells")
                .join(&key.dataset)
                .join(format!("h{}", key.horizon))
                .join(format!("seed{}", key.seed)),
        }
    }
    pub fn model(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
    pub fn train_summary(&self) -> PathBuf {
        self.dir.join("train.json")
    }
    pub fn train_log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
    pub fn store(&self) -> PathBuf {
        self.dir.join("activations.bin")
    }
    pub fn sae(&self, scale: f64, lambda: f64) -> PathBuf {
        self.dir.join("sae").join(format!("scale{}_lambda{}.ckpt", fmt_f(scale), fmt_f(lambda)))
    }
    pub fn probe(&self) -> PathBuf {
        self.dir.join("probe.json")
    }
    pub fn sweep(&self) -> PathBuf {
        self.dir.join("sweep.json")
    }
}

/// Chained input hashes of every stage of one cell.
#[derive(Debug, Clone)]
pub struct CellHashes {
    pub train: String,
    pub harvest: String,
    pub probe: String,
    pub sweep: String,
    spec: ExperimentSpec,
}

impl CellHashes {
    pub fn new(spec: &ExperimentSpec, key: &CellKey, entry: &RegistryEntry) -> Self {
        let train = hash_of(&(
            "train",
            PIPELINE_VERSION,
            key,
            entry,
            spec.precision,
            &spec.train,
        ));
        let harvest = hash_of(&("harvest", &train, spec.harvest_cap));
        let mut h = Self {
            train,
            harvest,
            probe: String::new(),
            sweep: String::new(),
            spec: spec.clone(),
        };
        let main: Vec<String> = spec.scales.iter().map(|&s| h.sae(s, spec.lambda)).collect();
        h.probe = hash_of(&(
            "probe",
            &h.train,
            &main,
            spec.harvest_cap,
            spec.top_k,
            spec.factor,
            spec.amplification,
        ));
        let mut sweep = Vec::new();
        for &s in &spec.sweep_scales {
            for &l in &spec.sweep_lambdas {
                sweep.push(h.sae(s, l));
            }
        }
        h.sweep = hash_of(&("sweep", &h.train, &sweep, spec.harvest_cap));
        h
    }

    pub fn sae(&self, scale: f64, lambda: f64) -> String {
        hash_of(&("sae", &self.harvest, scale, lambda, &self.spec.sae, self.spec.precision))
    }
}

/// What happened to one stage of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: ForecasterConfig,
    pub log: TrainLog,
    pub test: Metrics,
    pub parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub hash: String,
    pub train_hash: String,
    pub cells: Vec<SweepCell>,
}

fn cell_label(key: &CellKey) -> String {
    format!("{} H{} seed {}", key.dataset, key.horizon, key.seed)
}

fn cell_flags(key: &CellKey) -> String {
    format!("--dataset {} --horizon {} --seed {}", key.dataset, key.horizon, key.seed)
}

struct Cell<'a, T: Scalar> {
    spec: &'a ExperimentSpec,
    key: CellKey,
    entry: RegistryEntry,
    registry: DatasetRegistry,
    paths: CellPaths,
    hashes: CellHashes,
    dataset: Option<SeriesDataset>,
    model: Option<Forecaster<T>>,
    store: Option<ActivationStore>,
    test_store: Option<ActivationStore>,
    log: Vec<(Stage, Outcome)>,
}

impl<'a, T: Scalar> Cell<'a, T> {
    fn new(spec: &'a ExperimentSpec, key: CellKey) -> Result<Self> {
        let registry = spec.registry()?;
        let entry = registry.get(&key.dataset)?.clone();
        let hashes = CellHashes::new(spec, &key, &entry);
        Ok(Self {
            spec,
            paths: CellPaths::new(&spec.out, &key),
            key,
            entry,
            registry,
            hashes,
            dataset: None,
            model: None,
            store: None,
            test_store: None,
            log: Vec::new(),
        })
    }

    fn say(&self, msg: &str) {
        eprintln!("[{}] {msg}", cell_label(&self.key));
    }

    /// Checks that an upstream artifact exists and matches this spec.
    fn require(&self, producer: Stage, artifact: &Path, hash: &str) -> Result<()> {
        match freshness(artifact, hash) {
            Freshness::Fresh => Ok(()),
            Freshness::Missing => bail!(
                "{}: {} is missing; run `ffnprobe {producer} {}` first",
                cell_label(&self.key),
                artifact.display(),
                cell_flags(&self.key)
            ),
            Freshness::Stale(found) => bail!(
                "{}: {} was produced by a different spec (stamp {}, expected {}); rerun `ffnprobe {producer} {}`",
                cell_label(&self.key),
                artifact.display(),
                &found[..found.len().min(12)],
                &hash[..12],
                cell_flags(&self.key)
            ),
        }
    }

    fn dataset(&mut self) -> Result<&SeriesDataset> {
        if self.dataset.is_none() {
            let ds = self.registry.open(&self.key.dataset, &self.spec.data_dir())?;
            self.dataset = Some(ds);
        }
        Ok(self.dataset.as_ref().expect("just loaded"))
    }

    fn forecaster_config(&mut self) -> Result<ForecasterConfig> {
        let channels = self.dataset()?.channels();
        Ok(ForecasterConfig::new(self.entry.d_model, self.key.horizon, channels))
    }

    fn model(&mut self) -> Result<&Forecaster<T>> {
        if self.model.is_none() {
            self.require(Stage::Train, &self.paths.model(), &self.hashes.train)?;
            self.model = Some(Forecaster::load(&self.paths.model())?);
        }
        Ok(self.model.as_ref().expect("just loaded"))
    }

    fn store(&mut self) -> Result<&ActivationStore> {
        if self.store.is_none() {
            self.require(Stage::Harvest, &self.paths.store(), &self.hashes.harvest)?;
            self.store = Some(ActivationStore::load(&self.paths.store())?);
        }
        Ok(self.store.as_ref().expect("just loaded"))
    }

    /// Test-partition activations used for fidelity metrics; not persisted.
    fn test_store(&mut self) -> Result<&ActivationStore> {
        if self.test_store.is_none() {
            self.model()?;
            self.dataset()?;
            let s = harvest_partition(
                self.model.as_ref().expect("loaded"),
                self.dataset.as_ref().expect("loaded"),
                Partition::Test,
                self.spec.harvest_cap,
                self.key.seed,
            )?;
            self.test_store = Some(s);
        }
        Ok(self.test_store.as_ref().expect("just built"))
    }

    fn train(&mut self) -> Result<()> {
        let path = self.paths.model();
        if freshness(&path, &self.hashes.train) == Freshness::Fresh {
            self.log.push((Stage::Train, Outcome::Skipped));
            return Ok(());
        }
        let fc = self.forecaster_config()?;
        let cfg = TrainConfig {
            max_epochs: self.spec.train.max_epochs,
            patience: self.spec.train.patience,
            seed: self.key.seed,
            precision: self.spec.precision,
            verbose: self.spec.verbose,
            ..TrainConfig::default()
        };
        self.say(&format!("train: {} parameters, up to {} epochs", fc.param_count(), cfg.max_epochs));
        let t0 = Instant::now();
        let ds = self.dataset()?;
        let (model, log) = train_forecaster::<T>(ds, &fc, &cfg)?;
        let test = evaluate(&model, ds, Partition::Test, cfg.batch_size)?;
        std::fs::create_dir_all(&self.paths.dir)?;
        model.save(&path)?;
        log.write_csv(&self.paths.train_log())?;
        write_json(
            &self.paths.train_summary(),
            &TrainSummary {
                parameters: fc.param_count(),
                config: fc,
                log: log.clone(),
                test,
            },
        )?;
        write_stamp(&path, Stage::Train, &self.hashes.train, self.key.seed)?;
        self.say(&format!(
            "train: {} epochs (best {}) in {:.0}s, test MSE {:.4} MAE {:.4}",
            log.epochs.len(),
            log.best_epoch,
            t0.elapsed().as_secs_f64(),
            test.mse,
            test.mae
        ));
        self.model = Some(model);
        self.log.push((Stage::Train, Outcome::Ran));
        Ok(())
    }

    fn harvest(&mut self) -> Result<()> {
        let path = self.paths.store();
        if freshness(&path, &self.hashes.harvest) == Freshness::Fresh {
            self.log.push((Stage::Harvest, Outcome::Skipped));
            return Ok(());
        }
        self.model()?;
        self.dataset()?;
        let t0 = Instant::now();
        let store = harvest(
            self.model.as_ref().expect("loaded"),
            self.dataset.as_ref().expect("loaded"),
            self.spec.harvest_cap,
            self.key.seed,
        )?;
        store.save(&path)?;
        write_stamp(&path, Stage::Harvest, &self.hashes.harvest, self.key.seed)?;
        self.say(&format!(
            "harvest: kept {} of {} rows in {:.0}s",
            store.rows(),
            store.meta.rows_seen,
            t0.elapsed().as_secs_f64()
        ));
        self.store = Some(store);
        self.log.push((Stage::Harvest, Outcome::Ran));
        Ok(())
    }

    /// Trains the SAE for `(scale, λ)` unless a matching checkpoint exists.
    fn ensure_sae(&mut self, scale: f64, lambda: f64, stage: Stage) -> Result<Outcome> {
        let path = self.paths.sae(scale, lambda);
        let hash = self.hashes.sae(scale, lambda);
        if freshness(&path, &hash) == Freshness::Fresh {
            return Ok(Outcome::Skipped);
        }
        let d_ff = self.forecaster_config()?.d_ff;
        let b = &self.spec.sae;
        let cfg = SaeConfig {
            max_epochs: b.max_epochs,
            patience: b.patience,
            batch_size: b.batch_size,
            max_steps: b.max_steps,
            ..SaeConfig::new(d_ff, scale, lambda, self.key.seed)
        };
        let t0 = Instant::now();
        let (sae, log) = train_sae::<T>(self.store()?, &cfg)?;
        sae.save(&path, &cfg, serde_json::to_value(&log)?)?;
        write_stamp(&path, stage, &hash, self.key.seed)?;
        self.say(&format!(
            "sae {scale}x λ={lambda}: {} epochs, {} steps, loss {:.5} in {:.0}s",
            log.epochs.len(),
            log.steps,
            log.best_loss,
            t0.elapsed().as_secs_f64()
        ));
        Ok(Outcome::Ran)
    }

    fn load_sae(&self, scale: f64, lambda: f64, producer: Stage) -> Result<SaeParams<T>> {
        let path = self.paths.sae(scale, lambda);
        self.require(producer, &path, &self.hashes.sae(scale, lambda))?;
        Ok(SaeParams::load(&path)?.0)
    }

    fn saes(&mut self) -> Result<()> {
        let mut outcome = Outcome::Skipped;
        for scale in self.spec.scales.clone() {
            if self.ensure_sae(scale, self.spec.lambda, Stage::Sae)? == Outcome::Ran {
                outcome = Outcome::Ran;
            }
        }
        self.log.push((Stage::Sae, outcome));
        Ok(())
    }

    fn probe(&mut self) -> Result<()> {
        let path = self.paths.probe();
        if freshness(&path, &self.hashes.probe) == Freshness::Fresh {
            self.log.push((Stage::Probe, Outcome::Skipped));
            return Ok(());
        }
        let saes: Vec<(f64, SaeParams<T>)> = self
            .spec
            .scales
            .iter()
            .map(|&s| self.load_sae(s, self.spec.lambda, Stage::Sae).map(|p| (s, p)))
            .collect::<Result<_>>()?;
        let t0 = Instant::now();
        self.test_store()?;
        let model = self.model.as_ref().expect("loaded by test_store");
        let ds = self.dataset.as_ref().expect("loaded by test_store");
        let test_store = self.test_store.as_ref().expect("built");

        let base = base_eval(model, ds)?;
        let mut scales = Vec::new();
        let mut largest: Option<(f64, usize, Vec<f64>)> = None;
        for (scale, sae) in &saes {
            let sub = substitution_eval(model, sae, ds)?;
            let fid = fidelity_metrics(sae, test_store, ACTIVITY_THRESHOLD)?;
            let stats = latent_stats(model, sae, ds)?;
            scales.push(ScaleResult {
                scale: *scale,
                d_hidden: sae.d_hidden(),
                lambda: self.spec.lambda,
                probe_mse: sub.mse,
                probe_mae: sub.mae,
                degradation_pct: degradation_pct(base.mse, sub.mse),
                l0: fid.l0,
                recon_mse: fid.recon_mse,
                dead_latent_pct: dead_latent_rate(&stats.max, ACTIVITY_THRESHOLD),
                per_window_mse: sub.per_window,
            });
            if largest.as_ref().is_none_or(|l| *scale > l.0) {
                largest = Some((*scale, scales.len() - 1, stats.sum));
            }
        }
        let dead_latent_rate_4x = scales.iter().find(|s| s.scale == 4.0).map(|s| s.dead_latent_pct);
        let (top_latents, causal) = match &largest {
            Some((_, idx, sums)) => {
                let k = self.spec.top_k.min(sums.len());
                let top = top_k(sums, k)?;
                let sae = &saes[*idx].1;
                let c = causal_intervention(model, sae, ds, &top, self.spec.factor, self.spec.amplification)?;
                (top, Some(c))
            }
            None => (Vec::new(), None),
        };
        let ablated = zero_ablation(model, ds)?;
        let report = ProbeReport {
            dataset: self.key.dataset.clone(),
            horizon: self.key.horizon,
            seed: self.key.seed,
            spec_hash: self.hashes.probe.clone(),
            base_mse: base.mse,
            base_mae: base.mae,
            base_per_window_mse: base.per_window,
            scales,
            dead_latent_rate_4x,
            top_latents,
            causal,
            zero_ablation: Some(ZeroAblationResult {
                ablated_mse: ablated.mse,
                degradation_pct: degradation_pct(base.mse, ablated.mse),
                per_window_mse: ablated.per_window,
            }),
            lambda_sweep: Vec::new(),
        };
        write_json(&path, &report)?;
        write_stamp(&path, Stage::Probe, &self.hashes.probe, self.key.seed)?;
        self.say(&format!(
            "probe: base MSE {:.4}, {} in {:.0}s",
            report.base_mse,
            report
                .scales
                .iter()
                .map(|s| format!("{}x {}", s.scale, report::format_pct(s.degradation_pct)))
                .collect::<Vec<_>>()
                .join(", "),
            t0.elapsed().as_secs_f64()
        ));
        self.log.push((Stage::Probe, Outcome::Ran));
        Ok(())
    }

    fn sweep(&mut self) -> Result<()> {
        let path = self.paths.sweep();
        if freshness(&path, &self.hashes.sweep) == Freshness::Fresh {
            self.log.push((Stage::Sweep, Outcome::Skipped));
            return Ok(());
        }
        let mut cells = Vec::new();
        for scale in self.spec.sweep_scales.clone() {
            for lambda in self.spec.sweep_lambdas.clone() {
                self.ensure_sae(scale, lambda, Stage::Sweep)?;
                let sae = self.load_sae(scale, lambda, Stage::Sweep)?;
                let fid = fidelity_metrics(&sae, self.test_store()?, ACTIVITY_THRESHOLD)?;
                cells.push(SweepCell {
                    scale,
                    lambda,
                    l0: fid.l0,
                    recon_mse: fid.recon_mse,
                });
            }
        }
        let result = SweepResult {
            hash: self.hashes.sweep.clone(),
            train_hash: self.hashes.train.clone(),
            cells,
        };
        write_json(&path, &result)?;
        write_stamp(&path, Stage::Sweep, &self.hashes.sweep, self.key.seed)?;
        self.say(&format!(
            "sweep: L0 {}",
            result
                .cells
                .iter()
                .map(|c| format!("{}x/{}={:.1}", c.scale, c.lambda, c.l0))
                .collect::<Vec<_>>()
                .join(" ")
        ));
        self.log.push((Stage::Sweep, Outcome::Ran));
        Ok(())
    }

    fn run(mut self) -> Result<Vec<(Stage, Outcome)>> {
        if self.spec.wants(Stage::Train) {
            self.train()?;
        }
        if self.spec.wants(Stage::Harvest) {
            self.harvest()?;
        }
        if self.spec.wants(Stage::Sae) {
            self.saes()?;
        }
        if self.spec.wants(Stage::Probe) {
            self.probe()?;
        }
        if self.spec.wants(Stage::Sweep) {
            self.sweep()?;
        }
        Ok(self.log)
    }
}

fn run_cell(spec: &ExperimentSpec, key: CellKey) -> Result<Vec<(Stage, Outcome)>> {
    match spec.precision {
        Precision::F32 => Cell::<f32>::new(spec, key)?.run(),
        Precision::F64 => Cell::<f64>::new(spec, key)?.run(),
    }
}

#[derive(Debug)]
pub struct RunSummary {
    pub cells: Vec<(CellKey, Vec<(Stage, Outcome)>)>,
    pub failures: Vec<(CellKey, anyhow::Error)>,
    pub manifest: Option<Manifest>,
}

impl RunSummary {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs the requested per-cell stages over the grid on a bounded worker
/// pool, then renders tables if requested. Cell failures are collected,
/// not fatal to other cells.
pub fn run(spec: &ExperimentSpec) -> Result<RunSummary> {
    spec.validate()?;
    std::fs::create_dir_all(&spec.out).with_context(|| format!("creating {}", spec.out.display()))?;
    let cells = spec.cells();
    let per_cell = Stage::ALL.iter().any(|&s| s != Stage::Report && spec.wants(s));
    let done = Mutex::new(Vec::new());
    let failed = Mutex::new(Vec::new());
    if per_cell {
        let next = AtomicUsize::new(0);
        let workers = spec.jobs().min(cells.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(key) = cells.get(i) else { break };
                    match run_cell(spec, key.clone()) {
                        Ok(log) => done.lock().expect("no poisoned workers").push((key.clone(), log)),
                        Err(e) => {
                            eprintln!("[{}] failed: {e:#}", cell_label(key));
                            failed.lock().expect("no poisoned workers").push((key.clone(), e));
                        }
                    }
                });
            }
        });
    }
    let mut done = done.into_inner().expect("workers joined");
    done.sort_by(|a, b| a.0.cmp(&b.0));
    let mut failures = failed.into_inner().expect("workers joined");
    failures.sort_by(|a, b| a.0.cmp(&b.0));
    let manifest = if spec.wants(Stage::Report) {
        match render_tables(spec) {
            Ok(m) => Some(m),
            Err(e) => {
                failures.push((
                    CellKey {
                        dataset: "<report>".into(),
                        horizon: 0,
                        seed: 0,
                    },
                    e,
                ));
                None
            }
        }
    } else {
        None
    };
    Ok(RunSummary {
        cells: done,
        failures,
        manifest,
    })
}

/// Loads one cell's report with its sweep merged in. `None` when the cell
/// has not been probed; stamp mismatches are errors.
pub fn load_report(spec: &ExperimentSpec, key: &CellKey) -> Result<Option<ProbeReport>> {
    let registry = spec.registry()?;
    let hashes = CellHashes::new(spec, key, registry.get(&key.dataset)?);
    let paths = CellPaths::new(&spec.out, key);
    let probe = paths.probe();
    let mut report: ProbeReport = match freshness(&probe, &hashes.probe) {
        Freshness::Missing => return Ok(None),
        Freshness::Stale(_) => bail!(
            "{}: {} belongs to a different spec; rerun `ffnprobe probe {}`",
            cell_label(key),
            probe.display(),
            cell_flags(key)
        ),
        Freshness::Fresh => read_json(&probe)?,
    };
    let sweep = paths.sweep();
    match freshness(&sweep, &hashes.sweep) {
        Freshness::Missing => {}
        Freshness::Stale(_) => bail!(
            "{}: {} belongs to a different spec; rerun `ffnprobe sweep {}`",
            cell_label(key),
            sweep.display(),
            cell_flags(key)
        ),
        Freshness::Fresh => {
            let s: SweepResult = read_json(&sweep)?;
            if s.train_hash != hashes.train {
                bail!("{}: sweep and probe come from different models", cell_label(key));
            }
            report.lambda_sweep = s.cells;
        }
    }
    Ok(Some(report))
}

/// Renders every table of the spec's grid into `<out>/tables`.
pub fn render_tables(spec: &ExperimentSpec) -> Result<Manifest> {
    let registry = spec.registry()?;
    let mut reports = Vec::new();
    let mut absent = Vec::new();
    for key in spec.cells() {
        match load_report(spec, &key)? {
            Some(r) => reports.push(r),
            None => absent.push(key),
        }
    }
    let dir = spec.out.join("tables");
    let display = |n: &str| registry.display_name(n);
    for t in report::tables(&reports, &absent, &display) {
        write_text(&dir.join(format!("{}.csv", t.name)), &t.to_csv())?;
    }
    write_text(&dir.join("scaling_raw.csv"), &report::raw_scaling_csv(&reports))?;
    write_text(&dir.join("tables.txt"), &report::render_text(&reports, &absent, &display))?;
    let manifest = report::manifest(&reports, &absent);
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("bundle.json"), &reports)?;
    Ok(manifest)
}
