// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment specification: a JSON file plus command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use ffnprobe_core::data::{DatasetRegistry, HORIZONS};
use ffnprobe_core::nn::Precision;
use ffnprobe_core::probes::Amplification;
use ffnprobe_core::report::{CellKey, SCALES, SWEEP_LAMBDAS, SWEEP_SCALES};
use ffnprobe_core::sae::HARVEST_CAP;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Train,
    Harvest,
    Sae,
    Probe,
    Sweep,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Train,
        Stage::Harvest,
        Stage::Sae,
        Stage::Probe,
        Stage::Sweep,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Harvest => "harvest",
            Stage::Sae => "sae",
            Stage::Probe => "probe",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .with_context(|| format!("unknown stage `{s}`"))
    }
}

/// Parses `all` or a comma-separated stage list.
pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    if s == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    let mut v = s.split(',').map(|p| p.trim().parse()).collect::<Result<Vec<Stage>>>()?;
    v.sort();
    v.dedup();
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBudget {
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainBudget {
    fn default() -> Self {
        Self {
            max_epochs: 80,
            patience: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeBudget {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub max_steps: Option<usize>,
}

impl Default for SaeBudget {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            patience: 3,
            batch_size: 1024,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub datasets: Vec<String>,
    pub horizons: Vec<usize>,
    pub scales: Vec<f64>,
    pub lambda: f64,
    pub sweep_scales: Vec<f64>,
    pub sweep_lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub registry: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    /// Worker threads over grid cells; 0 means one per available core.
    pub jobs: usize,
    pub precision: Precision,
    pub stages: Vec<Stage>,
    pub train: TrainBudget,
    pub sae: SaeBudget,
    pub harvest_cap: usize,
    pub top_k: usize,
    pub factor: f64,
    pub amplification: Amplification,
    pub verbose: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            datasets: DatasetRegistry::builtin().names(),
            horizons: HORIZONS.to_vec(),
            scales: SCALES.to_vec(),
            lambda: 0.01,
            sweep_scales: SWEEP_SCALES.to_vec(),
            sweep_lambdas: SWEEP_LAMBDAS.to_vec(),
            seeds: vec![42],
            out: PathBuf::from("runs"),
            registry: None,
            data_dir: None,
            jobs: 0,
            precision: Precision::F32,
            stages: Stage::ALL.to_vec(),
            train: TrainBudget::default(),
            sae: SaeBudget::default(),
            harvest_cap: HARVEST_CAP,
            top_k: 10,
            factor: 5.0,
            amplification: Amplification::OneAtATime,
            verbose: false,
        }
    }
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing spec {}", path.display()))
    }

    pub fn registry(&self) -> Result<DatasetRegistry> {
        match &self.registry {
            Some(p) => Ok(DatasetRegistry::load(p)?),
            None => Ok(DatasetRegistry::builtin()),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(DatasetRegistry::data_dir_from_env)
    }

    pub fn validate(&self) -> Result<()> {
        let reg = self.registry()?;
        for d in &self.datasets {
            reg.get(d)?;
        }
        if self.datasets.is_empty() || self.horizons.is_empty() || self.seeds.is_empty() {
            bail!("the grid is empty: need at least one dataset, horizon and seed");
        }
        if self.horizons.contains(&0) {
            bail!("horizon must be positive");
        }
        if self.scales.iter().chain(&self.sweep_scales).any(|&s| !(s > 0.0)) {
            bail!("dictionary scales must be positive");
        }
        if self.sweep_lambdas.iter().chain([&self.lambda]).any(|&l| !(l >= 0.0)) {
            bail!("lambda must be non-negative");
        }
        if self.harvest_cap == 0 || self.top_k == 0 {
            bail!("harvest cap and top-k must be positive");
        }
        if self.stages.is_empty() {
            bail!("no stages selected");
        }
        Ok(())
    }

    /// Grid cells in dataset, horizon, seed order.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for d in &self.datasets {
            for &h in &self.horizons {
                for &seed in &self.seeds {
                    out.push(CellKey {
                        dataset: d.clone(),
                        horizon: h,
                        seed,
                    });
                }
            }
        }
        out
    }

    pub fn jobs(&self) -> usize {
        if self.jobs > 0 {
            self.jobs
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    pub fn wants(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn hash_of<V: Serialize>(value: &V) -> String {
    let bytes = serde_json::to_vec(value).expect("spec values serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_lists() {
        assert_eq!(parse_stages("all").unwrap(), Stage::ALL.to_vec());
        assert_eq!(parse_stages("sae,train").unwrap(), vec![Stage::Train, Stage::Sae]);
        assert!(parse_stages("fit").is_err());
    }

    #[test]
    fn default_grid_mirrors_benchmarks() {
        let s = ExperimentSpec::default();
        s.validate().unwrap();
        assert_eq!(s.cells().len(), 32);
    }

    #[test]
    fn unknown_fields_and_datasets_are_rejected() {
        assert!(serde_json::from_str::<ExperimentSpec>(r#"{"dataset": ["etth1"]}"#).is_err());
        let s: ExperimentSpec = serde_json::from_str(r#"{"datasets": ["nope"]}"#).unwrap();
        assert!(s.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = hash_of(&("train", 96, 42u64));
        assert_eq!(a, hash_of(&("train", 96, 42u64)));
        assert_ne!(a, hash_of(&("train", 96, 43u64)));
        assert_eq!(a.len(), 64);
    }
}
