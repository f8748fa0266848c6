// SPDX-License-Identifier: MIT OR Apache-2.0

//! Benchmark CSV loading, chronological splits, train-fitted standardization
//! and sliding-window batching.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Input window length used by every experiment.
pub const LOOKBACK: usize = 336;
/// Forecast horizons of the benchmark protocol.
pub const HORIZONS: [usize; 4] = [96, 192, 336, 720];
/// Windows per batch (each window contributes one sequence per channel).
pub const BATCH_SIZE: usize = 128;
/// Environment variable naming the directory that holds the dataset CSVs.
pub const DATA_DIR_ENV: &str = "FFNPROBE_DATA_DIR";

/// How rows are divided into train / val / test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitRule {
    /// 12 / 4 / 4 months of data; rows beyond the test block are dropped.
    EttFixed { steps_per_hour: usize },
    /// floor(0.7 T) / floor(0.8 T) / T.
    #[serde(rename = "ratio_70_10_20")]
    Ratio70_10_20,
}

impl SplitRule {
    pub fn bounds(&self, rows: usize) -> Result<SplitBounds> {
        let b = match *self {
            SplitRule::EttFixed { steps_per_hour } => {
                let month = 30 * 24 * steps_per_hour;
                let b = SplitBounds {
                    train_end: 12 * month,
                    val_end: 16 * month,
                    test_end: 20 * month,
                };
                if rows < b.test_end {
                    return Err(Error::Config(format!(
                        "fixed ETT split needs {} rows, dataset has {rows}",
                        b.test_end
                    )));
                }
                b
            }
            SplitRule::Ratio70_10_20 => SplitBounds {
                train_end: rows * 7 / 10,
                val_end: rows * 8 / 10,
                test_end: rows,
            },
        };
        if !(0 < b.train_end && b.train_end < b.val_end && b.val_end <= b.test_end) {
            return Err(Error::Config(format!("degenerate split {b:?} for {rows} rows")));
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub test_end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

/// Per-channel standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A multivariate series `[time × channels]` with its splits and scaler.
#[derive(Debug, Clone)]
pub struct SeriesDataset {
    pub name: String,
    pub channel_names: Vec<String>,
    values: Vec<f64>,
    rows: usize,
    channels: usize,
    bounds: SplitBounds,
    scaler: Option<Scaler>,
}

impl SeriesDataset {
    /// Builds a dataset from row-major values and assigns splits. Values are
    /// left unscaled.
    pub fn from_rows(
        name: &str,
        channel_names: Vec<String>,
        values: Vec<f64>,
        rule: SplitRule,
    ) -> Result<Self> {
        let channels = channel_names.len();
        if channels == 0 || values.len() % channels != 0 {
            return Err(Error::Load {
                name: name.to_string(),
                reason: format!("{} values do not fill {channels} channels", values.len()),
            });
        }
        let rows = values.len() / channels;
        let mut ds = Self {
            name: name.to_string(),
            channel_names,
            values,
            rows,
            channels,
            bounds: SplitBounds {
                train_end: 0,
                val_end: 0,
                test_end: 0,
            },
            scaler: None,
        };
        ds.assign_splits(rule)?;
        Ok(ds)
    }

    /// Parses a benchmark CSV (`date` column first, numeric channels after),
    /// assigns splits by `rule` and fits the scaler on the training rows.
    pub fn load_csv(path: &Path, name: &str, rule: SplitRule) -> Result<Self> {
        let load_err = |reason: String| Error::Load {
            name: name.to_string(),
            reason,
        };
        if !path.exists() {
            return Err(load_err(format!("file not found: {}", path.display())));
        }
        let mut reader = csv::Reader::from_path(path).map_err(|e| load_err(e.to_string()))?;
        let headers = reader.headers().map_err(|e| load_err(e.to_string()))?.clone();
        if headers.get(0).map(str::trim) != Some("date") {
            return Err(load_err("first column must be `date`".into()));
        }
        let channel_names: Vec<String> = headers.iter().skip(1).map(|s| s.trim().to_string()).collect();
        if channel_names.is_empty() {
            return Err(load_err("no value columns".into()));
        }
        let mut values = Vec::new();
        for (r, record) in reader.records().enumerate() {
            let record = record.map_err(|e| load_err(e.to_string()))?;
            if record.len() != channel_names.len() + 1 {
                return Err(load_err(format!(
                    "row {} has {} cells, expected {}",
                    r + 1,
                    record.len(),
                    channel_names.len() + 1
                )));
            }
            for (c, cell) in record.iter().skip(1).enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    load_err(format!(
                        "non-numeric cell `{cell}` at row {}, column `{}`",
                        r + 1,
                        channel_names[c]
                    ))
                })?;
                if !v.is_finite() {
                    return Err(load_err(format!("non-finite value at row {}, column `{}`", r + 1, channel_names[c])));
                }
                values.push(v);
            }
        }
        let rows = values.len() / channel_names.len();
        let min_rows = LOOKBACK + HORIZONS[HORIZONS.len() - 1];
        if rows < min_rows {
            return Err(load_err(format!(
                "insufficient rows: {rows} < lookback + max horizon = {min_rows}"
            )));
        }
        let channels = channel_names.len();
        for c in 0..channels {
            let col = (0..rows).map(|r| values[r * channels + c]);
            let (min, max) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
            if max - min == 0.0 {
                return Err(Error::ConstantChannel {
                    dataset: name.to_string(),
                    channel: channel_names[c].clone(),
                });
            }
        }
        let mut ds = Self::from_rows(name, channel_names, values, rule)?;
        ds.fit_transform_scaler()?;
        Ok(ds)
    }

    /// Assigns split bounds; rows past the test block are discarded.
    pub fn assign_splits(&mut self, rule: SplitRule) -> Result<()> {
        let bounds = rule.bounds(self.rows)?;
        if bounds.test_end < self.rows {
            self.values.truncate(bounds.test_end * self.channels);
            self.rows = bounds.test_end;
        }
        self.bounds = bounds;
        Ok(())
    }

    /// Fits per-channel mean / population std on the training rows and
    /// standardizes every row with them.
    pub fn fit_transform_scaler(&mut self) -> Result<()> {
        if self.scaler.is_some() {
            return Err(Error::Config(format!("dataset `{}` is already scaled", self.name)));
        }
        let n = self.bounds.train_end;
        let c = self.channels;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let m = (0..n).map(|r| self.values[r * c + ch]).sum::<f64>() / n as f64;
            let var = (0..n)
                .map(|r| {
                    let d = self.values[r * c + ch] - m;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let s = var.sqrt();
            if s < 1e-8 {
                return Err(Error::ConstantChannel {
                    dataset: self.name.clone(),
                    channel: self.channel_names[ch].clone(),
                });
            }
            mean[ch] = m;
            std[ch] = s;
        }
        for row in self.values.chunks_mut(c) {
            for ch in 0..c {
                row[ch] = (row[ch] - mean[ch]) / std[ch];
            }
        }
        self.scaler = Some(Scaler { mean, std });
        Ok(())
    }

    /// Maps standardized values `[.., channels]` back to raw units.
    pub fn inverse_transform(&self, scaled: &[f64]) -> Result<Vec<f64>> {
        let sc = self
            .scaler
            .as_ref()
            .ok_or_else(|| Error::Config("dataset is not scaled".into()))?;
        Ok(scaled
            .chunks(self.channels)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(ch, v)| v * sc.std[ch] + sc.mean[ch])
                    .collect::<Vec<_>>()
            })
            .collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bounds(&self) -> SplitBounds {
        self.bounds
    }

    pub fn scaler(&self) -> Option<&Scaler> {
        self.scaler.as_ref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.channels + channel]
    }

    /// Valid window start indices: the target `[s+lookback, s+lookback+horizon)`
    /// lies in the partition, and the input may reach back `lookback` rows
    /// into the preceding partition for val/test.
    pub fn window_starts(&self, partition: Partition, lookback: usize, horizon: usize) -> std::ops::Range<usize> {
        let b = self.bounds;
        let (lo, hi) = match partition {
            Partition::Train => (0, b.train_end),
            Partition::Val => (b.train_end.saturating_sub(lookback), b.val_end),
            Partition::Test => (b.val_end.saturating_sub(lookback), b.test_end),
        };
        let span = lookback + horizon;
        if hi < lo + span {
            return lo..lo;
        }
        lo..hi - span + 1
    }

    /// Batches of windows from one partition. The train stream is shuffled
    /// when a seed is given; other streams keep chronological order.
    pub fn windows<T: Scalar>(
        &self,
        partition: Partition,
        lookback: usize,
        horizon: usize,
        batch_size: usize,
        shuffle_seed: Option<u64>,
    ) -> WindowStream<'_, T> {
        let mut starts: Vec<usize> = self.window_starts(partition, lookback, horizon).collect();
        if let Some(seed) = shuffle_seed {
            starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        WindowStream {
            dataset: self,
            starts,
            pos: 0,
            lookback,
            horizon,
            batch_size: batch_size.max(1),
            _marker: std::marker::PhantomData,
        }
    }

    /// One batch from explicit start indices.
    pub fn batch_at<T: Scalar>(&self, starts: &[usize], lookback: usize, horizon: usize) -> WindowBatch<T> {
        let c = self.channels;
        let mut inputs = Vec::with_capacity(starts.len() * lookback * c);
        let mut targets = Vec::with_capacity(starts.len() * horizon * c);
        for &s in starts {
            for v in &self.values[s * c..(s + lookback) * c] {
                inputs.push(T::from_f64(*v));
            }
            for v in &self.values[(s + lookback) * c..(s + lookback + horizon) * c] {
                targets.push(T::from_f64(*v));
            }
        }
        let b = starts.len();
        WindowBatch {
            inputs: Tensor::new(vec![b, lookback, c], inputs).expect("window shape"),
            targets: Tensor::new(vec![b, horizon, c], targets).expect("window shape"),
            starts: starts.to_vec(),
        }
    }
}

/// Inputs `[batch × lookback × channels]` and targets `[batch × horizon × channels]`.
#[derive(Debug, Clone)]
pub struct WindowBatch<T> {
    pub inputs: Tensor<T>,
    pub targets: Tensor<T>,
    pub starts: Vec<usize>,
}

pub struct WindowStream<'a, T> {
    dataset: &'a SeriesDataset,
    starts: Vec<usize>,
    pos: usize,
    lookback: usize,
    horizon: usize,
    batch_size: usize,
    _marker: std::marker::PhantomData<T>,
}

impl<T> WindowStream<'_, T> {
    pub fn num_windows(&self) -> usize {
        self.starts.len()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }
}

impl<T: Scalar> Iterator for WindowStream<'_, T> {
    type Item = WindowBatch<T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.starts.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.starts.len());
        let batch = self
            .dataset
            .batch_at(&self.starts[self.pos..end], self.lookback, self.horizon);
        self.pos = end;
        Some(batch)
    }
}

/// One entry of the dataset registry file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    /// CSV path, relative paths resolve against the data directory.
    pub path: PathBuf,
    pub split_rule: SplitRule,
    pub d_model: usize,
    /// Name used in rendered tables.
    #[serde(default)]
    pub display_name: Option<String>,
}

/// Dataset name → location, split rule and model width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetRegistry {
    pub entries: BTreeMap<String, RegistryEntry>,
}

impl DatasetRegistry {
    /// The eight standard long-horizon benchmarks.
    pub fn builtin() -> Self {
        let ett = |file: &str, sph: usize, display: &str| RegistryEntry {
            path: PathBuf::from(file),
            split_rule: SplitRule::EttFixed { steps_per_hour: sph },
            d_model: 16,
            display_name: Some(display.to_string()),
        };
        let ratio = |file: &str, d_model: usize, display: &str| RegistryEntry {
            path: PathBuf::from(file),
            split_rule: SplitRule::Ratio70_10_20,
            d_model,
            display_name: Some(display.to_string()),
        };
        let mut entries = BTreeMap::new();
        entries.insert("weather".into(), ratio("weather.csv", 64, "Weather"));
        entries.insert("electricity".into(), ratio("electricity.csv", 128, "Electricity"));
        entries.insert("traffic".into(), ratio("traffic.csv", 96, "Traffic"));
        entries.insert("exchange".into(), ratio("exchange_rate.csv", 16, "Exchange"));
        entries.insert("etth1".into(), ett("ETTh1.csv", 1, "ETTh1"));
        entries.insert("etth2".into(), ett("ETTh2.csv", 1, "ETTh2"));
        entries.insert("ettm1".into(), ett("ETTm1.csv", 4, "ETTm1"));
        entries.insert("ettm2".into(), ett("ETTm2.csv", 4, "ETTm2"));
        Self { entries }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Result<&RegistryEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("dataset `{name}` is not in the registry")))
    }

    pub fn display_name(&self, name: &str) -> String {
        self.entries
            .get(name)
            .and_then(|e| e.display_name.clone())
            .unwrap_or_else(|| name.to_string())
    }

    /// Loads and prepares a registered dataset from `data_dir`.
    pub fn open(&self, name: &str, data_dir: &Path) -> Result<SeriesDataset> {
        let entry = self.get(name)?;
        let path = if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            data_dir.join(&entry.path)
        };
        SeriesDataset::load_csv(&path, name, entry.split_rule)
    }

    /// Data directory from the environment, falling back to `./data`.
    pub fn data_dir_from_env() -> PathBuf {
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("data"))
    }
}
