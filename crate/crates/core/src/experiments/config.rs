use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{gen_synthetic, load_cifar_dir, CifarVariant, DatasetSplits};
use crate::encoder::{EncoderSpec, NormKind};
use crate::error::{Error, Result};
use crate::evaluation::ProbeConfig;
use crate::ssl::{Algorithm, SslConfig};

/// Measurement ladder, truncated to the run length.
const EPOCH_LADDER: [usize; 6] = [1, 5, 10, 30, 50, 100];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Cifar10,
    Cifar100,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory of the CIFAR binary batches.
    pub path: Option<PathBuf>,
    /// Synthetic only.
    pub classes: usize,
    /// Synthetic only.
    pub per_class: usize,
    /// Synthetic only; CIFAR images are 32×32.
    pub side: usize,
    /// Synthetic only.
    pub seed: u64,
    /// Keep only the first `n` train images.
    pub train_limit: Option<usize>,
    /// Keep only the first `n` test images.
    pub test_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            path: None,
            classes: 4,
            per_class: 100,
            side: 32,
            seed: 7,
            train_limit: None,
            test_limit: None,
        }
    }
}

impl DataConfig {
    pub fn image_side(&self) -> usize {
        match self.source {
            DataSource::Synthetic => self.side,
            DataSource::Cifar10 | DataSource::Cifar100 => 32,
        }
    }

    pub fn load(&self) -> Result<DatasetSplits> {
        let mut splits = match self.source {
            DataSource::Synthetic => gen_synthetic(self.classes, self.per_class, self.side, self.seed)?,
            DataSource::Cifar10 | DataSource::Cifar100 => {
                let dir = self
                    .path
                    .as_deref()
                    .ok_or_else(|| Error::Config("data.path is required for CIFAR sources".into()))?;
                let variant = if self.source == DataSource::Cifar10 {
                    CifarVariant::Cifar10
                } else {
                    CifarVariant::Cifar100
                };
                load_cifar_dir(dir, variant)?
            }
        };
        if let Some(n) = self.train_limit {
            let keep: Vec<usize> = (0..n.min(splits.train.len())).collect();
            splits.train = splits.train.subset(&keep);
        }
        if let Some(n) = self.test_limit {
            let keep: Vec<usize> = (0..n.min(splits.test.len())).collect();
            splits.test = splits.test.subset(&keep);
        }
        Ok(splits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Depth preset `d1`..`d4`.
    pub depth: String,
    pub width: usize,
    pub norm: NormKind,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: "d1".into(),
            width: 1,
            norm: NormKind::Batch,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn spec(&self, image_side: usize) -> Result<EncoderSpec> {
        let mut spec = EncoderSpec::preset(&self.depth, self.width, self.norm)?;
        spec.image_side = image_side;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergySource {
    /// Pooled tap activations of held-out images.
    Features,
    /// Neuron weights of the layer behind each tap.
    Weights,
}

impl fmt::Display for EnergySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnergySource::Features => "features",
            EnergySource::Weights => "weights",
        })
    }
}

impl FromStr for EnergySource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(EnergySource::Features),
            "weights" => Ok(EnergySource::Weights),
            _ => Err(Error::InvalidArgument(format!(
                "unknown energy source {s:?} (features|weights)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiversityConfig {
    /// Energy exponents.
    pub s: Vec<f64>,
    pub source: EnergySource,
    /// Held-out images sampled per measurement.
    pub samples: usize,
    /// Seed of the held-out sample.
    pub seed: u64,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        DiversityConfig {
            s: vec![0.0, 1.0, 2.0],
            source: EnergySource::Features,
            samples: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopSignal {
    ProbeError,
    TrainLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub depths: Vec<String>,
    pub widths: Vec<usize>,
    pub norms: Vec<NormKind>,
    pub algorithms: Vec<Algorithm>,
    pub seeds: Vec<u64>,
    /// Measurement epochs; 0 measures the untrained encoder. Training runs to
    /// the largest one. Defaults to the ladder 1, 5, 10, 30, 50, 100 cut at
    /// `ssl.epochs`, plus `ssl.epochs` itself.
    pub epochs: Option<Vec<usize>>,
    pub early_stop: bool,
    pub patience: usize,
    pub min_delta: f64,
    pub stop_signal: StopSignal,
    /// Cells trained concurrently.
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            depths: vec!["d1".into()],
            widths: vec![1],
            norms: vec![NormKind::Batch],
            algorithms: vec![Algorithm::SimClr],
            seeds: vec![0],
            epochs: None,
            early_stop: false,
            patience: 3,
            min_delta: 0.002,
            stop_signal: StopSignal::ProbeError,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Fill the `wall_s` columns. Off by default so reruns are byte-identical.
    pub record_wall_time: bool,
}

/// Everything a `train`, `probe` or `sweep` run needs, read from one TOML
/// file with `[data]`, `[encoder]`, `[ssl]`, `[probe]`, `[diversity]`,
/// `[sweep]` and `[output]` sections. Every section and key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub ssl: SslConfig,
    pub probe: ProbeConfig,
    pub diversity: DiversityConfig,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

fn set_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut table = root;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: `{part}` is not a section")))?;
    }
    table.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, then applies dotted `key=value` overrides such as
    /// `ssl.epochs=0`. Override values are TOML literals; anything that does
    /// not parse as one is taken as a bare string.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            set_override(&mut root, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.ssl.validate()?;
        self.probe.validate()?;
        self.encoder.spec(self.data.image_side())?;
        if self.data.source == DataSource::Synthetic && (self.data.classes < 2 || self.data.per_class == 0) {
            return bad("data.classes must be ≥ 2 and data.per_class ≥ 1");
        }
        let sw = &self.sweep;
        if sw.depths.is_empty() || sw.widths.is_empty() || sw.norms.is_empty() {
            return bad("sweep.depths, sweep.widths and sweep.norms must be non-empty");
        }
        if sw.algorithms.is_empty() || sw.seeds.is_empty() {
            return bad("sweep.algorithms and sweep.seeds must be non-empty");
        }
        if matches!(&sw.epochs, Some(e) if e.is_empty()) {
            return bad("sweep.epochs must be non-empty");
        }
        for d in &sw.depths {
            EncoderSpec::preset_blocks(d).map_err(|e| Error::Config(e.to_string()))?;
        }
        if sw.widths.contains(&0) {
            return bad("sweep.widths must be ≥ 1");
        }
        if sw.jobs == 0 {
            return bad("sweep.jobs must be ≥ 1");
        }
        if sw.patience == 0 || !(sw.min_delta >= 0.0) {
            return bad("sweep.patience must be ≥ 1 and sweep.min_delta ≥ 0");
        }
        if self.diversity.s.is_empty() || self.diversity.s.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("diversity.s must be a non-empty list of finite values ≥ 0");
        }
        let mut distinct = self.diversity.s.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() != self.diversity.s.len() {
            return bad("diversity.s must not repeat a value");
        }
        if self.diversity.samples == 0 {
            return bad("diversity.samples must be ≥ 1");
        }
        Ok(())
    }

    /// Sorted, de-duplicated measurement epochs.
    pub fn measure_epochs(&self) -> Vec<usize> {
        let mut e = match &self.sweep.epochs {
            Some(e) => e.clone(),
            None => {
                let n = self.ssl.epochs;
                let mut e: Vec<usize> = EPOCH_LADDER.iter().copied().filter(|&x| x <= n).collect();
                e.push(n);
                e
            }
        };
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Grid cells in canonical order: algorithm, depth, width, norm, seed.
    pub fn cells(&self) -> Vec<Cell> {
        let sw = &self.sweep;
        let epochs = self.measure_epochs();
        let mut out = Vec::new();
        for &algorithm in &sw.algorithms {
            for depth in &sw.depths {
                for &width in &sw.widths {
                    for &norm in &sw.norms {
                        for &seed in &sw.seeds {
                            let mut cfg = self.clone();
                            cfg.encoder = EncoderConfig {
                                depth: depth.clone(),
                                width,
                                norm,
                                seed,
                            };
                            cfg.ssl.algorithm = algorithm;
                            cfg.ssl.seed = seed;
                            cfg.ssl.epochs = epochs.last().copied().unwrap_or(0);
                            let fingerprint = fingerprint(&CellSettings::of(&cfg, &epochs));
                            out.push(Cell {
                                fingerprint,
                                measure_epochs: epochs.clone(),
                                config: cfg,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// One grid point: a fully resolved config and its fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub fingerprint: String,
    pub measure_epochs: Vec<usize>,
    pub config: ExperimentConfig,
}

impl Cell {
    pub fn algorithm(&self) -> Algorithm {
        self.config.ssl.algorithm
    }

    pub fn seed(&self) -> u64 {
        self.config.encoder.seed
    }
}

/// The settings that determine a cell's results. Output location, job count
/// and the grid lists themselves are left out.
#[derive(Serialize)]
struct CellSettings<'a> {
    data: &'a DataConfig,
    encoder: &'a EncoderConfig,
    ssl: &'a SslConfig,
    probe: &'a ProbeConfig,
    diversity: &'a DiversityConfig,
    measure_epochs: &'a [usize],
    early_stop: bool,
    patience: usize,
    min_delta: f64,
    stop_signal: StopSignal,
}

impl<'a> CellSettings<'a> {
    fn of(cfg: &'a ExperimentConfig, epochs: &'a [usize]) -> Self {
        CellSettings {
            data: &cfg.data,
            encoder: &cfg.encoder,
            ssl: &cfg.ssl,
            probe: &cfg.probe,
            diversity: &cfg.diversity,
            measure_epochs: epochs,
            early_stop: cfg.sweep.early_stop,
            patience: cfg.sweep.patience,
            min_delta: cfg.sweep.min_delta,
            stop_signal: cfg.sweep.stop_signal,
        }
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        leaf => out.push(format!("{prefix}={leaf}")),
    }
}

/// First 16 hex digits of the SHA-256 of the sorted `key=value` lines of
/// a serializable settings value.
pub fn fingerprint<T: Serialize>(settings: &T) -> String {
    let value = serde_json::to_value(settings).expect("settings serialize");
    let mut lines = Vec::new();
    flatten("", &value, &mut lines);
    lines.sort();
    let mut h = Sha256::new();
    for l in &lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}
