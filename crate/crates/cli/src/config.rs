//! Run configuration: one TOML file with a section per mode.
//!
//! Relative paths resolve against the working directory of the run, which
//! is `--out` when given and the config file's directory otherwise.

use std::path::{Path, PathBuf};

use chanforge::channel::PdapGrid;
use chanforge::diffnet::ArchConfig;
use chanforge::sim::SimConfig;
use chanforge::stats::SsimParams;
use chanforge::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_FREQUENCY_HZ: f64 = 313.5e9;
pub const DEFAULT_DELTA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simulate,
    Pretrain,
    Finetune,
    Generate,
    Evaluate,
    Sweep,
}

impl Mode {
    pub fn section(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Pretrain => "pretrain",
            Mode::Finetune => "finetune",
            Mode::Generate => "generate",
            Mode::Evaluate => "evaluate",
            Mode::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides every seed below when set.
    pub seed: Option<u64>,
    #[serde(default)]
    pub simulate: Vec<SimulateJob>,
    pub pretrain: Option<PretrainSection>,
    pub finetune: Option<FinetuneSection>,
    pub generate: Option<GenerateSection>,
    pub evaluate: Option<EvaluateSection>,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateJob {
    pub output: PathBuf,
    pub channels: usize,
    #[serde(default)]
    pub sim: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub dataset: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub output: PathBuf,
    #[serde(default = "TrainConfig::finetune", deserialize_with = "finetune_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub progress: Progress,
}

/// Progress CSV and abort snapshot settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Progress {
    /// Write one progress row every `every` epochs; 0 disables the log.
    pub every: u64,
    /// Defaults to `<output>.progress.csv`.
    pub log: Option<PathBuf>,
    /// Directory for the last good checkpoint when training aborts;
    /// defaults to the output's directory.
    pub abort_dir: Option<PathBuf>,
}

impl Default for Progress {
    fn default() -> Self {
        Progress {
            every: 100,
            log: None,
            abort_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub checkpoint: PathBuf,
    pub output: PathBuf,
    /// Number of channels; defaults to the number of listed distances.
    pub count: Option<usize>,
    /// Explicit distances, cycled to reach `count`.
    pub distances: Option<Vec<f64>>,
    /// Take distances from a dataset file, cycled to reach `count`.
    pub distances_from: Option<PathBuf>,
    /// `count` evenly spaced distances over `[min, max]`.
    pub distance_range: Option<[f64; 2]>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_id_prefix")]
    pub id_prefix: String,
}

fn default_id_prefix() -> String {
    "gen".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub generated: PathBuf,
    pub reference: PathBuf,
    /// Report directory.
    pub output: PathBuf,
    #[serde(default)]
    pub metrics: Metrics,
    /// Write per-distance PDAP grids.
    #[serde(default = "yes")]
    pub pdap_grids: bool,
}

fn yes() -> bool {
    true
}

/// Settings shared by evaluation and the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Metrics {
    pub frequency_hz: f64,
    /// Band level: the DKW band holds with probability 1 − δ.
    pub delta: f64,
    pub grid: PdapGrid,
    pub ssim: SsimParams,
}

impl Default for Metrics {
    fn default() -> Self {
        Metrics {
            frequency_hz: DEFAULT_FREQUENCY_HZ,
            delta: DEFAULT_DELTA,
            grid: PdapGrid::default(),
            ssim: SsimParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Pretrained checkpoint every size starts from.
    pub checkpoint: PathBuf,
    /// Full measurement set; subsets are drawn from it and it is the
    /// reference for every band check.
    pub dataset: PathBuf,
    pub output: PathBuf,
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    /// Channels generated per size, at the reference distances.
    #[serde(default = "default_generate_count")]
    pub generate_count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "TrainConfig::finetune", deserialize_with = "finetune_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: Metrics,
}

/// Keys given in a fine-tune `train` table override the fine-tune defaults
/// rather than the pretraining ones.
fn finetune_train<'de, D: serde::Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
    use serde::de::Error;
    let given = toml::Table::deserialize(d)?;
    let full_batch = !given.contains_key("batch_size");
    let mut merged = toml::Table::try_from(TrainConfig::finetune()).map_err(D::Error::custom)?;
    merged.extend(given);
    let mut cfg: TrainConfig = merged.try_into().map_err(D::Error::custom)?;
    if full_batch {
        cfg.batch_size = None;
    }
    Ok(cfg)
}

fn default_sizes() -> Vec<usize> {
    vec![21, 15, 9, 5, 3]
}

fn default_generate_count() -> usize {
    500
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies the run seed, if any, to every stage. Simulation job `k`
    /// gets `seed + k` so the datasets stay distinct.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        let Some(s) = seed.or(self.seed) else { return };
        self.seed = Some(s);
        for (k, job) in self.simulate.iter_mut().enumerate() {
            job.sim.seed = s.wrapping_add(k as u64);
        }
        if let Some(p) = &mut self.pretrain {
            p.train.seed = s;
        }
        if let Some(f) = &mut self.finetune {
            f.train.seed = s;
        }
        if let Some(g) = &mut self.generate {
            g.seed = s;
        }
        if let Some(w) = &mut self.sweep {
            w.seed = s;
            w.train.seed = s;
        }
    }

    pub fn require(&self, mode: Mode) -> Result<(), CliError> {
        let present = match mode {
            Mode::Simulate => !self.simulate.is_empty(),
            Mode::Pretrain => self.pretrain.is_some(),
            Mode::Finetune => self.finetune.is_some(),
            Mode::Generate => self.generate.is_some(),
            Mode::Evaluate => self.evaluate.is_some(),
            Mode::Sweep => self.sweep.is_some(),
        };
        if present {
            Ok(())
        } else {
            Err(CliError::Config(format!("missing [{}] section", mode.section())))
        }
    }
}

/// Resolves relative paths against the run directory.
#[derive(Debug, Clone)]
pub struct Workdir(PathBuf);

impl Workdir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Workdir(dir.into())
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.0.join(p)
        }
    }

    pub fn root(&self) -> &Path {
        &self.0
    }
}
