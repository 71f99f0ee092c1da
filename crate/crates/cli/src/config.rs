//! Experiment configuration: TOML file, presets and command-line overrides.

use crate::error::{CliError, Result};
use collafuse::data::{DatasetKind, PartitionMode};
use collafuse::denoiser::ArchSpec;
use collafuse::diffusion::RenoiseMode;
use collafuse::metrics::ProbeConfig;
use collafuse::nodes::{Guidance, SessionConfig};
use collafuse::protocol::WirePrecision;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_ENV: &str = "COLLAFUSE_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// T = 100, small budgets; minutes on one core.
    #[default]
    Quick,
    /// T = 1000, full-width models; hours.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Sprites,
    Gauss2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    ByAttribute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    Smallconv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum WireKind {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DataKind,
    pub samples_per_client: usize,
    /// Sprite side length, 8 or 16.
    pub grid: usize,
    pub shapes: usize,
    pub colors: usize,
    /// Gaussian mixture: number of classes, means spaced on a circle of radius 2.
    pub classes: usize,
    pub variance: f64,
    pub partition: PartitionKind,
    /// Attribute index that drives the non-IID split.
    pub partition_attr: usize,
    pub skew: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Sprites,
            samples_per_client: 200,
            grid: 8,
            shapes: 3,
            colors: 5,
            classes: 4,
            variance: 0.05,
            partition: PartitionKind::ByAttribute,
            partition_attr: 1,
            skew: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: ArchKind,
    /// Channel widths for smallconv.
    pub widths: [usize; 2],
    /// Hidden layer widths for mlp.
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { arch: ArchKind::Smallconv, widths: [8, 16], hidden: vec![128, 128, 128], time_embed_dim: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples generated per client for client-side FD; 0 means the client's whole dataset.
    pub client_samples: usize,
    /// Server intermediates scored against pooled data; 0 means all of it.
    pub intermediate_samples: usize,
    /// Per-side sample cap of each inversion attack.
    pub inversion_samples: usize,
    pub probe_split: f64,
    pub probe_epochs: usize,
    pub probe_learning_rate: f64,
    pub probe_l2: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            client_samples: 0,
            intermediate_samples: 0,
            inversion_samples: 200,
            probe_split: p.split,
            probe_epochs: p.epochs,
            probe_learning_rate: p.learning_rate,
            probe_l2: p.l2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Run directory name under the output root.
    pub name: String,
    /// Output root; overridden by `COLLAFUSE_OUT` and `--out`.
    pub output_dir: PathBuf,
    /// Diffusion length T.
    pub steps: usize,
    pub cuts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub clients: usize,
    pub rounds: u32,
    pub batches_per_round: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-timestep loss weights, `guidance[t - 1]`; empty means all ones.
    pub guidance: Vec<f64>,
    pub literal_renoise: bool,
    pub no_remap: bool,
    /// Bound on the predicted clean sample while sampling; 0 disables.
    pub clip_x0: f64,
    pub wire: WireKind,
    /// Sweep cells run concurrently.
    pub jobs: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Quick)
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let quick = Self {
            name: "quick".into(),
            output_dir: PathBuf::from("runs"),
            steps: 100,
            cuts: default_cuts(100),
            seeds: vec![0, 1, 2, 3, 4],
            clients: 5,
            rounds: 20,
            batches_per_round: 50,
            batch_size: 8,
            learning_rate: 1e-3,
            guidance: Vec::new(),
            literal_renoise: false,
            no_remap: false,
            clip_x0: 1.0,
            wire: WireKind::F32,
            jobs: 1,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
        };
        match p {
            Preset::Quick => quick,
            Preset::Full => Self {
                name: "full".into(),
                steps: 1000,
                cuts: default_cuts(1000),
                rounds: 200,
                dataset: DatasetConfig { grid: 16, shapes: 5, colors: 8, samples_per_client: 1000, ..quick.dataset.clone() },
                model: ModelConfig { widths: [16, 32], ..quick.model.clone() },
                ..quick
            },
        }
    }

    /// Preset values overlaid with a TOML document.
    pub fn from_toml(text: &str, base: Preset) -> Result<Self> {
        let base = toml::Value::try_from(Self::preset(base)).map_err(|e| CliError::Config(e.to_string()))?;
        let over: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        merge(base, over).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path, base: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if let Some(c) = self.cuts.iter().find(|&&c| c > self.steps) {
            return bad(format!("cut {c} outside [0, {}]", self.steps));
        }
        if self.cuts.is_empty() || self.seeds.is_empty() {
            return bad("cuts and seeds must be non-empty".into());
        }
        if self.batch_size == 0 || self.batches_per_round == 0 {
            return bad("batch_size and batches_per_round must be at least 1".into());
        }
        if self.clients < 2 {
            return bad("at least two clients required".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if !(self.clip_x0 >= 0.0) {
            return bad("clip_x0 must be non-negative".into());
        }
        if !self.guidance.is_empty() && self.guidance.len() != self.steps {
            return bad(format!("guidance has {} entries, expected {}", self.guidance.len(), self.steps));
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("invalid run name {:?}", self.name));
        }
        let d = &self.dataset;
        if !(0.0..=1.0).contains(&d.skew) {
            return bad(format!("skew {} outside [0, 1]", d.skew));
        }
        if d.samples_per_client < 2 {
            return bad("samples_per_client must be at least 2".into());
        }
        if d.partition == PartitionKind::ByAttribute && d.partition_attr >= self.num_attrs() {
            return bad(format!("partition_attr {} out of range", d.partition_attr));
        }
        for &c in &self.cuts {
            self.session_config(c).validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn num_attrs(&self) -> usize {
        match self.dataset.kind {
            DataKind::Sprites => 2,
            DataKind::Gauss2d => 1,
        }
    }

    pub fn dataset_kind(&self) -> DatasetKind {
        match self.dataset.kind {
            DataKind::Sprites => DatasetKind::Sprites,
            DataKind::Gauss2d => DatasetKind::Gauss2d,
        }
    }

    pub fn partition_mode(&self) -> PartitionMode {
        match self.dataset.partition {
            PartitionKind::Iid => PartitionMode::Iid,
            PartitionKind::ByAttribute => PartitionMode::ByAttribute { attr: self.dataset.partition_attr },
        }
    }

    pub fn arch(&self) -> ArchSpec {
        match self.model.arch {
            ArchKind::Mlp => ArchSpec::Mlp { hidden: self.model.hidden.clone() },
            ArchKind::Smallconv => ArchSpec::SmallConv { widths: self.model.widths },
        }
    }

    pub fn probe_config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            split: self.eval.probe_split,
            epochs: self.eval.probe_epochs,
            learning_rate: self.eval.probe_learning_rate,
            l2: self.eval.probe_l2,
            seed,
        }
    }

    pub fn session_config(&self, cut: usize) -> SessionConfig {
        let mut s = SessionConfig::new(self.steps, cut);
        s.renoise = if self.literal_renoise { RenoiseMode::Literal } else { RenoiseMode::Marginal };
        s.no_remap = self.no_remap;
        s.learning_rate = self.learning_rate;
        s.batch_size = self.batch_size;
        s.batches_per_round = self.batches_per_round;
        s.guidance = if self.guidance.is_empty() { Guidance::Uniform } else { Guidance::Table(self.guidance.clone()) };
        s.wire = match self.wire {
            WireKind::F32 => WirePrecision::F32,
            WireKind::F64 => WirePrecision::F64,
        };
        s.clip_x0 = (self.clip_x0 > 0.0).then_some(self.clip_x0);
        s
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }
}

/// `{0, T/10, T/5, 3T/10, 2T/5, 3T/5, 4T/5, T}`.
pub fn default_cuts(steps: usize) -> Vec<usize> {
    [0, 1, 2, 3, 4, 6, 8, 10].iter().map(|k| k * steps / 10).collect()
}

fn merge(base: toml::Value, over: toml::Value) -> toml::Value {
    match (base, over) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, o) => o,
    }
}
