//! Run configuration: a TOML file plus `--set section.key=value` overrides,
//! with unknown keys rejected.

use std::path::{Path, PathBuf};

use db2transf::data::SynthSpec;
use db2transf::model::ModelConfig;
use db2transf::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            model: ModelSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub lookback: usize,
    pub horizon: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub levels: usize,
    pub depth: usize,
    /// 0 selects `4 · model_dim`.
    pub ffn_dim: usize,
    pub init_sigma: f64,
    pub instance_norm: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            lookback: m.lookback,
            horizon: m.horizon,
            model_dim: m.model_dim,
            heads: m.heads,
            levels: m.levels,
            depth: m.depth,
            ffn_dim: 0,
            init_sigma: m.init_sigma,
            instance_norm: m.instance_norm,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, channels: usize) -> ModelConfig {
        ModelConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            channels,
            model_dim: self.model_dim,
            heads: self.heads,
            levels: self.levels,
            depth: self.depth,
            ffn_dim: if self.ffn_dim == 0 { 4 * self.model_dim } else { self.ffn_dim },
            init_sigma: self.init_sigma,
            instance_norm: self.instance_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr0: f64,
    pub decay_gamma: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr0: t.lr0,
            decay_gamma: t.decay_gamma,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: t.seed,
        }
    }
}

impl From<&TrainSection> for TrainConfig {
    fn from(t: &TrainSection) -> Self {
        TrainConfig {
            lr0: t.lr0,
            decay_gamma: t.decay_gamma,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// CSV file; exactly one of `csv` and `synth` must be given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    pub ratios: (f64, f64, f64),
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSection>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            csv: None,
            ratios: db2transf::data::DEFAULT_RATIOS,
            synth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub length: usize,
    pub channels: usize,
    pub frequencies: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub noise_std: f64,
    pub trend_slope: f64,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthSpec::default();
        Self {
            length: s.length,
            channels: s.channels,
            frequencies: s.frequencies,
            amplitudes: s.amplitudes,
            noise_std: s.noise_std,
            trend_slope: s.trend_slope,
            seed: s.seed,
        }
    }
}

impl From<&SynthSection> for SynthSpec {
    fn from(s: &SynthSection) -> Self {
        SynthSpec {
            length: s.length,
            channels: s.channels,
            frequencies: s.frequencies.clone(),
            amplitudes: s.amplitudes.clone(),
            noise_std: s.noise_std,
            trend_slope: s.trend_slope,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Ascending lookback lengths to time.
    pub lookbacks: Vec<usize>,
    pub batch_size: usize,
    pub channels: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            lookbacks: vec![128, 256, 512, 1024],
            batch_size: 16,
            channels: 7,
            repeats: 5,
            seed: 0,
        }
    }
}

/// Where the series comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Synth(SynthSpec),
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides, and deserialises
    /// strictly.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("config: {}", e.message())))
    }

    pub fn data_source(&self) -> Result<DataSource, CliError> {
        match (&self.data.csv, &self.data.synth) {
            (Some(_), Some(_)) => Err(CliError::Config(
                "data.csv and [data.synth] are mutually exclusive".into(),
            )),
            (None, None) => Err(CliError::Config(
                "data.csv is required (or provide a [data.synth] table)".into(),
            )),
            (Some(p), None) if !p.is_file() => Err(CliError::Config(format!(
                "data.csv: file {} does not exist",
                p.display()
            ))),
            (Some(p), None) => Ok(DataSource::Csv(p.clone())),
            (None, Some(s)) => Ok(DataSource::Synth(s.into())),
        }
    }

    /// Every key with its default, as TOML, for `--help`.
    pub fn defaults_help() -> String {
        let mut shown = RunConfig::default();
        shown.data.csv = Some(PathBuf::from("<path to csv>"));
        shown.data.synth = Some(SynthSection::default());
        let body = toml::to_string(&shown).expect("defaults serialise");
        format!(
            "CONFIG KEYS (TOML file via --config, or --set section.key=value):\n\
             model.ffn_dim = 0 means 4 x model_dim; exactly one of data.csv and [data.synth] is required.\n\n{body}"
        )
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().filter(|l| !l.is_empty()).ok_or_else(|| {
        CliError::Config(format!("override `{spec}` has an empty key"))
    })?;
    let mut cursor = table;
    for part in parts {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{spec}`: `{part}` is not a table")))?;
    }
    cursor.insert(leaf.to_string(), value);
    Ok(())
}
