//! Run configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use stcopula::ingest::CsvSchema;
use stcopula::interpolate::BBox;
use stcopula::pipeline::ModelConfig;
use stcopula::Granularity;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub observations: PathBuf,
    pub stations: PathBuf,
    pub out_dir: PathBuf,
    pub schema: CsvSchema,
    /// First bucket start; derived from the records when absent.
    pub start: Option<NaiveDate>,
    /// Bucket count; derived from the records when absent.
    pub buckets: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            observations: "observations.csv".into(),
            stations: "stations.csv".into(),
            out_dir: "out".into(),
            schema: CsvSchema::default(),
            start: None,
            buckets: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    /// Grid extent; the station extent padded by `pad_deg` when absent.
    pub bbox: Option<BBox>,
    pub pad_deg: f64,
    pub cell_deg: f64,
    /// Bucket indices to render; every bucket when absent.
    pub times: Option<Vec<usize>>,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            bbox: None,
            pad_deg: 0.02,
            cell_deg: 0.02,
            times: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Holdout,
    Loso,
}

impl Protocol {
    pub fn label(self) -> &'static str {
        match self {
            Protocol::Holdout => "holdout",
            Protocol::Loso => "loso",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocols: Vec<Protocol>,
    pub fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocols: vec![Protocol::Holdout, Protocol::Loso],
            fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub granularity: Granularity,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub export: ExportConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            granularity: Granularity::OneMonth,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            export: ExportConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads `path`; relative data paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut cfg.data.observations, &mut cfg.data.stations, &mut cfg.data.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::config("no seed: set `seed` in the config or pass --seed"))
    }

    /// The model configuration with the global seed applied.
    pub fn seeded_model(&self) -> Result<ModelConfig, CliError> {
        let mut m = self.model.clone();
        m.gapfill.seed = self.seed()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.seed()?;
        self.seeded_model()?.validate()?;
        if !(self.export.cell_deg > 0.0) || !(self.export.pad_deg >= 0.0) {
            return Err(CliError::config("export.cell_deg must be positive and export.pad_deg nonnegative"));
        }
        if !(self.eval.fraction > 0.0 && self.eval.fraction < 1.0) {
            return Err(CliError::config(format!("eval.fraction {} is outside (0, 1)", self.eval.fraction)));
        }
        Ok(())
    }
}

pub fn parse_granularity(s: &str) -> Result<Granularity, String> {
    Granularity::parse(s).ok_or_else(|| format!("unknown granularity {s:?} (expected 1m, 2m, 3m or Nd)"))
}
