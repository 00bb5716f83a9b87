//! JSON configuration schema shared by the CLI and the experiment runner.
//!
//! One document describes data layout, encoder, model stack, and training.
//! Unknown keys are rejected so a run is fully described by its config file
//! plus seeds.

use serde::{Deserialize, Serialize};

use crate::bayes::TrainConfig;
use crate::data::{CsvSchema, DistanceMetric, Frequency};
use crate::encoder::{EncoderConfig, GatConfig, SeasonalPeriod};
use crate::error::{Error, Result};
use crate::gated::StackConfig;

/// Data layout and graph options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Covariate column names, in CSV order.
    pub covariates: Vec<String>,
    /// `hourly`, `daily`, or `Nmin`.
    pub frequency: String,
    /// Gaussian kernel scale; defaults to the median pairwise distance.
    pub sigma_d: Option<f64>,
    /// Great-circle distances instead of plain Euclidean degrees.
    pub haversine: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            covariates: Vec::new(),
            frequency: "hourly".into(),
            sigma_d: None,
            haversine: false,
        }
    }
}

impl DataSection {
    pub fn csv_schema(&self) -> Result<CsvSchema> {
        Ok(CsvSchema {
            covariates: self.covariates.clone(),
            frequency: Frequency::parse(&self.frequency)?,
        })
    }

    pub fn metric(&self) -> DistanceMetric {
        if self.haversine {
            DistanceMetric::Haversine
        } else {
            DistanceMetric::Euclidean
        }
    }
}

/// Encoder options; `periods` and `harmonics` are parallel arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub periods: Vec<u32>,
    pub harmonics: Vec<u32>,
    /// Add the annual harmonic family when the span covers a year.
    pub auto_annual: bool,
    pub fourier_k: u32,
    pub gat_heads: usize,
    pub gat_dim: usize,
    pub gat_out_dim: usize,
    pub ca_reduction: usize,
    pub freeze_channel_stats: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            periods: vec![24, 168],
            harmonics: vec![4, 3],
            auto_annual: true,
            fourier_k: 6,
            gat_heads: 4,
            gat_dim: 8,
            gat_out_dim: 8,
            ca_reduction: 8,
            freeze_channel_stats: false,
        }
    }
}

impl EncoderSection {
    /// Resolve into an encoder config for a training span (in steps).
    pub fn resolve(&self, span_steps: i64) -> Result<EncoderConfig> {
        if self.periods.len() != self.harmonics.len() {
            return Err(Error::Config(format!(
                "periods ({}) and harmonics ({}) must have equal length",
                self.periods.len(),
                self.harmonics.len()
            )));
        }
        let periods = self
            .periods
            .iter()
            .zip(&self.harmonics)
            .map(|(&p, &h)| SeasonalPeriod::new(p, h))
            .collect();
        let mut cfg = EncoderConfig {
            periods,
            fourier_k: self.fourier_k,
            gat: GatConfig {
                heads: self.gat_heads,
                head_dim: self.gat_dim,
                out_dim: self.gat_out_dim,
            },
            ca_reduction: self.ca_reduction,
            freeze_channel_stats: self.freeze_channel_stats,
        };
        if self.auto_annual {
            cfg = cfg.with_annual_if_spanned(span_steps);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Stack depth and width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub cglu_layers: usize,
    pub hidden_dim: usize,
    pub ca_reduction: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            cglu_layers: 2,
            hidden_dim: 64,
            ca_reduction: 8,
        }
    }
}

impl ModelSection {
    pub fn stack(&self) -> StackConfig {
        StackConfig {
            layers: self.cglu_layers,
            hidden: self.hidden_dim,
            ca_reduction: self.ca_reduction,
        }
    }
}

/// Full run configuration for `train`/`predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub model: ModelSection,
    pub training: TrainConfig,
    #[serde(default = "default_interval_level")]
    pub interval_level: f64,
}

pub(crate) fn default_interval_level() -> f64 {
    0.95
}

impl RunConfig {
    pub fn from_json(raw: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&raw)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.model.stack().validate()?;
        if !(0.0 < self.interval_level && self.interval_level < 1.0) {
            return Err(Error::Config(format!(
                "interval_level {} outside (0,1)",
                self.interval_level
            )));
        }
        Ok(())
    }
}
