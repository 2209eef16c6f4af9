//! Declarative experiment configuration: dataset + model + constraint +
//! training, in one versioned JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate, load_csv, GeneratorConfig, TimeSeries};
use crate::error::{Error, Result};
use crate::spectral::{SpectralConstraint, TimeMode};
use crate::training::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Either a synthetic generator or a user-supplied CSV. Exactly one of the
/// two fields must be present.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct DatasetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Koopman,
    Dmd,
    Dmdf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default)]
    pub kind: ModelKind,
    pub koopman_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_sizes: Vec<usize>,
    #[serde(default)]
    pub time_mode: TimeMode,
}

fn default_hidden() -> Vec<usize> {
    vec![4]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dataset: DatasetSpec,
    /// Ground-truth angular frequencies for frequency-error metrics;
    /// falls back to the generator's known frequencies when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_frequencies: Option<Vec<f64>>,
    pub model: ModelSpec,
    pub constraint: SpectralConstraint,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_seeds() -> usize {
    10
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema version {}",
                self.schema_version
            )));
        }
        match (&self.dataset.generator, &self.dataset.csv_path) {
            (Some(g), None) => g.validate()?,
            (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "dataset must specify exactly one of 'generator' or 'csv_path'".into(),
                ))
            }
        }
        if self.n_seeds < 1 {
            return Err(Error::Config("n_seeds must be >= 1".into()));
        }
        if self.model.kind != ModelKind::Dmd {
            self.constraint.validate(self.effective_koopman_dim()?)?;
        }
        self.training.validate()?;
        Ok(())
    }

    /// DMDF forces K = M; otherwise the declared Koopman dimension.
    pub fn effective_koopman_dim(&self) -> Result<usize> {
        Ok(self.model.koopman_dim)
    }

    /// Resolve the dataset for one seed. Generator-backed datasets are
    /// regenerated with the run seed (each run sees its own draw of the
    /// data); CSV datasets are shared across seeds.
    pub fn resolve_series(&self, seed: u64) -> Result<TimeSeries> {
        match (&self.dataset.generator, &self.dataset.csv_path) {
            (Some(g), None) => {
                let mut cfg = g.clone();
                cfg.rng_seed = seed;
                generate(&cfg)
            }
            (None, Some(path)) => load_csv(path),
            _ => Err(Error::Config("invalid dataset specification".into())),
        }
    }

    /// Ground-truth frequencies: explicit config value, else whatever the
    /// generator knows in closed form.
    pub fn known_frequencies(&self) -> Option<Vec<f64>> {
        if let Some(f) = &self.true_frequencies {
            return Some(f.clone());
        }
        self.dataset
            .generator
            .as_ref()
            .and_then(|g| g.known_frequencies())
    }

    /// Base name for output files.
    pub fn run_name(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        match (&self.dataset.generator, &self.dataset.csv_path) {
            (Some(g), _) => g.system.name().to_string(),
            (_, Some(path)) => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "experiment".into()),
            _ => "experiment".into(),
        }
    }
}
