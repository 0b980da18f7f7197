//! Run configuration: a TOML file with one section per concern. Every field
//! has a default, so an empty file is a valid config.

use std::path::{Path, PathBuf};

use condiff::experiment::{Metric, ModelSpec, Variant};
use condiff::neurise::TrainConfig;
use condiff::theory::PerturbationMode;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub guard_bits: u32,
    pub threads: Option<usize>,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub sample: SampleSection,
    pub verify: VerifySection,
    pub sweep: SweepSection,
    pub experiment: ExperimentSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            guard_bits: 24,
            threads: None,
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            train: condiff::experiment::pipeline_train_config(),
            data: DataSection::default(),
            sample: SampleSection::default(),
            verify: VerifySection::default(),
            sweep: SweepSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    EaIsing,
    EaPotts,
    /// A model JSON written by `gen-data`.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub side: usize,
    pub p: usize,
    pub coupling: f64,
    pub field: f64,
    /// Seed for the random couplings; derived from the run seed when unset.
    pub seed: Option<u64>,
    pub path: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::EaIsing,
            side: 4,
            p: 3,
            coupling: 1.2,
            field: 0.05,
            seed: None,
            path: None,
        }
    }
}

impl ModelSection {
    pub fn spec(&self) -> Result<ModelSpec, CliError> {
        let (side, coupling, field) = (self.side, self.coupling, self.field);
        match self.kind {
            ModelKind::EaIsing => Ok(ModelSpec::EaIsing { side, coupling, field }),
            ModelKind::EaPotts => Ok(ModelSpec::EaPotts { side, p: self.p, coupling, field }),
            ModelKind::File => Err(CliError::Config("experiments need a generated model kind, not a file".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub epsilon: f64,
    pub sweeps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { epsilon: 0.0, sweeps: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_test: usize,
    /// Fall back to Glauber dynamics when the state space exceeds the guard.
    pub allow_mcmc: bool,
    pub burn_in: usize,
    pub thinning: usize,
    /// Alphabet size for headerless CSV input.
    pub p: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_train: 10_000,
            n_test: 10_000,
            allow_mcmc: false,
            burn_in: 1000,
            thinning: 10,
            p: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub n: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { n: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub magnitudes: Vec<f64>,
    pub draws: usize,
    pub mode: PerturbationMode,
    pub noise_samples: Vec<usize>,
    pub noise_seeds: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            magnitudes: vec![0.0, 0.01, 0.05, 0.1],
            draws: 100,
            mode: PerturbationMode::MixWithUniform,
            noise_samples: vec![100, 1000, 10_000],
            noise_seeds: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub budget: usize,
    pub tune_noise: bool,
    pub max_sweeps: usize,
    pub validation_fraction: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            budget: 10,
            tune_noise: false,
            max_sweeps: 3,
            validation_fraction: 0.2,
        }
    }
}

/// Overrides for the named pipelines; unset fields keep the pipeline default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub grid: Option<Vec<usize>>,
    pub trials: Option<usize>,
    pub models: Option<usize>,
    pub n_generated: Option<usize>,
    pub metrics: Option<Vec<Metric>>,
    pub variants: Option<Vec<Variant>>,
    /// Use `[model]` instead of the pipeline's own lattice.
    pub use_model_section: bool,
    /// Use `[train]` instead of the pipeline's own training settings.
    pub use_train_section: bool,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.guard_bits == 0 || self.guard_bits > 62 {
            return Err(CliError::Config(format!("guard_bits {} outside 1..=62", self.guard_bits)));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be positive".into()));
        }
        if self.data.n_train == 0 || self.data.n_test == 0 || self.sample.n == 0 {
            return Err(CliError::Config("sample counts must be positive".into()));
        }
        if self.model.kind == ModelKind::File && self.model.path.is_none() {
            return Err(CliError::Config("model kind \"file\" needs model.path".into()));
        }
        if let Some(path) = &self.model.path {
            if self.model.kind == ModelKind::File && !path.exists() {
                return Err(CliError::Io(format!("model file {} does not exist", path.display())));
            }
        }
        self.train.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = Config::default();
        c.seed = 42;
        c.model.kind = ModelKind::EaPotts;
        c.experiment.grid = Some(vec![100, 1000]);
        c.experiment.metrics = Some(vec![Metric::Tv, Metric::Mmd]);
        c.verify.mode = PerturbationMode::RandomSimplexJitter;
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn sections_parse() {
        let c = Config::parse(
            "seed = 3\n[model]\nkind = \"ea-potts\"\nside = 2\n[schedule]\nepsilon = 0.5\nsweeps = 2\n\
             [train]\nwidth = 128\ntopology = \"global\"\n[experiment]\ntrials = 5\n",
        )
        .unwrap();
        assert_eq!(c.model.kind, ModelKind::EaPotts);
        assert_eq!(c.schedule.sweeps, 2);
        assert_eq!(c.train.width, 128);
        assert_eq!(c.experiment.trials, Some(5));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(Config::parse("[model]\nsize = 3\n"), Err(CliError::Config(_))));
        assert!(matches!(Config::parse("[train]\nwidth = 7\n").unwrap().validate(), Err(CliError::Config(_))));
        assert!(Config::parse("guard_bits = 0\n").unwrap().validate().is_err());
        assert!(Config::parse("[model]\nkind = \"file\"\n").unwrap().validate().is_err());
    }
}
