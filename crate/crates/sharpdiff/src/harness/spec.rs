//! JSON experiment specifications and the fields they describe.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::data::{self, BankConfig, MnistConfig, SpikeConfig, ToyConfig};
use super::experiments::{DetectConfig, LemmaConfig, MitigationConfig, NetShape, ScheduleSpec, SpectrumConfig};
use super::idx;
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::field::{GmmField, ScoreField};
use crate::gmm::{GaussianMixture, MixtureSpec};
use crate::scorenet::{self, Example, NetField, TrainConfig};
use crate::{Error, Result};

/// Seed used when neither the spec nor the command line sets one.
pub const DEFAULT_SEED: u64 = 0;

/// Training data for networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Toy {
        #[serde(default)]
        config: ToyConfig,
        #[serde(default)]
        data_seed: u64,
    },
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        config: MnistConfig,
    },
}

/// Where a score field comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceSpec {
    Toy {
        #[serde(default)]
        config: ToyConfig,
        #[serde(default)]
        data_seed: u64,
    },
    Bank {
        #[serde(default)]
        config: BankConfig,
        #[serde(default)]
        data_seed: u64,
    },
    Spike {
        #[serde(default)]
        config: SpikeConfig,
        #[serde(default)]
        data_seed: u64,
    },
    /// Mixture description in JSON; `memorized` lists the labels to treat as memorized.
    Mixture {
        path: PathBuf,
        #[serde(default)]
        memorized: Vec<String>,
    },
    /// Trained network plus the data it was trained on.
    Checkpoint { path: PathBuf, dataset: DatasetSpec },
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("missing file: {}", p.display())))
    }
}

impl DatasetSpec {
    pub fn check_files(&self) -> Result<()> {
        match self {
            DatasetSpec::Toy { .. } => Ok(()),
            DatasetSpec::Mnist { images, labels, .. } => {
                require_file(images)?;
                require_file(labels)
            }
        }
    }

    pub fn load(&self) -> Result<LoadedData> {
        match self {
            DatasetSpec::Toy { config, data_seed } => {
                let toy = data::build_toy_dataset(config, *data_seed)?;
                let reference = vec![toy.mixture.components()[0].mean().clone()];
                let conditions = toy_conditions(&toy.mixture);
                Ok(LoadedData { examples: toy.examples, reference, conditions, truth: Some(toy.mixture) })
            }
            DatasetSpec::Mnist { images, labels, config } => {
                let set = idx::load_mnist_idx(images, labels)?;
                let ds = data::build_mnist_dataset(&set, config)?;
                Ok(LoadedData {
                    examples: ds.examples,
                    reference: ds.train_points.into_iter().map(DVector::from_vec).collect(),
                    conditions: vec![(ds.general_label, false), (ds.memorized_label, true)],
                    truth: None,
                })
            }
        }
    }
}

fn toy_conditions(mix: &GaussianMixture) -> Vec<(String, bool)> {
    mix.known_labels().into_iter().map(|l| (l.clone(), l == data::SHARP)).collect()
}

/// Examples plus the points used to judge memorization.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub examples: Vec<Example>,
    /// Generations within tau of any of these count as memorized.
    pub reference: Vec<DVector<f64>>,
    /// Condition labels with their memorization flag.
    pub conditions: Vec<(String, bool)>,
    /// Ground-truth mixture when one exists.
    pub truth: Option<GaussianMixture>,
}

/// Either an exact mixture field or a trained network.
pub enum AnyField {
    Gmm(GmmField),
    Net(NetField),
}

impl ScoreField for AnyField {
    fn dim(&self) -> usize {
        match self {
            AnyField::Gmm(f) => f.dim(),
            AnyField::Net(f) => f.dim(),
        }
    }
    fn schedule(&self) -> &NoiseSchedule {
        match self {
            AnyField::Gmm(f) => f.schedule(),
            AnyField::Net(f) => f.schedule(),
        }
    }
    fn score(&self, x: &DVector<f64>, t: usize, cond: Option<&str>) -> Result<DVector<f64>> {
        match self {
            AnyField::Gmm(f) => f.score(x, t, cond),
            AnyField::Net(f) => f.score(x, t, cond),
        }
    }
    fn hvp(&self, x: &DVector<f64>, t: usize, cond: Option<&str>, v: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            AnyField::Gmm(f) => f.hvp(x, t, cond, v),
            AnyField::Net(f) => f.hvp(x, t, cond, v),
        }
    }
    fn score_and_hvp(
        &self,
        x: &DVector<f64>,
        t: usize,
        cond: Option<&str>,
        v: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        match self {
            AnyField::Gmm(f) => f.score_and_hvp(x, t, cond, v),
            AnyField::Net(f) => f.score_and_hvp(x, t, cond, v),
        }
    }
    fn jacobian(&self, x: &DVector<f64>, t: usize, cond: Option<&str>) -> Result<DMatrix<f64>> {
        match self {
            AnyField::Gmm(f) => f.jacobian(x, t, cond),
            AnyField::Net(f) => f.jacobian(x, t, cond),
        }
    }
}

/// A field together with its memorization bookkeeping.
pub struct LoadedSource {
    pub field: AnyField,
    pub conditions: Vec<(String, bool)>,
    pub reference: Vec<DVector<f64>>,
}

impl LoadedSource {
    pub fn gmm(&self) -> Option<&GmmField> {
        match &self.field {
            AnyField::Gmm(g) => Some(g),
            AnyField::Net(_) => None,
        }
    }

    pub fn memorized(&self) -> Vec<String> {
        self.conditions.iter().filter(|c| c.1).map(|c| c.0.clone()).collect()
    }

    pub fn non_memorized(&self) -> Vec<String> {
        self.conditions.iter().filter(|c| !c.1).map(|c| c.0.clone()).collect()
    }
}

impl SourceSpec {
    pub fn check_files(&self) -> Result<()> {
        match self {
            SourceSpec::Mixture { path, .. } => require_file(path),
            SourceSpec::Checkpoint { path, dataset } => {
                require_file(path)?;
                dataset.check_files()
            }
            _ => Ok(()),
        }
    }

    pub fn is_network(&self) -> bool {
        matches!(self, SourceSpec::Checkpoint { .. })
    }

    pub fn load(&self, schedule: &NoiseSchedule) -> Result<LoadedSource> {
        let gmm = |mix: GaussianMixture| AnyField::Gmm(GmmField::new(mix, schedule.clone()));
        match self {
            SourceSpec::Toy { config, data_seed } => {
                let toy = data::build_toy_dataset(config, *data_seed)?;
                let reference = vec![toy.mixture.components()[0].mean().clone()];
                let conditions = toy_conditions(&toy.mixture);
                Ok(LoadedSource { field: gmm(toy.mixture), conditions, reference })
            }
            SourceSpec::Bank { config, data_seed } => {
                let bank = data::build_condition_bank(config, *data_seed)?;
                let reference = bank.mixture.components().iter().map(|c| c.mean().clone()).collect();
                Ok(LoadedSource { field: gmm(bank.mixture), conditions: bank.conditions, reference })
            }
            SourceSpec::Spike { config, data_seed } => {
                let toy = data::build_spike_toy(config, *data_seed)?;
                let mut conditions = vec![(data::MEMORIZED.to_string(), true)];
                conditions.extend(toy.controls.iter().map(|c| (c.clone(), false)));
                Ok(LoadedSource { field: gmm(toy.mixture), conditions, reference: vec![toy.spike] })
            }
            SourceSpec::Mixture { path, memorized } => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let spec: MixtureSpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                let mix = GaussianMixture::from_spec(&spec)?;
                let labels = mix.known_labels();
                if let Some(bad) = memorized.iter().find(|m| !labels.contains(m)) {
                    return Err(Error::Config(format!("memorized label {bad:?} is not in the mixture")));
                }
                let conditions = labels.iter().map(|l| (l.clone(), memorized.contains(l))).collect();
                let reference = mix.components().iter().map(|c| c.mean().clone()).collect();
                Ok(LoadedSource { field: gmm(mix), conditions, reference })
            }
            SourceSpec::Checkpoint { path, dataset } => {
                let (net, header) = scorenet::load_checkpoint(path, None)?;
                if header.schedule_hash != schedule.digest() {
                    return Err(Error::Config(format!("{} was trained with a different noise schedule", path.display())));
                }
                let data = dataset.load()?;
                if net.config().dim != data.examples[0].x.len() {
                    return Err(Error::Config("checkpoint dimension differs from the dataset".into()));
                }
                Ok(LoadedSource {
                    field: AnyField::Net(NetField::new(net, schedule.clone())),
                    conditions: data.conditions,
                    reference: data.reference,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmasSpec {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub lemmas: LemmaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSpec {
    #[serde(default)]
    pub seed: Option<u64>,
    pub source: SourceSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub spectrum: SpectrumConfig,
    /// Memorization distance; calibrated from the generations when absent.
    #[serde(default)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default)]
    pub seed: Option<u64>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub net: NetShape,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectSpec {
    #[serde(default)]
    pub seed: Option<u64>,
    pub source: SourceSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub detect: DetectConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SailSpec {
    #[serde(default)]
    pub seed: Option<u64>,
    pub source: SourceSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub mitigation: MitigationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    #[serde(default)]
    pub seed: Option<u64>,
    pub source: SourceSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    /// Condition label; unconditional when absent.
    #[serde(default)]
    pub condition: Option<String>,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

fn default_count() -> usize {
    100
}

macro_rules! seeded {
    ($($t:ty),*) => {$(
        impl $t {
            pub fn resolved_seed(&self, cli: Option<u64>) -> u64 {
                cli.or(self.seed).unwrap_or(DEFAULT_SEED)
            }
        }
    )*};
}
seeded!(LemmasSpec, SpectrumSpec, TrainSpec, DetectSpec, SailSpec, SampleSpec);

/// Parses a spec, rejecting unknown keys.
pub fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}
