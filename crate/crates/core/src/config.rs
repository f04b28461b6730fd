//! Experiment configuration.
//!
//! A single TOML file; every key is optional and falls back to the standard
//! configuration. Sub-seeds for each stage are derived from the top-level
//! `seed`, so one number reproduces a whole run. The resolved configuration
//! (defaults filled in) is written next to the outputs of every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{ReaderProfile, SplitSpec, StrataConfig, DEFAULT_FNR, DEFAULT_FPR};
use crate::error::{Error, Result};
use crate::fusion::{default_classifier_schedule, ClassifierArch};
use crate::imageproc::{AugmentSpec, ClaheMode};
use crate::loss::{FocalParams, TaskWeights};
use crate::mtlnet::{MtlArch, Stage, TrainSchedule};
use crate::rng::derive;
use crate::triage::TriageConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReaderConfig {
    pub fnr: f64,
    pub fpr: f64,
    pub annotation_noise: f64,
    pub density_noise: f64,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        Self { fnr: DEFAULT_FNR, fpr: DEFAULT_FPR, annotation_noise: 0.1, density_noise: 3.0 }
    }
}

impl ReaderConfig {
    pub fn profile(&self, strata: &StrataConfig) -> ReaderProfile {
        let mut p = ReaderProfile::calibrated(strata, self.fnr, self.fpr);
        p.annotation_noise = self.annotation_noise;
        p.density_noise = self.density_noise;
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n: usize,
    pub strata: StrataConfig,
    pub reader: ReaderConfig,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self { n: 8162, strata: StrataConfig::default(), reader: ReaderConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub fractions: [f64; 4],
    pub holdout: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self { fractions: s.fractions, holdout: s.holdout }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtlConfig {
    pub arch: MtlArch,
    pub schedule: TrainSchedule,
    pub weights: TaskWeights,
    pub focal: FocalParams,
    pub augment: AugmentSpec,
    /// Replace per-image standardization with training-set statistics.
    pub dataset_standardization: bool,
    /// Augmented copies per view at inference; 0 means nominal preprocessing only.
    pub tta: usize,
}

impl Default for MtlConfig {
    fn default() -> Self {
        Self {
            arch: MtlArch::default(),
            schedule: TrainSchedule::default(),
            weights: TaskWeights { diagnosis: 1.0, sign: 0.1, suspicion: 0.1, conspicuity: 0.1, density: 0.6, age: 0.1 },
            focal: FocalParams::default(),
            augment: AugmentSpec {
                allow_vflip: false,
                max_rotation: 5.0,
                max_shear: 0.02,
                max_zoom: 0.02,
                max_shift: 0.02,
                clahe: ClaheMode::Off,
                ..AugmentSpec::default()
            },
            dataset_standardization: true,
            tta: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub arch: ClassifierArch,
    pub schedule: TrainSchedule,
    pub focal: FocalParams,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { arch: ClassifierArch::default(), schedule: default_classifier_schedule(), focal: FocalParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Random allocations averaged for the baseline row.
    pub baseline_draws: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { baseline_draws: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub cohort: CohortConfig,
    pub split: SplitConfig,
    pub mtl: MtlConfig,
    pub classifier: ClassifierConfig,
    pub triage: TriageConfig,
    pub report: ReportConfig,
}

/// Tags of the per-stage seeds derived from the top-level seed.
pub mod seed_tag {
    pub const COHORT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const MTL: u64 = 3;
    pub const MTO: u64 = 4;
    pub const CLASSIFIER: u64 = 5;
    pub const TRIAGE: u64 = 6;
    pub const BASELINE: u64 = 7;
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Stage seeds filled in from `seed`, then validated.
    pub fn resolved(mut self) -> Result<Self> {
        use seed_tag::*;
        self.mtl.schedule.seed = self.stage_seed(MTL);
        self.classifier.schedule.seed = self.stage_seed(CLASSIFIER);
        self.triage.seed = self.stage_seed(TRIAGE);
        self.validate()?;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.resolved()
    }

    /// Derived seed of one stage, kept below 2^63 so it fits a TOML integer.
    pub fn stage_seed(&self, tag: u64) -> u64 {
        derive(self.seed, &[tag]) >> 1
    }

    pub fn cohort_seed(&self) -> u64 {
        self.stage_seed(seed_tag::COHORT)
    }

    pub fn mto_seed(&self) -> u64 {
        self.stage_seed(seed_tag::MTO)
    }

    pub fn baseline_seed(&self) -> u64 {
        self.stage_seed(seed_tag::BASELINE)
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { fractions: self.split.fractions, holdout: self.split.holdout, seed: self.stage_seed(seed_tag::SPLIT) }
    }

    pub fn reader_profile(&self) -> ReaderProfile {
        self.cohort.reader.profile(&self.cohort.strata)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.cohort.strata.validate().map_err(cfg_err)?;
        self.reader_profile().validate().map_err(cfg_err)?;
        self.mtl.schedule.validate()?;
        self.mtl.weights.validate().map_err(cfg_err)?;
        self.mtl.augment.validate()?;
        if self.mtl.arch.hidden.is_empty() || self.mtl.arch.input == 0 {
            return Err(Error::Config("mtl.arch needs an input size and at least one hidden layer".into()));
        }
        self.classifier.schedule.validate()?;
        if self.classifier.schedule.batch_size % 2 != 0 {
            return Err(Error::Config("classifier batch size must be even for balanced batches".into()));
        }
        self.triage.validate()?;
        if self.report.baseline_draws == 0 {
            return Err(Error::Config("report.baseline_draws must be positive".into()));
        }
        Ok(())
    }
}

/// A small configuration for smoke runs and tests: a few hundred patients
/// and short schedules.
pub fn smoke_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig { seed, ..ExperimentConfig::default() };
    c.cohort.n = 600;
    c.split.holdout = 120;
    c.mtl.arch.hidden = vec![32, 16];
    c.mtl.schedule.stages = vec![Stage { lr: 3e-3, epochs: 2 }, Stage { lr: 3e-4, epochs: 1 }];
    c.mtl.tta = 2;
    c.classifier.schedule.stages = vec![Stage { lr: 3e-3, epochs: 3 }];
    c.triage.delta = 1.0;
    c.triage.train.epochs = 3;
    c.report.baseline_draws = 10;
    c
}
