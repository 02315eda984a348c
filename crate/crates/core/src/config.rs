//! The JSON run configuration: one document with a section per subsystem.
//! Unknown keys are rejected and every omitted field takes its default, so
//! serializing a loaded config yields the fully materialized version.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::FpnConfig;
use crate::sampler::SamplerConfig;
use crate::train::{FinetuneSchedule, LossConfig, PretrainConfig, ProbeConfig};
use crate::volume::PreprocessConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Unlabeled (or labeled) volumes for pre-training.
    pub pretrain_manifest: Option<PathBuf>,
    /// Labeled volumes for probing, fine-tuning and cross-validation.
    pub labeled_manifest: Option<PathBuf>,
    /// Labeled volumes evaluated by `eval` when no cross-validation is requested.
    pub test_manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub sampler: SamplerConfig,
    pub model: FpnConfig,
    pub loss: LossConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneSchedule,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every violation across all sections.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        errs.extend(self.preprocess.validate());
        errs.extend(self.augment.validate());
        errs.extend(self.sampler.validate());
        errs.extend(self.model.validate());
        errs.extend(self.loss.validate());
        errs.extend(self.pretrain.validate());
        if self.model.levels > 0 {
            errs.extend(self.pretrain.patch.validate(self.model.levels));
        }
        errs.extend(self.probe.validate());
        errs.extend(self.finetune.validate());
        errs.extend(self.eval.validate());
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}
