//! One JSON document configuring every stage of the pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clsnet::ClsConfig;
use crate::error::{Error, Result};
use crate::evaluation::{CvMode, CvOptions};
use crate::inference::InferenceOptions;
use crate::postclassify::PostOptions;
use crate::segnet::SegNetConfig;
use crate::volume::Phase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub seg: SegNetConfig,
    pub cls: ClsConfig,
    pub inference: InferenceOptions,
    pub post: PostOptions,
    /// Cross-validation folds.
    pub k: usize,
    pub mode: CvMode,
    pub phases: Vec<Phase>,
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            seg: SegNetConfig::default(),
            cls: ClsConfig::default(),
            inference: InferenceOptions::default(),
            post: PostOptions::default(),
            k: 4,
            mode: CvMode::S4c,
            phases: Phase::ALL.to_vec(),
            manifest: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.seg.validate()?;
        self.cls.validate()?;
        self.inference.validate()?;
        if self.k < 2 {
            return Err(Error::InvalidArgument("k must be at least 2".into()));
        }
        Ok(())
    }

    pub fn cv_options(&self) -> CvOptions {
        CvOptions {
            k: self.k,
            seed: self.seed,
            mode: self.mode,
            phases: self.phases.clone(),
            seg: self.seg.clone(),
            cls: self.cls.clone(),
            inference: self.inference,
            post: self.post,
        }
    }
}
