//! Run configuration stored as TOML. Unknown keys are rejected and
//! `schema_version` must match [`SCHEMA_VERSION`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::nets::CnnTrainConfig;
use crate::data::SyntheticSpec;
use crate::denoiser::DenoiserTrainConfig;
use crate::diffusion::ScheduleConfig;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::guidance::GuidanceMode;
use crate::nn::unet::UnetConfig;
use crate::pipeline::EscalationSchedule;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            output_dir: "output".into(),
        }
    }
}

/// Training settings of the auxiliary networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxConfig {
    pub classifier: CnnTrainConfig,
    pub oracle: CnnTrainConfig,
    pub identity: CnnTrainConfig,
    pub encoder: CnnTrainConfig,
}

impl Default for AuxConfig {
    fn default() -> Self {
        // The stripe texture that encodes identity is a weak signal; shorter
        // or slower runs stall near chance.
        let mut identity = CnnTrainConfig::new(4000, 13);
        identity.train.learning_rate = 3e-3;
        Self {
            classifier: CnnTrainConfig::new(1500, 11),
            oracle: CnnTrainConfig::new(2000, 12),
            identity,
            encoder: CnnTrainConfig::new(2000, 14),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainConfig {
    pub p: f64,
    pub mode: GuidanceMode,
    pub escalation: EscalationSchedule,
    pub workers: usize,
    pub chunk_size: usize,
    /// Explain only the first `n` test images when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    pub cout_steps: usize,
    pub sfid_seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            p: 0.93,
            mode: GuidanceMode::Negative,
            escalation: EscalationSchedule::smile(),
            workers: 1,
            chunk_size: 25,
            limit: None,
            cout_steps: 11,
            sfid_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub paths: Paths,
    pub data: SyntheticSpec,
    pub schedule: ScheduleConfig,
    pub unet: UnetConfig,
    pub denoiser: DenoiserTrainConfig,
    pub aux: AuxConfig,
    pub distill: DistillConfig,
    pub explain: ExplainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            paths: Paths::default(),
            data: SyntheticSpec::default(),
            schedule: ScheduleConfig::default(),
            unet: UnetConfig::default(),
            denoiser: DenoiserTrainConfig::default(),
            aux: AuxConfig::default(),
            distill: DistillConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads a config; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.paths.rebase(base);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.data.validate()?;
        let schedule = self.schedule.build()?;
        self.denoiser.train.validate()?;
        for c in [&self.aux.classifier, &self.aux.oracle, &self.aux.identity, &self.aux.encoder] {
            c.train.validate()?;
        }
        self.distill.validate()?;
        self.explain.escalation.validate(&schedule)?;
        if !(self.explain.p > 0.0 && self.explain.p < 1.0) {
            return Err(Error::Config(format!("p must be in (0, 1), got {}", self.explain.p)));
        }
        if self.explain.workers == 0 || self.explain.chunk_size == 0 || self.explain.cout_steps < 2 {
            return Err(Error::Config("workers and chunk_size must be positive, cout_steps at least 2".into()));
        }
        if self.unet.in_channels != self.data.image_shape.channels {
            return Err(Error::Config("denoiser channels differ from the dataset's".into()));
        }
        Ok(())
    }

    /// Derives every seed from one value.
    pub fn reseed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.denoiser.train.seed = seed.wrapping_add(1);
        self.aux.classifier.train.seed = seed.wrapping_add(11);
        self.aux.oracle.train.seed = seed.wrapping_add(12);
        self.aux.identity.train.seed = seed.wrapping_add(13);
        self.aux.encoder.train.seed = seed.wrapping_add(14);
        self.distill.seed = seed.wrapping_add(21);
        self.explain.sfid_seed = seed.wrapping_add(31);
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.paths.checkpoint_dir.join(format!("{name}.ckpt"))
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        for p in [&mut self.data_dir, &mut self.checkpoint_dir, &mut self.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
