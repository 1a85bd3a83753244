//! Run configuration: one TOML file covering data, model, input flags and schedules.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use memetrn::captioner::CaptionerConfig;
use memetrn::data::{Lexicon, WorldConfig};
use memetrn::embedding::InputFlags;
use memetrn::text::{ParaphraseConfig, ParaphraseMode};
use memetrn::train::Schedule;
use memetrn::trn::TrnConfig;

/// File name of the resolved config written next to every run's outputs.
pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub size: usize,
    pub min_char_coverage: f64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            size: 400,
            min_char_coverage: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub mode: ParaphraseMode,
    /// Variants per meme: 2, 5 or 10.
    pub k: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mode: ParaphraseMode::Both,
            k: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionerRun {
    pub model: CaptionerConfig,
    pub xe: Schedule,
    pub scst: Schedule,
    /// Corpus CIDEr-D is measured every this many SCST steps to pick the kept checkpoint.
    pub eval_every: usize,
}

impl Default for CaptionerRun {
    fn default() -> Self {
        Self {
            model: CaptionerConfig::default(),
            xe: Schedule {
                steps: 4000,
                batch_size: 10,
                lr: 1e-4,
                lr_end: Some(4e-5),
                seed: 0,
            },
            scst: Schedule {
                steps: 200,
                batch_size: 10,
                lr: 4e-5,
                lr_end: None,
                seed: 0,
            },
            eval_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into every component seed when the config is resolved.
    pub seed: u64,
    /// Worker threads for prediction and for the ablation grid.
    pub threads: usize,
    pub world: WorldConfig,
    pub vocab: VocabConfig,
    pub model: TrnConfig,
    pub flags: InputFlags,
    pub augmentation: AugmentConfig,
    pub detector: Schedule,
    pub captioner: CaptionerRun,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            world: WorldConfig::default(),
            vocab: VocabConfig::default(),
            model: TrnConfig::default(),
            flags: InputFlags::default(),
            augmentation: AugmentConfig::default(),
            detector: Schedule::default(),
            captioner: CaptionerRun::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid config")?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Default config when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Self::default().resolved(),
        }
    }

    /// Propagates the master seed and shared widths, then validates.
    pub fn resolved(mut self) -> Result<Self> {
        self.world.seed = self.seed;
        self.detector.seed = self.seed;
        self.captioner.xe.seed = self.seed;
        self.captioner.scst.seed = self.seed;
        if self.model.d_o != self.world.d_o || self.captioner.model.d_o != self.world.d_o {
            bail!(
                "region width mismatch: world.d_o={}, model.d_o={}, captioner.model.d_o={}",
                self.world.d_o,
                self.model.d_o,
                self.captioner.model.d_o
            );
        }
        if self.threads == 0 {
            bail!("threads must be at least 1");
        }
        if self.captioner.eval_every == 0 {
            bail!("captioner.eval_every must be at least 1");
        }
        self.world.validate()?;
        self.detector.validate()?;
        self.captioner.xe.validate()?;
        self.captioner.scst.validate()?;
        self.model.validate()?;
        self.captioner.model.validate()?;
        self.paraphrase(&self.world.lexicon()).validate()?;
        Ok(self)
    }

    pub fn paraphrase(&self, lexicon: &Lexicon) -> ParaphraseConfig {
        ParaphraseConfig {
            mode: self.augmentation.mode,
            k: self.augmentation.k,
            seed: self.seed,
            lexicon: lexicon.synonyms.clone(),
            protected: lexicon.protected.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(RESOLVED_CONFIG), self.to_toml()?)?;
        Ok(())
    }
}
