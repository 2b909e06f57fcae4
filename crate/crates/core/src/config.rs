use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CorpusSpec, Split, SynthSpec, TOY_CAP};
use crate::error::{Error, Result};
use crate::eval::Normalization;
use crate::foundation::FoundationConfig;
use crate::nn::ModelConfig;
use crate::train::{OptimSettings, StageSchedule};

/// Batch cap of the paper-scale recipe, in sample points.
pub const PAPER_CAP: usize = 400_000;

/// Peak learning rate of the toy recipe.
pub const TOY_LR_PEAK: f64 = 4.0e-2;
pub const TOY_WARMUP_STEPS: u64 = 100;
pub const TOY_ACCUM_STEPS: usize = 2;

/// Data preparation: synthesis, corpus sizes, where manifests live and batching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Holds `manifests/`, `features/` and the `foundation/` weight cache.
    pub dir: PathBuf,
    pub synth: SynthSpec,
    pub corpus: CorpusSpec,
    /// Sample points per batch, padding included.
    pub batch_cap: usize,
    /// Write every utterance's features under `features/`.
    pub dump_features: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            synth: SynthSpec::default(),
            corpus: CorpusSpec::default(),
            batch_cap: TOY_CAP,
            dump_features: true,
        }
    }
}

impl DataSection {
    pub fn manifest_path(&self, split: Split) -> PathBuf {
        self.dir.join("manifests").join(format!("{split}.tsv"))
    }

    pub fn feature_dir(&self, split: Split) -> PathBuf {
        self.dir.join("features").join(split.as_str())
    }

    pub fn foundation_dir(&self) -> PathBuf {
        self.dir.join("foundation")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub test_sets: Vec<Split>,
    pub normalization: Normalization,
    /// Longest hypothesis greedy decoding may emit, in characters.
    pub max_decode_len: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            test_sets: Split::TESTS.to_vec(),
            normalization: Normalization::default(),
            max_decode_len: 24,
        }
    }
}

/// Everything a run depends on. Missing keys take their defaults; unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Pretraining of the stand-in encoder and LM body.
    pub foundation: FoundationConfig,
    pub stages: StageSchedule,
    pub optim: OptimSettings,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ModelConfig::default(),
            foundation: FoundationConfig::default(),
            stages: StageSchedule::staged(),
            optim: OptimSettings::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Defaults with the toy optimizer recipe that trains in seconds.
    pub fn toy() -> Self {
        Self {
            optim: Self::toy_optim(),
            ..Self::default()
        }
    }

    pub fn toy_optim() -> OptimSettings {
        OptimSettings {
            lr_peak: TOY_LR_PEAK,
            warmup_steps: TOY_WARMUP_STEPS,
            accum_steps: TOY_ACCUM_STEPS,
            ..OptimSettings::default()
        }
    }

    /// Replaces the optimizer and batching with the paper-scale values.
    pub fn use_paper_hparams(&mut self) {
        self.optim = OptimSettings::default();
        self.data.batch_cap = PAPER_CAP;
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Fills derived fields such as dimensions that default to the variant's.
    pub fn resolve(&mut self) {
        self.model.resolve();
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.foundation.validate()?;
        self.optim.validate()?;
        self.data.synth.validate()?;
        self.data.corpus.validate()?;
        if self.data.batch_cap == 0 {
            return Err(Error::Config("data.batch_cap must be at least 1".into()));
        }
        if self.eval.test_sets.is_empty() || self.eval.test_sets.contains(&Split::Train) {
            return Err(Error::Config("eval.test_sets must name one or more test splits".into()));
        }
        if self.eval.max_decode_len == 0 {
            return Err(Error::Config("eval.max_decode_len must be at least 1".into()));
        }
        Ok(())
    }

    /// Fully resolved config as TOML; parsing it back yields `self`.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let mut d = RunConfig::default();
        d.resolve();
        assert_eq!(RunConfig::parse("").unwrap(), d);
        assert_eq!(RunConfig::parse("").unwrap().optim, OptimSettings::default());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::toy();
        c.resolve();
        assert_eq!(RunConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::parse("sed = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[optim]\nlr = 1.0"), Err(Error::Config(_))));
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::parse("seed = 7\n[optim]\nwarmup_steps = 100\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.optim.warmup_steps, 100);
        assert_eq!(c.optim.accum_steps, 14);
        assert_eq!(c.data, DataSection::default());
    }
}
