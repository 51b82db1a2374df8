//! Run configuration: built-in defaults, overridden by a TOML file, overridden by flags.

use std::fs;
use std::path::Path;

use kern_core::metrics::{EvalOptions, MatchMode, Pooling, DEFAULT_KS};
use kern_core::model::ModelConfig;
use kern_core::synth::SynthConfig;
use kern_core::trainer::TrainConfig;
use kern_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Index,
    Iou,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    #[serde(rename = "match")]
    pub match_kind: MatchKind,
    pub iou_threshold: f64,
    pub pooling: Pooling,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: DEFAULT_KS.to_vec(),
            match_kind: MatchKind::Index,
            iou_threshold: 0.5,
            pooling: Pooling::PerImage,
        }
    }
}

impl EvalConfig {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            match_mode: match self.match_kind {
                MatchKind::Index => MatchMode::Index,
                MatchKind::Iou => MatchMode::Iou(self.iou_threshold),
            },
            pooling: self.pooling,
        }
    }
}

/// Sizes of the validation and test splits written by `synth`; the training
/// split size is `synth.images`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub val_images: usize,
    pub test_images: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            val_images: 200,
            test_images: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { seeds: vec![0] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub synth: SynthConfig,
    pub splits: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::parse(&fs::read_to_string(path)?)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Validation("eval.ks must be non-empty and positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            return Err(Error::Validation("eval.iou_threshold must be in [0, 1]".into()));
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::Validation("ablate.seeds must be non-empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::parse("[train]\nepochs = 3\n[eval]\nmatch = \"iou\"\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.learning_rate, TrainConfig::default().learning_rate);
        assert_eq!(cfg.eval.options().match_mode, MatchMode::Iou(0.5));
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_rejected_with_line() {
        let err = RunConfig::parse("threads = 1\n[train]\nepoch = 3\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
