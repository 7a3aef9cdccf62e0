//! Declarative run configuration: one TOML file drives every command, with a
//! handful of CLI flags layered on top. The fully resolved config is echoed
//! into each output directory so any artifact can be reproduced from it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Three branches fused by score averaging.
    Msoc,
    /// Audio-visual branch alone (ablation).
    Avoc,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Msoc => "msoc",
            Mode::Avoc => "avoc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum VisualEncoderKind {
    Resnet,
    ScnetStil,
}

impl VisualEncoderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            VisualEncoderKind::Resnet => "resnet",
            VisualEncoderKind::ScnetStil => "scnet_stil",
        }
    }

    /// Embedding width produced by this encoder.
    pub fn out_dim(&self) -> usize {
        match self {
            VisualEncoderKind::Resnet => 128,
            VisualEncoderKind::ScnetStil => 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mode: Mode,
    pub visual_encoder: VisualEncoderKind,
    /// When false (AVOC mode only), the AV branch trains on cross-entropy
    /// alone — the "without OC softmax" ablation.
    pub use_oc: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Msoc,
            visual_encoder: VisualEncoderKind::Resnet,
            use_oc: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    /// OC-Softmax scale.
    pub alpha: f32,
    /// Margin for the real class.
    pub m0: f32,
    /// Margin for the fake class.
    pub m1: f32,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 2e-4,
            batch_size: 64,
            alpha: 20.0,
            m0: 0.9,
            m1: 0.2,
            seeds: vec![0, 1, 2, 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.m1 < self.m0) {
            return Err(Error::Config(format!(
                "fake margin m1 ({}) must lie below real margin m0 ({})",
                self.m1, self.m0
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list must be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_per_category: usize,
    pub val_per_category: usize,
    pub test_per_category: usize,
    /// Generation methods reserved for the test split.
    pub holdout_methods: Vec<String>,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_per_category: 200,
            val_per_category: 50,
            test_per_category: 100,
            holdout_methods: vec!["faceswap".into(), "faceswap-wav2lip".into()],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_per_category == 0 || self.val_per_category == 0 || self.test_per_category == 0
        {
            return Err(Error::Config("split counts must be positive".into()));
        }
        if self.holdout_methods.is_empty() {
            return Err(Error::Config("holdout_methods must be nonempty".into()));
        }
        Ok(())
    }

    pub fn is_holdout(&self, method: &str) -> bool {
        self.holdout_methods.iter().any(|m| m == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyCorpusSpec {
    /// Corpus records generated per category (before splitting).
    pub n_per_category: usize,
    pub audio_fake_styles: Vec<String>,
    pub visual_fake_styles: Vec<String>,
    /// Styles reserved for test; must be drawn from the style lists above.
    pub holdout_styles: Vec<String>,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            n_per_category: 390,
            audio_fake_styles: vec!["tonepair".into(), "noiseband".into(), "vc".into()],
            visual_fake_styles: vec!["checker".into(), "pswap".into(), "blur".into()],
            holdout_styles: vec!["vc".into(), "checker".into()],
            seed: 0,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_category == 0 {
            return Err(Error::Config("n_per_category must be positive".into()));
        }
        for style in &self.holdout_styles {
            let known = self.audio_fake_styles.contains(style)
                || self.visual_fake_styles.contains(style);
            if !known {
                return Err(Error::Config(format!(
                    "holdout style `{style}` is not an audio or visual fake style"
                )));
            }
        }
        if self.seen_audio_styles().len() < 2 || self.seen_visual_styles().len() < 2 {
            return Err(Error::Config(
                "need at least two non-holdout styles per modality \
                 (combined-fake clips pair them)"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn seen_audio_styles(&self) -> Vec<&str> {
        self.audio_fake_styles
            .iter()
            .filter(|s| !self.holdout_styles.contains(s))
            .map(|s| s.as_str())
            .collect()
    }

    pub fn seen_visual_styles(&self) -> Vec<&str> {
        self.visual_fake_styles
            .iter()
            .filter(|s| !self.holdout_styles.contains(s))
            .map(|s| s.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Toy,
    Corpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct CorpusPaths {
    /// Directory holding the external corpus media.
    pub dir: Option<PathBuf>,
    /// Metadata table mapping corpus files to labels and methods.
    pub metadata: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    pub toy: ToyCorpusSpec,
    pub corpus: CorpusPaths,
    pub split: SplitSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Toy,
            toy: ToyCorpusSpec::default(),
            corpus: CorpusPaths::default(),
            split: SplitSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Where build-data writes (and train/eval read) the manifest and media.
    pub data_dir: PathBuf,
    /// Where train/eval/explain write checkpoints, logs, and reports.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| {
            Error::Config(format!("failed to parse {}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.train.validate()?;
        self.data.split.validate()?;
        match self.data.source {
            DataSource::Toy => self.data.toy.validate()?,
            DataSource::Corpus => {
                if self.data.corpus.dir.is_none() {
                    return Err(Error::Config(
                        "data.corpus.dir is required when data.source = \"corpus\"".into(),
                    ));
                }
            }
        }
        if !self.model.use_oc && self.model.mode != Mode::Avoc {
            return Err(Error::Config(
                "disabling OC terms is an AVOC-only ablation; \
                 set model.mode = \"avoc\" (or pass --mode avoc) with --no-oc"
                    .into(),
            ));
        }
        Ok(())
    }

    /// The exact configuration text echoed next to every output.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the resolved configuration, stamped into checkpoints so a
    /// model can be matched to the settings that produced it.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.resolved_toml().as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join("resolved-config.toml");
        std::fs::write(&path, self.resolved_toml()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_preserves_config() {
        let cfg = RunConfig::default();
        let text = cfg.resolved_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.config_hash(), back.config_hash());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.train.epochs = 31;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn rejects_inverted_margins() {
        let mut cfg = RunConfig::default();
        cfg.train.m1 = 0.95;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn corpus_source_requires_dir() {
        let mut cfg = RunConfig::default();
        cfg.data.source = DataSource::Corpus;
        assert!(cfg.validate().is_err());
        cfg.data.corpus.dir = Some(PathBuf::from("/corpus"));
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn no_oc_requires_avoc_mode() {
        let mut cfg = RunConfig::default();
        cfg.model.use_oc = false;
        assert!(cfg.validate().is_err());
        cfg.model.mode = Mode::Avoc;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_holdout_style_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.data.toy.holdout_styles = vec!["nosuch".into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: RunConfig = toml::from_str("[train]\nepochs = 5\n").unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.frontend.n_mfcc, 13);
    }
}
