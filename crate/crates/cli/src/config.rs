//! JSON experiment configuration. Every section rejects unknown keys and
//! fills missing ones from the defaults, so a config file only has to spell
//! out what it overrides.

use anyhow::{bail, Context, Result};
use ccformer_model::model::{BclBranch, ModelConfig};
use ccformer_model::mtm::QueryGenerator;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Multi,
    Semantic,
}

impl Mode {
    pub fn is_semantic(self) -> bool {
        matches!(self, Mode::Semantic)
    }

    /// Manifest naming for the three settings.
    pub fn label(self) -> &'static str {
        match self {
            Mode::Single => "single-source",
            Mode::Multi => "multi-source",
            Mode::Semantic => "semantic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QGen {
    None,
    Repeat,
    #[default]
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BclSection {
    pub include_positive_in_denominator: bool,
    pub second_branch: BclBranchCfg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BclBranchCfg {
    #[default]
    EnhancedAudio,
    OriginalVisual,
    EnhancedVisual,
}

impl Default for BclSection {
    fn default() -> Self {
        BclSection {
            include_positive_in_denominator: false,
            second_branch: BclBranchCfg::EnhancedAudio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub d_a: usize,
    pub heads: usize,
    pub n_queries: usize,
    pub encoder_layers: usize,
    pub aqg_layers: usize,
    pub decoder_blocks: usize,
    pub iti_per_block: usize,
    pub n_class: Option<usize>,
    pub eim_cross_frame: bool,
    pub iti_temporal_pos: bool,
    pub bcl: BclSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 64,
            d_a: 16,
            heads: 4,
            n_queries: 5,
            encoder_layers: 3,
            aqg_layers: 3,
            decoder_blocks: 3,
            iti_per_block: 3,
            n_class: None,
            eim_cross_frame: false,
            iti_temporal_pos: false,
            bcl: BclSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub lambda: f64,
    pub tau: f64,
    pub precision: Precision,
    pub flip_p: f64,
    pub eval_every: usize,
    pub ckpt_every: usize,
    pub out_dir: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 2e-5,
            weight_decay: 1e-4,
            batch_size: None,
            epochs: 60,
            max_steps: None,
            seed: 0,
            lambda: 0.1,
            tau: 0.07,
            precision: Precision::F64,
            flip_p: 0.0,
            eval_every: 50,
            ckpt_every: 100,
            out_dir: "runs/run".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dir: String,
    pub mode: Mode,
    pub canvas: usize,
    pub t: Option<usize>,
    pub audio_sigma: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: "data".to_string(),
            mode: Mode::Single,
            canvas: 64,
            t: None,
            audio_sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub disable_eim: bool,
    pub disable_ave: bool,
    pub disable_vae: bool,
    pub disable_ici: bool,
    pub disable_iti: bool,
    pub disable_bcl: bool,
    pub query_generator: QGen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub ablation: AblationSection,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Config::from_json(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn from_json(text: &str) -> Result<Config> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical form used for checkpoint compatibility checks.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Canonical form with bookkeeping knobs cleared. Two configs that agree
    /// here produce the same parameter trajectory, so resuming may change
    /// output paths and logging cadence but nothing else.
    pub fn trajectory_json(&self) -> String {
        let mut c = self.clone();
        c.train.out_dir = String::new();
        c.train.eval_every = 0;
        c.train.ckpt_every = 0;
        c.canonical_json()
    }

    pub fn n_class(&self) -> usize {
        self.model
            .n_class
            .unwrap_or(if self.data.mode.is_semantic() { 4 } else { 1 })
    }

    pub fn frames(&self) -> usize {
        self.data
            .t
            .unwrap_or(if self.data.mode.is_semantic() { 10 } else { 5 })
    }

    pub fn batch_size(&self) -> usize {
        self.train
            .batch_size
            .unwrap_or(if self.data.mode.is_semantic() { 6 } else { 2 })
    }

    /// The contrastive term only applies to binary modes; semantic runs are
    /// supervised by cross-entropy alone.
    pub fn bcl_enabled(&self) -> bool {
        !self.ablation.disable_bcl && !self.data.mode.is_semantic()
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.lr <= 0.0 || !self.train.lr.is_finite() {
            bail!("train.lr must be positive, got {}", self.train.lr);
        }
        if self.train.tau <= 0.0 {
            bail!("train.tau must be positive, got {}", self.train.tau);
        }
        if self.train.lambda < 0.0 {
            bail!("train.lambda must be nonnegative, got {}", self.train.lambda);
        }
        if !(0.0..=1.0).contains(&self.train.flip_p) {
            bail!("train.flip_p must lie in [0,1], got {}", self.train.flip_p);
        }
        if self.data.canvas < 32 || self.data.canvas % 32 != 0 {
            bail!("data.canvas must be a positive multiple of 32, got {}", self.data.canvas);
        }
        if self.frames() == 0 {
            bail!("data.t must be positive");
        }
        if self.data.mode.is_semantic() && self.n_class() < 2 {
            bail!("semantic mode needs n_class >= 2, got {}", self.n_class());
        }
        if self.bcl_enabled() && self.batch_size() < 2 {
            bail!("bi-modal contrastive loss needs batch size >= 2, got {}", self.batch_size());
        }
        self.model_config().validate().map_err(anyhow::Error::from)
    }

    /// Wiring for the network as configured, ablation flags applied.
    pub fn model_config(&self) -> ModelConfig {
        let ab = &self.ablation;
        ModelConfig {
            d: self.model.d,
            d_a: self.model.d_a,
            heads: self.model.heads,
            n_queries: self.model.n_queries,
            n_class: self.n_class(),
            encoder_layers: self.model.encoder_layers,
            aqg_layers: self.model.aqg_layers,
            decoder_blocks: self.model.decoder_blocks,
            iti_per_block: self.model.iti_per_block,
            query_generator: match ab.query_generator {
                QGen::None => QueryGenerator::None,
                QGen::Repeat => QueryGenerator::Repeat,
                QGen::Attention => QueryGenerator::Attention,
            },
            enable_ave: !(ab.disable_eim || ab.disable_ave),
            enable_vae: !(ab.disable_eim || ab.disable_vae),
            eim_cross_frame: self.model.eim_cross_frame,
            enable_ici: !ab.disable_ici,
            enable_iti: !ab.disable_iti,
            enable_bcl: self.bcl_enabled(),
            iti_temporal_pos: self.model.iti_temporal_pos,
            bcl_second_branch: match self.model.bcl.second_branch {
                BclBranchCfg::EnhancedAudio => BclBranch::EnhancedAudio,
                BclBranchCfg::OriginalVisual => BclBranch::OriginalVisual,
                BclBranchCfg::EnhancedVisual => BclBranch::EnhancedVisual,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_recipe() {
        let cfg = Config::default();
        assert_eq!(cfg.model.n_queries, 5);
        assert_eq!(cfg.model.decoder_blocks, 3);
        assert_eq!(cfg.model.iti_per_block, 3);
        assert_eq!(cfg.model.aqg_layers, 3);
        assert_eq!(cfg.train.lambda, 0.1);
        assert_eq!(cfg.train.lr, 2e-5);
        assert_eq!(cfg.train.tau, 0.07);
        assert_eq!(cfg.batch_size(), 2);
        let mut sem = Config::default();
        sem.data.mode = Mode::Semantic;
        assert_eq!(sem.batch_size(), 6);
        assert_eq!(sem.n_class(), 4);
        assert_eq!(sem.frames(), 10);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = Config::from_json(r#"{"train": {"seed": 9}}"#).unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.lr, 2e-5);
        assert_eq!(cfg.model.d, 64);
    }

    #[test]
    fn unknown_keys_rejected_everywhere() {
        assert!(Config::from_json(r#"{"unknown": 1}"#).is_err());
        assert!(Config::from_json(r#"{"model": {"dd": 64}}"#).is_err());
        assert!(Config::from_json(r#"{"train": {"lrr": 0.1}}"#).is_err());
        assert!(Config::from_json(r#"{"data": {"size": 64}}"#).is_err());
        assert!(Config::from_json(r#"{"ablation": {"disable_all": true}}"#).is_err());
        assert!(Config::from_json(r#"{"model": {"bcl": {"temp": 0.1}}}"#).is_err());
    }

    #[test]
    fn ablation_flags_map_to_wiring() {
        let mut cfg = Config::default();
        cfg.ablation.disable_eim = true;
        let mc = cfg.model_config();
        assert!(!mc.enable_ave && !mc.enable_vae);

        let mut cfg = Config::default();
        cfg.ablation.disable_ave = true;
        let mc = cfg.model_config();
        assert!(!mc.enable_ave && mc.enable_vae);

        let mut cfg = Config::default();
        cfg.ablation.query_generator = QGen::Repeat;
        assert_eq!(cfg.model_config().query_generator, QueryGenerator::Repeat);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = Config::default();
        cfg.train.batch_size = Some(1);
        assert!(cfg.validate().is_err());
        cfg.ablation.disable_bcl = true;
        assert!(cfg.validate().is_ok());

        let mut cfg = Config::default();
        cfg.data.canvas = 48;
        assert!(cfg.validate().is_err());

        let mut cfg = Config::default();
        cfg.train.tau = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn canonical_json_round_trips() {
        let cfg = Config::default();
        let text = cfg.canonical_json();
        let back = Config::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.canonical_json(), text);
    }
}
