use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::architectures::{ModelConfig, NetworkKind, MODEL_KEYS};
use crate::config::KvConfig;
use crate::data::AugmentationConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ae,
    Seg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
}

/// Shape prior used by the segmenter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    None,
    Cae,
    Socae,
}

impl PriorKind {
    pub fn network(self) -> Option<NetworkKind> {
        match self {
            PriorKind::None => None,
            PriorKind::Cae => Some(NetworkKind::Cae),
            PriorKind::Socae => Some(NetworkKind::Socae),
        }
    }
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorKind::None => "none",
            PriorKind::Cae => "cae",
            PriorKind::Socae => "socae",
        })
    }
}

impl FromStr for PriorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(PriorKind::None),
            "cae" => Ok(PriorKind::Cae),
            "socae" => Ok(PriorKind::Socae),
            _ => Err(format!("unknown prior `{s}` (none, cae, socae)")),
        }
    }
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            _ => Err(format!("unknown optimizer `{s}` (adam)")),
        }
    }
}

/// Settings of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the shape term; ignored by the auto-encoder stage.
    pub lambda: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub prior: PriorKind,
    pub augmentation: Option<AugmentationConfig>,
    /// Positive-class weight; `None` uses the inverse foreground frequency
    /// of the training masks.
    pub pos_weight: Option<f64>,
}

impl TrainConfig {
    /// Auto-encoder pretraining as used for retinal images.
    pub fn autoencoder_drive() -> Self {
        Self {
            stage: Stage::Ae,
            learning_rate: 0.001,
            batch_size: 4,
            epochs: 1000,
            lambda: 0.0,
            seed: 0,
            optimizer: Optimizer::Adam,
            prior: PriorKind::None,
            augmentation: Some(AugmentationConfig::default()),
            pos_weight: None,
        }
    }

    /// Auto-encoder pretraining as used for liver CT slices.
    pub fn autoencoder_ircadb() -> Self {
        Self {
            learning_rate: 0.0005,
            batch_size: 32,
            epochs: 100,
            ..Self::autoencoder_drive()
        }
    }

    pub fn segmenter_drive() -> Self {
        Self {
            stage: Stage::Seg,
            learning_rate: 0.001,
            batch_size: 4,
            epochs: 200,
            lambda: 40.0,
            prior: PriorKind::Socae,
            ..Self::autoencoder_drive()
        }
    }

    pub fn segmenter_ircadb() -> Self {
        Self {
            learning_rate: 0.0001,
            batch_size: 16,
            epochs: 100,
            lambda: 60.0,
            ..Self::segmenter_drive()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", format!("must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", format!("must be finite and >= 0, got {}", self.lambda)));
        }
        if let Some(w) = self.pos_weight {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::config("pos_weight", format!("must be > 0, got {w}")));
            }
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }
}

/// Keys understood by [`ExperimentConfig::from_kv`], besides the model keys.
pub const TRAIN_KEYS: &[&str] = &[
    "preset",
    "seed",
    "prior",
    "optimizer",
    "lambda",
    "learning_rate",
    "batch_size",
    "epochs",
    "augment",
    "pos_weight",
    "threshold",
    "folds",
    "holdout_fraction",
    "lambda_grid",
    "ae.learning_rate",
    "ae.batch_size",
    "ae.epochs",
    "ae.augment",
];

/// Model plus both training stages and the evaluation protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub autoencoder: TrainConfig,
    pub segmenter: TrainConfig,
    pub folds: usize,
    /// Share of training groups held out for model selection; 0 keeps the
    /// last epoch instead.
    pub holdout_fraction: f64,
    pub threshold: f64,
    /// Candidate shape weights tried per fold; the one with the lowest
    /// holdout Hausdorff distance is kept. Empty uses `segmenter.lambda`.
    pub lambda_grid: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            autoencoder: TrainConfig::autoencoder_drive(),
            segmenter: TrainConfig::segmenter_drive(),
            folds: 5,
            holdout_fraction: 0.2,
            threshold: crate::metrics::DEFAULT_THRESHOLD,
            lambda_grid: Vec::new(),
        }
    }
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::config("lambda_grid", format!("cannot parse `{t}`")))
        })
        .collect()
}

fn all_keys() -> Vec<&'static str> {
    MODEL_KEYS.iter().chain(TRAIN_KEYS).copied().collect()
}

impl ExperimentConfig {
    /// Every key accepted in config files and overrides.
    pub fn known_keys() -> Vec<&'static str> {
        all_keys()
    }

    /// Parses a flat config. `preset` (`drive` or `ircadb`) picks the stage
    /// defaults; explicit keys override them. Unknown keys are rejected.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.ensure_known(&all_keys())?;
        let (ae, seg) = match kv.raw("preset").unwrap_or("drive") {
            "drive" => (TrainConfig::autoencoder_drive(), TrainConfig::segmenter_drive()),
            "ircadb" => (TrainConfig::autoencoder_ircadb(), TrainConfig::segmenter_ircadb()),
            other => return Err(Error::config("preset", format!("unknown preset `{other}` (drive, ircadb)"))),
        };
        let seed = kv.get_or("seed", 0u64)?;
        let optimizer = kv.get_or("optimizer", Optimizer::Adam)?;
        let aug = |key: &str| -> Result<Option<AugmentationConfig>> {
            Ok(kv.get_or(key, true)?.then(AugmentationConfig::default))
        };
        let autoencoder = TrainConfig {
            learning_rate: kv.get_or("ae.learning_rate", ae.learning_rate)?,
            batch_size: kv.get_or("ae.batch_size", ae.batch_size)?,
            epochs: kv.get_or("ae.epochs", ae.epochs)?,
            augmentation: aug("ae.augment")?,
            seed,
            optimizer,
            ..ae
        };
        let pos_weight = match kv.raw("pos_weight") {
            None | Some("auto") => None,
            Some(_) => kv.get("pos_weight")?,
        };
        let segmenter = TrainConfig {
            learning_rate: kv.get_or("learning_rate", seg.learning_rate)?,
            batch_size: kv.get_or("batch_size", seg.batch_size)?,
            epochs: kv.get_or("epochs", seg.epochs)?,
            lambda: kv.get_or("lambda", seg.lambda)?,
            prior: kv.get_or("prior", seg.prior)?,
            augmentation: aug("augment")?,
            seed,
            optimizer,
            pos_weight,
            ..seg
        };
        let cfg = Self {
            model: ModelConfig::from_kv(kv)?,
            autoencoder,
            segmenter,
            folds: kv.get_or("folds", 5)?,
            holdout_fraction: kv.get_or("holdout_fraction", 0.2)?,
            threshold: kv.get_or("threshold", crate::metrics::DEFAULT_THRESHOLD)?,
            lambda_grid: parse_grid(kv.raw("lambda_grid").unwrap_or(""))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.autoencoder.validate()?;
        self.segmenter.validate()?;
        if self.segmenter.prior != PriorKind::None {
            self.model.validate_undercomplete()?;
        }
        if self.folds < 2 {
            return Err(Error::config("folds", format!("need at least 2 folds, got {}", self.folds)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config("holdout_fraction", "must lie in [0, 1)"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold", "must lie in (0, 1)"));
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::config("lambda_grid", "values must be finite and >= 0"));
        }
        if self.lambda_grid.len() > 1 && self.holdout_fraction == 0.0 {
            return Err(Error::config("lambda_grid", "choosing among several values needs holdout_fraction > 0"));
        }
        Ok(())
    }

    /// Canonical text form: every key, sorted.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.model.to_kv();
        let (ae, seg) = (&self.autoencoder, &self.segmenter);
        kv.set("seed", seg.seed);
        kv.set("optimizer", "adam");
        kv.set("prior", seg.prior);
        kv.set("lambda", seg.lambda);
        kv.set("learning_rate", seg.learning_rate);
        kv.set("batch_size", seg.batch_size);
        kv.set("epochs", seg.epochs);
        kv.set("augment", seg.augmentation.is_some());
        match seg.pos_weight {
            Some(w) => kv.set("pos_weight", w),
            None => kv.set("pos_weight", "auto"),
        }
        kv.set("threshold", self.threshold);
        kv.set("folds", self.folds);
        kv.set("holdout_fraction", self.holdout_fraction);
        if !self.lambda_grid.is_empty() {
            let grid: Vec<String> = self.lambda_grid.iter().map(f64::to_string).collect();
            kv.set("lambda_grid", grid.join(","));
        }
        kv.set("ae.learning_rate", ae.learning_rate);
        kv.set("ae.batch_size", ae.batch_size);
        kv.set("ae.epochs", ae.epochs);
        kv.set("ae.augment", ae.augmentation.is_some());
        kv
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().to_text().as_bytes()))
    }
}
