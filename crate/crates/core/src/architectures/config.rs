use std::fmt;
use std::str::FromStr;

use crate::config::{parse_size, KvConfig};
use crate::error::{Error, Result};

/// Architecture hyperparameters shared by the segmenter and the auto-encoders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of resolution levels `l_max`.
    pub depth: usize,
    /// Channels at level 1; doubled at every level below.
    pub base_channels: usize,
    /// Spatial up-sampling factor `n` of each overcomplete layer.
    pub overcomplete_factor: usize,
    /// Residual units `J` in every residual chain.
    pub residual_units: usize,
    pub input_channels: usize,
    /// `(height, width)`.
    pub input_size: (usize, usize),
    /// Bottleneck channels of the auto-encoders; defaults to the deepest
    /// level's width.
    pub latent_channels: Option<usize>,
    /// Whether the S-OCAE exchanges features through the communication block.
    pub communication_block: bool,
}

pub const MODEL_KEYS: &[&str] = &[
    "depth",
    "base_channels",
    "overcomplete_factor",
    "residual_units",
    "input_channels",
    "input_size",
    "latent_channels",
    "communication_block",
];

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 4,
            overcomplete_factor: 2,
            residual_units: 2,
            input_channels: 1,
            input_size: (64, 64),
            latent_channels: None,
            communication_block: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 {
            return Err(Error::config("depth", format!("must be >= 3, got {}", self.depth)));
        }
        if self.residual_units < 1 {
            return Err(Error::config("residual_units", "must be >= 1"));
        }
        if self.overcomplete_factor < 2 {
            return Err(Error::config("overcomplete_factor", "must be >= 2"));
        }
        if self.base_channels < 1 {
            return Err(Error::config("base_channels", "must be >= 1"));
        }
        if self.input_channels < 1 {
            return Err(Error::config("input_channels", "must be >= 1"));
        }
        if self.latent_channels == Some(0) {
            return Err(Error::config("latent_channels", "must be >= 1"));
        }
        let div = 1usize << (self.depth - 1);
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::config(
                "input_size",
                format!("{h}x{w} is not divisible by 2^(depth-1) = {div}"),
            ));
        }
        Ok(())
    }

    /// Rejects auto-encoder configurations whose latent is not smaller than
    /// the single-channel input mask.
    pub fn validate_undercomplete(&self) -> Result<()> {
        self.validate()?;
        let latent = self.latent_len();
        let input = self.input_size.0 * self.input_size.1;
        if latent >= input {
            return Err(Error::config(
                "latent_channels",
                format!("latent has {latent} elements, not fewer than the {input}-element input"),
            ));
        }
        Ok(())
    }

    /// Channel width at level `l` (1-based).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels.unwrap_or_else(|| self.channels(self.depth))
    }

    /// Spatial size at level `l` (1-based).
    pub fn level_size(&self, level: usize) -> (usize, usize) {
        let d = 1 << (level - 1);
        (self.input_size.0 / d, self.input_size.1 / d)
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.level_size(self.depth);
        (self.latent_channels(), h, w)
    }

    pub fn latent_len(&self) -> usize {
        let (c, h, w) = self.latent_shape();
        c * h * w
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = ModelConfig::default();
        let input_size = match kv.raw("input_size") {
            Some(v) => parse_size(v)
                .ok_or_else(|| Error::config("input_size", format!("cannot parse `{v}`")))?,
            None => d.input_size,
        };
        let cfg = ModelConfig {
            depth: kv.get_or("depth", d.depth)?,
            base_channels: kv.get_or("base_channels", d.base_channels)?,
            overcomplete_factor: kv.get_or("overcomplete_factor", d.overcomplete_factor)?,
            residual_units: kv.get_or("residual_units", d.residual_units)?,
            input_channels: kv.get_or("input_channels", d.input_channels)?,
            input_size,
            latent_channels: kv.get("latent_channels")?,
            communication_block: kv.get_or("communication_block", d.communication_block)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("depth", self.depth);
        kv.set("base_channels", self.base_channels);
        kv.set("overcomplete_factor", self.overcomplete_factor);
        kv.set("residual_units", self.residual_units);
        kv.set("input_channels", self.input_channels);
        kv.set("input_size", format!("{}x{}", self.input_size.0, self.input_size.1));
        if let Some(l) = self.latent_channels {
            kv.set("latent_channels", l);
        }
        kv.set("communication_block", self.communication_block);
        kv
    }
}

/// Which network a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetworkKind {
    Unet,
    Cae,
    Socae,
}

impl fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetworkKind::Unet => "unet",
            NetworkKind::Cae => "cae",
            NetworkKind::Socae => "socae",
        })
    }
}

impl FromStr for NetworkKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "unet" => Ok(NetworkKind::Unet),
            "cae" => Ok(NetworkKind::Cae),
            "socae" => Ok(NetworkKind::Socae),
            other => Err(format!("unknown network kind `{other}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisibility_is_enforced() {
        let cfg = ModelConfig {
            depth: 3,
            input_size: (33, 33),
            ..ModelConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "input_size"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn undercompleteness_boundary() {
        let mut cfg = ModelConfig {
            depth: 4,
            base_channels: 16,
            latent_channels: Some(64),
            ..ModelConfig::default()
        };
        // 64 * 8 * 8 == 64 * 64
        assert!(cfg.validate_undercomplete().is_err());
        cfg.latent_channels = Some(32);
        cfg.validate_undercomplete().unwrap();
        assert_eq!(cfg.latent_len(), 2048);
    }

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig {
            latent_channels: Some(8),
            communication_block: false,
            input_size: (64, 32),
            ..ModelConfig::default()
        };
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn bad_values_name_the_field() {
        for (k, v) in [("depth", "2"), ("residual_units", "0"), ("overcomplete_factor", "1")] {
            let mut kv = KvConfig::default();
            kv.set(k, v);
            match ModelConfig::from_kv(&kv) {
                Err(Error::Config { field, .. }) => assert_eq!(field, k),
                other => panic!("expected config error for {k}, got {other:?}"),
            }
        }
    }
}
