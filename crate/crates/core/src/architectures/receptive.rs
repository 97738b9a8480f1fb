//! Analytic receptive fields of the S-OCAE layer graph, in input pixels.
//!
//! A field is tracked as `(size, jump)`, where `jump` is the input-pixel
//! distance between adjacent positions of the current map. A `k`-tap layer
//! grows the size by `(k - 1) * jump`; bilinear resampling reads two taps of
//! its input grid. Where two paths are added the larger field wins.

use super::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReceptiveField {
    pub size: f64,
    pub jump: f64,
}

impl ReceptiveField {
    pub const INPUT: ReceptiveField = ReceptiveField { size: 1.0, jump: 1.0 };

    pub fn conv(self, k: usize) -> Self {
        Self {
            size: self.size + (k as f64 - 1.0) * self.jump,
            jump: self.jump,
        }
    }

    pub fn pool(self, k: usize, stride: usize) -> Self {
        Self {
            size: self.size + (k as f64 - 1.0) * self.jump,
            jump: self.jump * stride as f64,
        }
    }

    pub fn upsample(self, n: usize) -> Self {
        Self {
            size: self.size + self.jump,
            jump: self.jump / n as f64,
        }
    }

    pub fn downsample(self, n: usize) -> Self {
        Self {
            size: self.size + self.jump,
            jump: self.jump * n as f64,
        }
    }

    /// Field of an element-wise sum of two aligned maps.
    pub fn merge(self, other: Self) -> Self {
        debug_assert!((self.jump - other.jump).abs() < 1e-12);
        Self {
            size: self.size.max(other.size),
            jump: self.jump,
        }
    }

    /// `units` pre-activation units of two 3x3 convolutions each.
    pub fn residual_chain(self, units: usize) -> Self {
        (0..2 * units).fold(self, |rf, _| rf.conv(3))
    }
}

/// Receptive fields of the main S-OCAE maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SocaeFields {
    /// `F_EU^l` for `l = 1..=depth`, after any communication-block update
    /// feeding the next level.
    pub undercomplete: Vec<ReceptiveField>,
    pub overcomplete_first: ReceptiveField,
    pub overcomplete_second: ReceptiveField,
}

impl SocaeFields {
    pub fn bottleneck(&self) -> ReceptiveField {
        *self.undercomplete.last().expect("depth >= 3")
    }
}

pub fn socae_receptive_fields(cfg: &ModelConfig) -> SocaeFields {
    let n = cfg.overcomplete_factor;
    let units = cfg.residual_units;
    let mut eu = Vec::with_capacity(cfg.depth);
    let mut rf = ReceptiveField::INPUT;
    for l in 1..cfg.depth {
        if l > 1 {
            rf = rf.pool(2, 2);
        }
        rf = rf.conv(3);
        eu.push(rf);
    }
    let mut f_eu = rf;
    let mut f_eo1 = f_eu.upsample(n).conv(3);
    if cfg.communication_block {
        let to_eu = f_eo1.residual_chain(units).downsample(n);
        let to_eo = f_eu.residual_chain(units).upsample(n);
        f_eu = f_eu.merge(to_eu);
        f_eo1 = f_eo1.merge(to_eo);
    }
    eu.push(f_eu.pool(2, 2).conv(3));
    let f_eo2 = f_eo1.upsample(n).conv(3);
    SocaeFields {
        undercomplete: eu,
        overcomplete_first: f_eo1,
        overcomplete_second: f_eo2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_traced_depth4_fields() {
        let cfg = ModelConfig::default();
        let f = socae_receptive_fields(&cfg);
        let sizes: Vec<f64> = f.undercomplete.iter().map(|r| r.size).collect();
        // 3 | pool 4, conv 8 | pool 10, conv 18 | CB lifts 18 to 44; pool 48, conv 64
        assert_eq!(sizes, vec![3.0, 8.0, 18.0, 64.0]);
        assert_eq!(f.overcomplete_first.size, 54.0);
        assert_eq!(f.overcomplete_second.size, 58.0);
        assert_eq!(f.overcomplete_second.jump, 1.0);
    }

    #[test]
    fn without_communication_block() {
        let cfg = ModelConfig {
            communication_block: false,
            ..ModelConfig::default()
        };
        let f = socae_receptive_fields(&cfg);
        assert_eq!(f.bottleneck().size, 38.0);
        assert_eq!(f.overcomplete_second.size, 30.0);
    }
}
