//! Procedural vessel trees: branching polylines whose width shrinks by one
//! pixel per generation, rendered anti-aliased over a smooth textured
//! background with distractor blobs and noise.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::imageops::gaussian_blur;
use super::ImageSample;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

/// Foreground fraction bounds every generated mask satisfies.
pub const MIN_FOREGROUND: f64 = 0.005;
pub const MAX_FOREGROUND: f64 = 0.15;

const MAX_TREES: usize = 6;
const MAX_ATTEMPTS: usize = 32;

/// Generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Deepest branch generation; the root is generation 0.
    pub max_generations: usize,
    /// Root width in pixels; each generation is one pixel thinner, down to 1.
    pub root_width: f64,
    /// Root length as a fraction of the image side.
    pub root_length: (f64, f64),
    /// Child length relative to its parent.
    pub length_decay: f64,
    /// Child deviation from the parent heading, in degrees.
    pub branch_angle_deg: (f64, f64),
    /// Probability that a non-root branch splits again.
    pub split_probability: f64,
    /// Heading jitter per polyline step, in degrees.
    pub wobble_deg: f64,
    /// Vessel intensity above background.
    pub contrast: (f64, f64),
    pub background: f64,
    pub texture_amplitude: f64,
    /// Upper bound on bright non-vessel blobs per image.
    pub max_distractors: usize,
    pub blur_sigma: f64,
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            max_generations: 3,
            root_width: 3.0,
            root_length: (0.3, 0.45),
            length_decay: 0.7,
            branch_angle_deg: (20.0, 45.0),
            split_probability: 0.8,
            wobble_deg: 12.0,
            contrast: (0.25, 0.45),
            background: 0.3,
            texture_amplitude: 0.08,
            max_distractors: 3,
            blur_sigma: 0.6,
            noise_std: 0.04,
        }
    }
}

/// Config keys accepted by [`SyntheticConfig::from_kv`].
pub const SYNTH_KEYS: &[&str] = &[
    "synth.max_generations",
    "synth.root_width",
    "synth.length_decay",
    "synth.split_probability",
    "synth.max_distractors",
    "synth.noise_std",
    "synth.blur_sigma",
    "synth.texture_amplitude",
];

impl SyntheticConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let c = Self {
            max_generations: kv.get_or("synth.max_generations", d.max_generations)?,
            root_width: kv.get_or("synth.root_width", d.root_width)?,
            length_decay: kv.get_or("synth.length_decay", d.length_decay)?,
            split_probability: kv.get_or("synth.split_probability", d.split_probability)?,
            max_distractors: kv.get_or("synth.max_distractors", d.max_distractors)?,
            noise_std: kv.get_or("synth.noise_std", d.noise_std)?,
            blur_sigma: kv.get_or("synth.blur_sigma", d.blur_sigma)?,
            texture_amplitude: kv.get_or("synth.texture_amplitude", d.texture_amplitude)?,
            ..d
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, why: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, why))
            }
        };
        check(self.max_generations >= 1, "synth.max_generations", "must be >= 1")?;
        check(self.root_width >= 1.0, "synth.root_width", "must be >= 1")?;
        check(
            self.length_decay > 0.0 && self.length_decay <= 1.0,
            "synth.length_decay",
            "must lie in (0, 1]",
        )?;
        check(
            (0.0..=1.0).contains(&self.split_probability),
            "synth.split_probability",
            "must lie in [0, 1]",
        )?;
        check(
            self.noise_std >= 0.0 && self.blur_sigma >= 0.0 && self.texture_amplitude >= 0.0,
            "synth.noise_std",
            "noise, blur and texture must be >= 0",
        )
    }

    fn width(&self, generation: usize) -> f64 {
        (self.root_width - generation as f64).max(1.0)
    }
}

/// A straight piece of a branch, in `(x, y)` pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub from: (f64, f64),
    pub to: (f64, f64),
    pub width: f64,
    pub generation: usize,
}

impl Segment {
    fn distance(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (self.to.0 - self.from.0, self.to.1 - self.from.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((x - self.from.0) * dx + (y - self.from.1) * dy) / len2).clamp(0.0, 1.0)
        };
        let (px, py) = (self.from.0 + t * dx, self.from.1 + t * dy);
        ((x - px) * (x - px) + (y - py) * (y - py)).sqrt()
    }
}

/// One tree: its segments and the number of branches (polylines).
#[derive(Clone, Debug, PartialEq)]
pub struct VesselTree {
    pub segments: Vec<Segment>,
    pub branches: usize,
}

const STEPS_PER_BRANCH: usize = 4;

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

impl VesselTree {
    /// Grows a tree entering the `size x size` frame from a random border point.
    pub fn generate<R: Rng>(cfg: &SyntheticConfig, size: usize, rng: &mut R) -> Self {
        let s = size as f64;
        let along = uniform(rng, (0.2 * s, 0.8 * s));
        let (start, inward) = match rng.gen_range(0..4) {
            0 => ((along, 0.0), PI / 2.0),
            1 => ((along, s - 1.0), -PI / 2.0),
            2 => ((0.0, along), 0.0),
            _ => ((s - 1.0, along), PI),
        };
        let heading = inward + uniform(rng, (-PI / 7.0, PI / 7.0));
        let length = uniform(rng, cfg.root_length) * s;
        let mut tree = VesselTree {
            segments: Vec::new(),
            branches: 0,
        };
        tree.grow(cfg, rng, start, heading, length, 0);
        tree
    }

    fn grow<R: Rng>(
        &mut self,
        cfg: &SyntheticConfig,
        rng: &mut R,
        start: (f64, f64),
        mut heading: f64,
        length: f64,
        generation: usize,
    ) {
        let step = length / STEPS_PER_BRANCH as f64;
        let wobble = cfg.wobble_deg.to_radians();
        let mut pos = start;
        for _ in 0..STEPS_PER_BRANCH {
            heading += uniform(rng, (-wobble, wobble));
            let next = (pos.0 + step * heading.cos(), pos.1 + step * heading.sin());
            self.segments.push(Segment {
                from: pos,
                to: next,
                width: cfg.width(generation),
                generation,
            });
            pos = next;
        }
        self.branches += 1;
        // The root always splits, which guarantees at least one bifurcation.
        let split = generation == 0 || rng.gen_bool(cfg.split_probability);
        if generation < cfg.max_generations && split {
            let (lo, hi) = cfg.branch_angle_deg;
            for sign in [-1.0, 1.0] {
                let turn = sign * uniform(rng, (lo.to_radians(), hi.to_radians()));
                self.grow(cfg, rng, pos, heading + turn, length * cfg.length_decay, generation + 1);
            }
        }
    }
}

/// Rasterizes segments: returns anti-aliased coverage in `[0, 1]` and the mask
/// of pixels whose centre lies within half a width of a segment.
pub fn render_tree(segments: &[Segment], size: usize) -> (Vec<f64>, Vec<bool>) {
    let mut coverage = vec![0.0f64; size * size];
    let mut mask = vec![false; size * size];
    let last = size as f64 - 1.0;
    for seg in segments {
        let r = seg.width / 2.0 + 1.0;
        let x0 = (seg.from.0.min(seg.to.0) - r).floor().clamp(0.0, last) as usize;
        let x1 = (seg.from.0.max(seg.to.0) + r).ceil().clamp(0.0, last) as usize;
        let y0 = (seg.from.1.min(seg.to.1) - r).floor().clamp(0.0, last) as usize;
        let y1 = (seg.from.1.max(seg.to.1) + r).ceil().clamp(0.0, last) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = seg.distance(x as f64, y as f64);
                let cov = (seg.width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                let i = y * size + x;
                coverage[i] = coverage[i].max(cov);
                mask[i] |= d <= seg.width / 2.0;
            }
        }
    }
    (coverage, mask)
}

/// Per-sample generator seed derived from the dataset seed.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn vessel_mask<R: Rng>(cfg: &SyntheticConfig, size: usize, rng: &mut R) -> (Vec<f64>, Vec<bool>) {
    let n = (size * size) as f64;
    let mut best = None;
    for _ in 0..MAX_ATTEMPTS {
        let mut segments = Vec::new();
        let mut out = (Vec::new(), Vec::new());
        for _ in 0..MAX_TREES {
            segments.extend(VesselTree::generate(cfg, size, rng).segments);
            out = render_tree(&segments, size);
            if out.1.iter().filter(|&&m| m).count() as f64 / n >= MIN_FOREGROUND {
                break;
            }
        }
        let frac = out.1.iter().filter(|&&m| m).count() as f64 / n;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            return out;
        }
        best.get_or_insert(out);
    }
    log::warn!("synthetic mask outside foreground bounds after {MAX_ATTEMPTS} attempts");
    best.expect("at least one attempt")
}

fn render_image<R: Rng>(cfg: &SyntheticConfig, size: usize, coverage: &[f64], rng: &mut R) -> Vec<f64> {
    let s = size as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.gen_range(0.0..2.0 * PI);
            let freq = rng.gen_range(0.5..2.5) * 2.0 * PI / s;
            (freq * angle.cos(), freq * angle.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.3..1.0))
        })
        .collect();
    let contrast = uniform(rng, cfg.contrast);
    let mut img: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            let tex: f64 = waves.iter().map(|(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin()).sum();
            cfg.background + cfg.texture_amplitude * tex / 3.0 + contrast * coverage[i]
        })
        .collect();
    let blobs = rng.gen_range(0..=cfg.max_distractors);
    for _ in 0..blobs {
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let sigma = rng.gen_range(1.5..3.5);
        let amp = contrast * rng.gen_range(0.7..1.2);
        for (i, v) in img.iter_mut().enumerate() {
            let (dx, dy) = ((i % size) as f64 - cx, (i / size) as f64 - cy);
            *v += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    gaussian_blur(&mut img, size, size, cfg.blur_sigma);
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("finite std");
        for v in &mut img {
            *v += normal.sample(rng);
        }
    }
    img.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

/// `count` single-channel samples of side `size` with ids `0000`, `0001`, ...
pub fn generate_synthetic(count: usize, size: usize, seed: u64) -> Result<Vec<ImageSample>> {
    generate_synthetic_with(&SyntheticConfig::default(), count, size, seed)
}

pub fn generate_synthetic_with(cfg: &SyntheticConfig, count: usize, size: usize, seed: u64) -> Result<Vec<ImageSample>> {
    cfg.validate()?;
    if size < 32 {
        return Err(Error::config("size", format!("must be >= 32, got {size}")));
    }
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, i));
            let (coverage, mask) = vessel_mask(cfg, size, &mut rng);
            let image = render_image(cfg, size, &coverage, &mut rng);
            let id = format!("{i:04}");
            ImageSample::new(
                Tensor::new(&[1, size, size], image)?,
                BinaryMask::new(size, size, mask)?,
                id.clone(),
                id,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic(4, 64, 7).unwrap();
        let b = generate_synthetic(4, 64, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(4, 64, 8).unwrap());
        assert_eq!(a[3].case_id, "0003");
    }

    #[test]
    fn tree_has_a_bifurcation() {
        let cfg = SyntheticConfig::default();
        for s in 0..50 {
            let t = VesselTree::generate(&cfg, 64, &mut ChaCha8Rng::seed_from_u64(s));
            assert!(t.branches >= 3);
            assert!(t.segments.iter().all(|g| g.width >= 1.0 && g.width <= 3.0));
        }
    }

    #[test]
    fn small_sizes_are_rejected() {
        assert!(matches!(generate_synthetic(1, 16, 0), Err(Error::Config { .. })));
    }
}
