use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::imageops::{dims3, gaussian_blur};
use super::ImageSample;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

/// Ranges sampled uniformly per call. A range `(a, a)` always yields `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub rotation_deg: (f64, f64),
    pub shear_deg: (f64, f64),
    /// Fraction of the image side, applied independently per axis.
    pub translate_frac: (f64, f64),
    pub flip: bool,
    /// Chance of a horizontal flip when `flip` is set.
    pub flip_probability: f64,
    pub blur_sigma: (f64, f64),
    pub noise_std: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation_deg: (-15.0, 15.0),
            shear_deg: (-10.0, 10.0),
            translate_frac: (-0.1, 0.1),
            flip: true,
            flip_probability: 0.5,
            blur_sigma: (0.0, 1.5),
            noise_std: (0.0, 0.05),
        }
    }
}

impl AugmentationConfig {
    /// Leaves every sample unchanged.
    pub fn identity() -> Self {
        Self {
            rotation_deg: (0.0, 0.0),
            shear_deg: (0.0, 0.0),
            translate_frac: (0.0, 0.0),
            flip: false,
            flip_probability: 0.0,
            blur_sigma: (0.0, 0.0),
            noise_std: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_deg", self.rotation_deg),
            ("shear_deg", self.shear_deg),
            ("translate_frac", self.translate_frac),
            ("blur_sigma", self.blur_sigma),
            ("noise_std", self.noise_std),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(name, format!("invalid range ({lo}, {hi})")));
            }
        }
        if self.shear_deg.0 <= -90.0 || self.shear_deg.1 >= 90.0 {
            return Err(Error::config("shear_deg", "must lie strictly within (-90, 90)"));
        }
        if self.blur_sigma.0 < 0.0 || self.noise_std.0 < 0.0 {
            return Err(Error::config("blur_sigma", "blur and noise ranges must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::config("flip_probability", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Inverse of a centred affine map: output pixel to input coordinates.
struct InverseAffine {
    m: [[f64; 2]; 2],
    t: (f64, f64),
    centre: (f64, f64),
}

impl InverseAffine {
    fn new(rot: f64, shear: f64, flip: bool, t: (f64, f64), centre: (f64, f64)) -> Self {
        let (s, c) = rot.sin_cos();
        let k = shear.tan();
        let f = if flip { -1.0 } else { 1.0 };
        // Forward map on (x, y): rotation * shear * flip.
        let fwd = [[c * f, c * k - s], [s * f, s * k + c]];
        let det = fwd[0][0] * fwd[1][1] - fwd[0][1] * fwd[1][0];
        let m = [
            [fwd[1][1] / det, -fwd[0][1] / det],
            [-fwd[1][0] / det, fwd[0][0] / det],
        ];
        Self { m, t, centre }
    }

    fn source(&self, x: f64, y: f64) -> (f64, f64) {
        let (px, py) = (x - self.centre.0 - self.t.0, y - self.centre.1 - self.t.1);
        (
            self.m[0][0] * px + self.m[0][1] * py + self.centre.0,
            self.m[1][0] * px + self.m[1][1] * py + self.centre.1,
        )
    }
}

fn bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Applies one random geometric transform to image and mask together, then
/// blur and noise to the image alone. Masks are resampled nearest-neighbour
/// (outside the frame counts as background); images are edge-clamped
/// bilinear and clipped to `[0, 1]`.
pub fn augment<R: Rng>(sample: &ImageSample, cfg: &AugmentationConfig, rng: &mut R) -> Result<ImageSample> {
    cfg.validate()?;
    let (ch, h, w) = dims3(&sample.image)?;
    let rot = uniform(rng, cfg.rotation_deg).to_radians();
    let shear = uniform(rng, cfg.shear_deg).to_radians();
    let tx = uniform(rng, cfg.translate_frac) * w as f64;
    let ty = uniform(rng, cfg.translate_frac) * h as f64;
    let flip = cfg.flip && rng.gen_bool(cfg.flip_probability);
    let sigma = uniform(rng, cfg.blur_sigma);
    let noise = uniform(rng, cfg.noise_std);

    let geometric = rot != 0.0 || shear != 0.0 || tx != 0.0 || ty != 0.0 || flip;
    let mut image = sample.image.data().to_vec();
    let mut mask = sample.mask.clone();
    if geometric {
        let centre = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let inv = InverseAffine::new(rot, shear, flip, (tx, ty), centre);
        let mut values = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = inv.source(x as f64, y as f64);
                for c in 0..ch {
                    let plane = &sample.image.data()[c * h * w..(c + 1) * h * w];
                    image[c * h * w + y * w + x] = bilinear(plane, h, w, sx, sy);
                }
                let (rx, ry) = (sx.round(), sy.round());
                if rx >= 0.0 && ry >= 0.0 && (rx as usize) < w && (ry as usize) < h {
                    values[y * w + x] = sample.mask.get(ry as usize, rx as usize);
                }
            }
        }
        let (sr, sc) = sample.mask.spacing();
        mask = BinaryMask::new(h, w, values)?.with_spacing(sr, sc)?;
    }
    for plane in image.chunks_mut(h * w) {
        gaussian_blur(plane, h, w, sigma);
    }
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).expect("finite std");
        for v in &mut image {
            *v += normal.sample(rng);
        }
    }
    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }
    ImageSample::new(
        Tensor::new(&[ch, h, w], image)?,
        mask,
        sample.case_id.clone(),
        sample.group.clone(),
    )
}
