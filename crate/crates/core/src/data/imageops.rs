//! Plane-level resampling and filtering on `(channels, h, w)` tensors.

use crate::autodiff::resize_plane;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

pub(crate) fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape("image", "(channels, h, w)", t.shape())),
    }
}

/// Bilinear resize of every channel (half-pixel centres).
pub fn resize_image(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(image)?;
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for plane in image.data().chunks(h * w) {
        data.extend(resize_plane(plane, h, w, out_h, out_w));
    }
    Tensor::new(&[c, out_h, out_w], data)
}

fn nearest_index(d: usize, in_len: usize, out_len: usize) -> usize {
    (((d as f64 + 0.5) * in_len as f64 / out_len as f64) as usize).min(in_len - 1)
}

/// Nearest-neighbour resize; the result stays binary.
pub fn resize_mask(mask: &BinaryMask, out_h: usize, out_w: usize) -> Result<BinaryMask> {
    let (h, w) = (mask.rows(), mask.cols());
    let mut values = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let sr = nearest_index(r, h, out_h);
        for c in 0..out_w {
            values.push(mask.get(sr, nearest_index(c, w, out_w)));
        }
    }
    let (sr, sc) = mask.spacing();
    BinaryMask::new(out_h, out_w, values)?.with_spacing(sr, sc)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of one plane in place, edges clamped.
/// A non-positive sigma leaves the plane unchanged.
pub fn gaussian_blur(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * plane[y * w + clamp(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
}
