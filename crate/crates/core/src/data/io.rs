use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::imageops::{dims3, resize_image, resize_mask};
use super::{sample_seed, ImageSample};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

/// Side length DRIVE images and masks are resized to.
pub const DRIVE_SIZE: usize = 512;
/// Side length liver crops are resized to.
pub const IRCADB_SIZE: usize = 256;
/// Pixels added on every side of the tight liver bounding box.
pub const IRCADB_PADDING: usize = 8;
/// CT slices are stored as unsigned 16-bit `HU + HU_OFFSET`.
pub const HU_OFFSET: f64 = 1024.0;
/// Intensity window mapped linearly onto `[0, 1]`.
pub const HU_WINDOW: (f64, f64) = (-100.0, 400.0);
pub const MANIFEST_FILE: &str = "manifest.csv";

const IMAGE_EXTENSIONS: &[&str] = &["png", "tif", "tiff", "gif"];

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an image as `(channels, h, w)` in `[0, 1]`: one channel for grey
/// files, three otherwise (alpha is dropped).
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.into_rgb32f();
        let mut data = vec![0.0; 3 * h * w];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px.0[c] as f64;
            }
        }
        Tensor::new(&[3, h, w], data)
    } else {
        let data = img.into_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
        Tensor::new(&[1, h, w], data)
    }
}

/// Reads a mask; pixels brighter than half intensity are foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = open(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryMask::new(h, w, img.into_raw().into_iter().map(|v| v > u16::MAX / 2).collect())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(path: &Path, buf: &[u8], w: usize, h: usize, color: image::ColorType) -> Result<()> {
    image::save_buffer_with_format(path, buf, w as u32, h as u32, color, image::ImageFormat::Png).map_err(|source| {
        Error::Image {
            path: path.to_path_buf(),
            source,
        }
    })
}

/// Writes an `h x w` plane of values in `[0, 1]` as 8-bit grey PNG.
pub fn write_gray_png(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    let buf: Vec<u8> = values.iter().map(|&v| to_u8(v)).collect();
    save(path, &buf, w, h, image::ColorType::L8)
}

/// Writes a `(3, h, w)` tensor as 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = dims3(image)?;
    if c != 3 {
        return Err(Error::shape("rgb image", 3, c));
    }
    let d = image.data();
    let buf: Vec<u8> = (0..h * w).flat_map(|i| (0..3).map(move |c| to_u8(d[c * h * w + i]))).collect();
    save(path, &buf, w, h, image::ColorType::Rgb8)
}

fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = dims3(image)?;
    match c {
        1 => write_gray_png(path, h, w, image.data()),
        3 => write_rgb_png(path, image),
        _ => Err(Error::shape("image channels", "1 or 3", c)),
    }
}

/// Leading digits of the file stem, or the whole stem when it has none.
fn pairing_key(path: &Path) -> Option<String> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().take_while(|c| c.is_ascii_digit()).collect();
    Some(if digits.is_empty() { stem.to_string() } else { digits })
}

/// Image files of `dir` with their pairing key, in key order (numeric first).
/// Numeric keys match by value, so `3` pairs with `03`.
fn keyed_files(dir: &Path) -> Result<BTreeMap<(u64, String), (String, PathBuf)>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let Some(key) = pairing_key(&path) else { continue };
        let slot = match key.parse::<u64>() {
            Ok(n) => (n, String::new()),
            Err(_) => (u64::MAX, key.clone()),
        };
        if let Some((_, prev)) = out.insert(slot, (key.clone(), path.clone())) {
            return Err(Error::Ingestion(format!(
                "{} and {} share the key {key}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Loads `root/images/*` paired with `root/masks/*` by numeric file-name
/// prefix, optionally resizing to `size` (bilinear images, nearest masks).
pub fn load_paired(root: &Path, size: Option<(usize, usize)>) -> Result<Vec<ImageSample>> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let images_dir = root.join("images");
    let images = if images_dir.is_dir() {
        keyed_files(&images_dir)?
    } else {
        BTreeMap::new()
    };
    if images.is_empty() {
        log::warn!("no images found under {}", root.display());
        return Ok(Vec::new());
    }
    let masks_dir = root.join("masks");
    let masks = if masks_dir.is_dir() {
        keyed_files(&masks_dir)?
    } else {
        BTreeMap::new()
    };
    let orphans: Vec<String> = images
        .iter()
        .filter(|(k, _)| !masks.contains_key(*k))
        .map(|(_, (_, p))| p.display().to_string())
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Ingestion(format!("no mask for: {}", orphans.join(", "))));
    }
    images
        .iter()
        .map(|(slot, (key, path))| {
            let mut image = read_image(path)?;
            let mut mask = read_mask(&masks[slot].1)?;
            if let Some((h, w)) = size {
                image = resize_image(&image, h, w)?;
                mask = resize_mask(&mask, h, w)?;
            }
            ImageSample::new(image, mask, key.clone(), key.clone())
        })
        .collect()
}

/// DRIVE-style layout resized to 512 x 512.
pub fn load_drive(root: &Path) -> Result<Vec<ImageSample>> {
    load_paired(root, Some((DRIVE_SIZE, DRIVE_SIZE)))
}

/// A dataset written by [`write_dataset`], at its stored size.
pub fn load_dataset(root: &Path) -> Result<Vec<ImageSample>> {
    load_paired(root, None)
}

/// Maps Hounsfield units through [`HU_WINDOW`] onto `[0, 1]`.
pub fn window_hu(hu: f64) -> f64 {
    let (lo, hi) = HU_WINDOW;
    ((hu - lo) / (hi - lo)).clamp(0.0, 1.0)
}

fn bounding_box(mask: &BinaryMask) -> Option<(usize, usize, usize, usize)> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..mask.rows() {
        for c in 0..mask.cols() {
            if mask.get(r, c) {
                (r0, r1, c0, c1) = (r0.min(r), r1.max(r), c0.min(c), c1.max(c));
            }
        }
    }
    (r0 != usize::MAX).then_some((r0, r1, c0, c1))
}

fn crop_plane(values: &[f64], w: usize, (r0, r1, c0, c1): (usize, usize, usize, usize)) -> Vec<f64> {
    (r0..=r1).flat_map(|r| values[r * w + c0..=r * w + c1].iter().copied()).collect()
}

fn load_slice(
    patient: &str,
    key: &str,
    image_path: &Path,
    liver_path: &Path,
    vessel_path: &Path,
) -> Result<Option<ImageSample>> {
    let raw = open(image_path)?.into_luma16();
    let (w, h) = (raw.width() as usize, raw.height() as usize);
    let liver = read_mask(liver_path)?;
    let vessel = read_mask(vessel_path)?;
    if (liver.rows(), liver.cols()) != (h, w) || (vessel.rows(), vessel.cols()) != (h, w) {
        return Err(Error::Ingestion(format!("{patient}/{key}: label size differs from the slice")));
    }
    let Some((r0, r1, c0, c1)) = bounding_box(&liver) else {
        log::warn!("{patient}/{key}: empty liver label, slice skipped");
        return Ok(None);
    };
    let p = IRCADB_PADDING;
    let bbox = (r0.saturating_sub(p), (r1 + p).min(h - 1), c0.saturating_sub(p), (c1 + p).min(w - 1));
    let (ch, cw) = (bbox.1 - bbox.0 + 1, bbox.3 - bbox.2 + 1);
    let hu: Vec<f64> = raw.into_raw().into_iter().map(|v| window_hu(v as f64 - HU_OFFSET)).collect();
    let image = Tensor::new(&[1, ch, cw], crop_plane(&hu, w, bbox))?;
    let vessel_values: Vec<f64> = vessel.values().iter().map(|&v| v as u8 as f64).collect();
    let mask = BinaryMask::from_values(ch, cw, &crop_plane(&vessel_values, w, bbox))?;
    let sample = ImageSample::new(
        resize_image(&image, IRCADB_SIZE, IRCADB_SIZE)?,
        resize_mask(&mask, IRCADB_SIZE, IRCADB_SIZE)?,
        format!("{patient}_{key}"),
        patient,
    )?;
    Ok(Some(sample))
}

/// Loads per-patient CT slices laid out as
/// `root/<patient>/{image,liver,vessel}/<slice>.png`, where `image` holds
/// 16-bit `HU + 1024`. Each slice is cropped to the padded liver box, windowed
/// and resized to 256 x 256. Samples are grouped by patient.
pub fn load_ircadb_slices(root: &Path) -> Result<Vec<ImageSample>> {
    let mut patients: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    patients.sort();
    let mut out = Vec::new();
    for dir in patients {
        let patient = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let image_dir = dir.join("image");
        if !image_dir.is_dir() {
            log::warn!("{patient}: no image directory, skipped");
            continue;
        }
        let slices = keyed_files(&image_dir)?;
        let labels = |name: &str| {
            let d = dir.join(name);
            if d.is_dir() {
                keyed_files(&d)
            } else {
                Ok(BTreeMap::new())
            }
        };
        let (liver, vessel) = (labels("liver")?, labels("vessel")?);
        for (slot, (key, path)) in &slices {
            let (Some((_, lp)), Some((_, vp))) = (liver.get(slot), vessel.get(slot)) else {
                log::warn!("{patient}/{key}: missing labels, slice skipped");
                continue;
            };
            if let Some(s) = load_slice(&patient, key, path, lp, vp)? {
                out.push(s);
            }
        }
    }
    if out.is_empty() {
        log::warn!("no usable slices found under {}", root.display());
    }
    Ok(out)
}

/// Writes `images/<id>.png`, `masks/<id>.png` and a manifest with columns
/// `case_id,seed,foreground_fraction`. With `synthetic_seed` set, the seed
/// column holds each sample's generator seed (by position); otherwise it is
/// left empty.
pub fn write_dataset(dir: &Path, samples: &[ImageSample], synthetic_seed: Option<u64>) -> Result<()> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = String::from("case_id,seed,foreground_fraction\n");
    for (i, s) in samples.iter().enumerate() {
        write_image(&dir.join("images").join(format!("{}.png", s.case_id)), &s.image)?;
        let (h, w) = s.size();
        write_gray_png(&dir.join("masks").join(format!("{}.png", s.case_id)), h, w, s.mask_tensor().data())?;
        let seed = synthetic_seed.map(|b| sample_seed(b, i).to_string()).unwrap_or_default();
        let _ = writeln!(manifest, "{},{seed},{:.6}", s.case_id, s.foreground_fraction());
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_endpoints() {
        assert_eq!(window_hu(-100.0), 0.0);
        assert_eq!(window_hu(400.0), 1.0);
        assert_eq!(window_hu(150.0), 0.5);
        assert_eq!(window_hu(-1000.0), 0.0);
    }

    #[test]
    fn pairing_keys() {
        assert_eq!(pairing_key(Path::new("a/21_training.tif")).unwrap(), "21");
        assert_eq!(pairing_key(Path::new("x.png")).unwrap(), "x");
    }
}
