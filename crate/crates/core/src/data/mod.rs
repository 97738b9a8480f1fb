//! Samples, dataset loaders, augmentation, fold splitting and a synthetic
//! vessel-tree generator.

mod augment;
mod folds;
pub mod imageops;
mod io;
mod synthetic;

pub use augment::{augment, AugmentationConfig};
pub use folds::{make_folds, FoldSplit};
pub use io::{
    load_dataset, load_drive, load_ircadb_slices, load_paired, read_image, read_mask, window_hu,
    write_dataset, write_gray_png, write_rgb_png, DRIVE_SIZE, HU_OFFSET, HU_WINDOW,
    IRCADB_PADDING, IRCADB_SIZE, MANIFEST_FILE,
};
pub use synthetic::{
    generate_synthetic, generate_synthetic_with, render_tree, sample_seed, Segment,
    SyntheticConfig, VesselTree, MAX_FOREGROUND, MIN_FOREGROUND, SYNTH_KEYS,
};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

/// An image with its vessel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `(channels, h, w)` with values in `[0, 1]`.
    pub image: Tensor,
    pub mask: BinaryMask,
    pub case_id: String,
    /// Cases sharing a group (e.g. slices of one patient) never straddle folds.
    pub group: String,
}

impl ImageSample {
    pub fn new(image: Tensor, mask: BinaryMask, case_id: impl Into<String>, group: impl Into<String>) -> Result<Self> {
        let (_, h, w) = imageops::dims3(&image)?;
        if (h, w) != (mask.rows(), mask.cols()) {
            return Err(Error::shape("image and mask", (h, w), (mask.rows(), mask.cols())));
        }
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            image,
            mask,
            case_id: case_id.into(),
            group: group.into(),
        })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.rows(), self.mask.cols())
    }

    pub fn spacing(&self) -> (f64, f64) {
        self.mask.spacing()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.count() as f64 / (self.mask.rows() * self.mask.cols()) as f64
    }

    /// The mask as a `(1, h, w)` tensor of zeros and ones.
    pub fn mask_tensor(&self) -> Tensor {
        let (h, w) = self.size();
        self.mask.to_tensor().reshape(&[1, h, w]).expect("same length")
    }
}

/// Stacks sample images into `(n, channels, h, w)`.
pub fn stack_images(samples: &[&ImageSample]) -> Result<Tensor> {
    batch(samples.iter().map(|s| s.image.clone()))
}

/// Stacks sample masks into `(n, 1, h, w)`.
pub fn stack_masks(samples: &[&ImageSample]) -> Result<Tensor> {
    batch(samples.iter().map(|s| s.mask_tensor()))
}

fn batch(items: impl Iterator<Item = Tensor>) -> Result<Tensor> {
    let items = items
        .map(|t| {
            let shape: Vec<usize> = std::iter::once(1).chain(t.shape().iter().copied()).collect();
            t.reshape(&shape)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}
