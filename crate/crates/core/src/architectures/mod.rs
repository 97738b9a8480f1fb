//! The three trainable networks: the U-Net segmenter, the undercomplete CAE
//! and the semi-overcomplete S-OCAE, plus their shared blocks.

mod autoencoder;
pub mod blocks;
mod config;
pub mod receptive;
mod unet;

pub use autoencoder::{AutoEncoder, EncoderTrace};
pub use config::{ModelConfig, NetworkKind, MODEL_KEYS};
pub use unet::{build_unet, UNet};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, Mode, NetworkParams};
use crate::tensor::Tensor;

/// A hidden layer output `(batch, channels, height, width)` at depth `level`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub level: usize,
}

/// Flattened bottleneck `(batch, c*h*w)`, channel-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub values: Tensor,
    /// `(channels, height, width)` of the unflattened code.
    pub source_shape: (usize, usize, usize),
}

impl LatentCode {
    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.values.shape()[1];
        &self.values.data()[i * len..(i + 1) * len]
    }
}

pub(crate) fn check_input(
    x: &Tensor,
    channels: usize,
    size: (usize, usize),
    context: &str,
) -> Result<()> {
    let (n, c, h, w) = x.dims4()?;
    if n == 0 || c != channels || (h, w) != size {
        return Err(Error::shape(
            context,
            format!("(_, {channels}, {}, {})", size.0, size.1),
            x.shape(),
        ));
    }
    Ok(())
}

/// Runs `f` on a fresh graph in evaluation mode with frozen parameters.
pub(crate) fn eval_forward(
    params: &NetworkParams,
    x: &Tensor,
    f: impl FnOnce(&mut Graph, &mut Binding, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binding::new(params, Mode::Eval, false);
    let v = g.input(x.clone());
    let out = f(&mut g, &mut b, v)?;
    Ok(g.value(out).clone())
}
