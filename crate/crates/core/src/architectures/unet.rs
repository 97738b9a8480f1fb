use rand::Rng;

use super::blocks::{conv_bn_relu, init_conv_bn_relu};
use super::{check_input, eval_forward, ModelConfig};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Binding, NetworkParams, ParamInit};
use crate::tensor::Tensor;

/// U-shaped segmenter: `depth` levels of two `conv-BN-ReLU` stages, 2x2 max
/// pooling on the way down, 2x2 transposed convolutions and skip concatenation
/// on the way up, and a 1x1 sigmoid head.
#[derive(Clone, Debug)]
pub struct UNet {
    config: ModelConfig,
}

impl UNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Spatial size of the deepest feature map.
    pub fn deepest_size(&self) -> (usize, usize) {
        self.config.level_size(self.config.depth)
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> NetworkParams {
        let cfg = &self.config;
        let mut init = ParamInit::new(rng);
        let mut in_ch = cfg.input_channels;
        for l in 1..=cfg.depth {
            let ch = cfg.channels(l);
            init_conv_bn_relu(&mut init, &format!("enc{l}.a"), in_ch, ch);
            init_conv_bn_relu(&mut init, &format!("enc{l}.b"), ch, ch);
            in_ch = ch;
        }
        for l in (1..cfg.depth).rev() {
            let ch = cfg.channels(l);
            init.conv_transpose(&format!("up{l}"), cfg.channels(l + 1), ch);
            init_conv_bn_relu(&mut init, &format!("dec{l}.a"), 2 * ch, ch);
            init_conv_bn_relu(&mut init, &format!("dec{l}.b"), ch, ch);
        }
        init.conv("head", 1, cfg.channels(1), 1);
        init.finish()
    }

    /// Forward pass on the graph; returns per-pixel probabilities `(n, 1, h, w)`.
    pub fn forward_graph(&self, g: &mut Graph, b: &mut Binding, x: Var) -> Result<Var> {
        let cfg = &self.config;
        check_input(g.value(x), cfg.input_channels, cfg.input_size, "segmenter input")?;
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut h = x;
        for l in 1..=cfg.depth {
            if l > 1 {
                h = g.max_pool(h, 2, 2)?;
            }
            h = conv_bn_relu(g, b, &format!("enc{l}.a"), h)?;
            h = conv_bn_relu(g, b, &format!("enc{l}.b"), h)?;
            skips.push(h);
        }
        for l in (1..cfg.depth).rev() {
            let up = b.conv_transpose(g, &format!("up{l}"), h)?;
            h = g.concat_channels(skips[l - 1], up)?;
            h = conv_bn_relu(g, b, &format!("dec{l}.a"), h)?;
            h = conv_bn_relu(g, b, &format!("dec{l}.b"), h)?;
        }
        let logits = b.conv(g, "head", h, 0)?;
        Ok(g.sigmoid(logits))
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, params: &NetworkParams, x: &Tensor) -> Result<Tensor> {
        eval_forward(params, x, |g, b, v| self.forward_graph(g, b, v))
    }
}

/// Builds and initializes a U-Net for `config`.
pub fn build_unet<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<(UNet, NetworkParams)> {
    let net = UNet::new(config.clone())?;
    let params = net.init(rng);
    Ok((net, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deepest_map_sizes() {
        let cfg = ModelConfig {
            depth: 4,
            base_channels: 16,
            ..ModelConfig::default()
        };
        assert_eq!(UNet::new(cfg).unwrap().deepest_size(), (8, 8));
        let cfg = ModelConfig {
            depth: 5,
            input_size: (512, 512),
            ..ModelConfig::default()
        };
        assert_eq!(UNet::new(cfg).unwrap().deepest_size(), (32, 32));
        let cfg = ModelConfig {
            depth: 3,
            input_size: (33, 33),
            ..ModelConfig::default()
        };
        assert!(matches!(build_unet(&cfg, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config { .. })));
    }

    #[test]
    fn output_is_a_probability_map() {
        let cfg = ModelConfig {
            depth: 4,
            base_channels: 2,
            ..ModelConfig::default()
        };
        let (net, p) = build_unet(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Tensor::new(&[1, 1, 64, 64], (0..4096).map(|i| (i as f64 * 0.01).sin()).collect()).unwrap();
        let y = net.forward(&p, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 64, 64]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let wrong = Tensor::zeros(&[1, 1, 48, 64]);
        assert!(matches!(net.forward(&p, &wrong), Err(Error::Shape { .. })));
    }
}
