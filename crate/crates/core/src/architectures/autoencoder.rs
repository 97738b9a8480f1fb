use rand::Rng;

use super::blocks::{
    communication_block, conv_bn_relu, flatten, fusion_block, init_communication_block,
    init_conv_bn_relu, init_fusion_block,
};
use super::{check_input, eval_forward, FeatureMap, LatentCode, ModelConfig, NetworkKind};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, Mode, NetworkParams, ParamInit};
use crate::tensor::Tensor;

/// Shape auto-encoder over single-channel masks: either the plain
/// undercomplete CAE or the semi-overcomplete S-OCAE. Both share the same
/// decoder.
#[derive(Clone, Debug)]
pub struct AutoEncoder {
    kind: NetworkKind,
    config: ModelConfig,
}

/// Intermediate maps of one S-OCAE encoding.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    /// `F_EU^l` for `l = 1..=depth` (before any communication-block update).
    pub undercomplete: Vec<FeatureMap>,
    /// `F_EO^1` and `F_EO^2`.
    pub overcomplete: Vec<FeatureMap>,
    pub latent: LatentCode,
}

impl AutoEncoder {
    pub fn new(kind: NetworkKind, config: ModelConfig) -> Result<Self> {
        if kind == NetworkKind::Unet {
            return Err(Error::config("prior", "a U-Net is not an auto-encoder"));
        }
        config.validate_undercomplete()?;
        Ok(Self { kind, config })
    }

    pub fn cae(config: ModelConfig) -> Result<Self> {
        Self::new(NetworkKind::Cae, config)
    }

    pub fn socae(config: ModelConfig) -> Result<Self> {
        Self::new(NetworkKind::Socae, config)
    }

    pub fn kind(&self) -> NetworkKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn level_out(&self, level: usize) -> usize {
        if level == self.config.depth {
            self.config.latent_channels()
        } else {
            self.config.channels(level)
        }
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> NetworkParams {
        let cfg = &self.config;
        let d = cfg.depth;
        let j = cfg.residual_units;
        let mut init = ParamInit::new(rng);
        let mut in_ch = 1;
        for l in 1..=d {
            init_conv_bn_relu(&mut init, &format!("enc{l}"), in_ch, self.level_out(l));
            in_ch = self.level_out(l);
        }
        if self.kind == NetworkKind::Socae {
            let c = cfg.channels(d - 1);
            init_conv_bn_relu(&mut init, "eo1", c, c);
            if cfg.communication_block {
                init_communication_block(&mut init, "cb", c, j);
            }
            init_conv_bn_relu(&mut init, "eo2", c, cfg.latent_channels());
            init_fusion_block(&mut init, "fb", cfg.latent_channels(), j);
        }
        for l in (1..d).rev() {
            let ch = cfg.channels(l);
            init.conv_transpose(&format!("dec{l}.up"), self.level_out(l + 1), ch);
            init.batch_norm(&format!("dec{l}.upbn"), ch);
            init_conv_bn_relu(&mut init, &format!("dec{l}.c"), ch, ch);
        }
        init.conv("head", 1, cfg.channels(1), 1);
        init.finish()
    }

    /// Encodes masks `(n, 1, h, w)` to the 4-D latent `(n, c, h', w')`.
    pub fn encode_graph(&self, g: &mut Graph, b: &mut Binding, y: Var) -> Result<Var> {
        self.encode_traced(g, b, y, None)
    }

    fn encode_traced(
        &self,
        g: &mut Graph,
        b: &mut Binding,
        y: Var,
        mut trace: Option<&mut (Vec<Var>, Vec<Var>)>,
    ) -> Result<Var> {
        let cfg = &self.config;
        check_input(g.value(y), 1, cfg.input_size, "auto-encoder input")?;
        let d = cfg.depth;
        let mut h = y;
        let last_plain = if self.kind == NetworkKind::Socae { d - 1 } else { d };
        for l in 1..=last_plain {
            if l > 1 {
                h = g.max_pool(h, 2, 2)?;
            }
            h = conv_bn_relu(g, b, &format!("enc{l}"), h)?;
            if let Some(t) = trace.as_deref_mut() {
                t.0.push(h);
            }
        }
        if self.kind == NetworkKind::Cae {
            return Ok(h);
        }

        let n = cfg.overcomplete_factor;
        let (sh, sw) = cfg.level_size(d - 1);
        let up = g.resize_bilinear(h, sh * n, sw * n)?;
        let mut f_eo1 = conv_bn_relu(g, b, "eo1", up)?;
        let mut f_eu = h;
        if let Some(t) = trace.as_deref_mut() {
            t.1.push(f_eo1);
        }
        if cfg.communication_block {
            (f_eu, f_eo1) =
                communication_block(g, b, "cb", f_eu, f_eo1, n, cfg.residual_units)?;
        }
        let pooled = g.max_pool(f_eu, 2, 2)?;
        let f_bottom = conv_bn_relu(g, b, &format!("enc{d}"), pooled)?;
        let up2 = g.resize_bilinear(f_eo1, sh * n * n, sw * n * n)?;
        let f_eo2 = conv_bn_relu(g, b, "eo2", up2)?;
        if let Some(t) = trace.as_deref_mut() {
            t.0.push(f_bottom);
            t.1.push(f_eo2);
        }
        fusion_block(g, b, "fb", f_bottom, f_eo2, cfg.residual_units)
    }

    /// Decodes a 4-D latent into per-pixel probabilities `(n, 1, h, w)`.
    pub fn decode_graph(&self, g: &mut Graph, b: &mut Binding, z: Var) -> Result<Var> {
        let cfg = &self.config;
        let (c, lh, lw) = cfg.latent_shape();
        let (n, zc, zh, zw) = g.value(z).dims4()?;
        if (zc, zh, zw) != (c, lh, lw) {
            return Err(Error::shape("decoder input", (n, c, lh, lw), g.value(z).shape()));
        }
        let mut h = z;
        for l in (1..cfg.depth).rev() {
            h = b.conv_transpose(g, &format!("dec{l}.up"), h)?;
            h = b.batch_norm(g, &format!("dec{l}.upbn"), h)?;
            h = g.relu(h);
            h = conv_bn_relu(g, b, &format!("dec{l}.c"), h)?;
        }
        let logits = b.conv(g, "head", h, 0)?;
        Ok(g.sigmoid(logits))
    }

    /// `decode(encode(y))` on the graph.
    pub fn forward_graph(&self, g: &mut Graph, b: &mut Binding, y: Var) -> Result<Var> {
        let z = self.encode_graph(g, b, y)?;
        self.decode_graph(g, b, z)
    }

    pub fn encode(&self, params: &NetworkParams, y: &Tensor) -> Result<LatentCode> {
        let z = eval_forward(params, y, |g, b, v| {
            let z = self.encode_graph(g, b, v)?;
            flatten(g, z)
        })?;
        Ok(LatentCode {
            values: z,
            source_shape: self.config.latent_shape(),
        })
    }

    pub fn decode(&self, params: &NetworkParams, z: &LatentCode) -> Result<Tensor> {
        let (c, h, w) = self.config.latent_shape();
        let len = c * h * w;
        let shape = z.values.shape();
        if shape.len() != 2 || shape[1] != len || z.source_shape != (c, h, w) {
            return Err(Error::shape("latent code", ("_", len), shape));
        }
        let n = shape[0];
        let v = z.values.clone().reshape(&[n, c, h, w])?;
        eval_forward(params, &v, |g, b, x| self.decode_graph(g, b, x))
    }

    /// Evaluation-mode reconstruction.
    pub fn forward(&self, params: &NetworkParams, y: &Tensor) -> Result<Tensor> {
        eval_forward(params, y, |g, b, v| self.forward_graph(g, b, v))
    }

    /// Evaluation-mode encoding that also returns every intermediate map.
    pub fn trace(&self, params: &NetworkParams, y: &Tensor) -> Result<EncoderTrace> {
        let mut g = Graph::new();
        let mut b = Binding::new(params, Mode::Eval, false);
        let v = g.input(y.clone());
        let mut t = (Vec::new(), Vec::new());
        let z = self.encode_traced(&mut g, &mut b, v, Some(&mut t))?;
        let flat = flatten(&mut g, z)?;
        let maps = |vars: &[Var], levels: &mut dyn Iterator<Item = usize>| {
            vars.iter()
                .zip(levels)
                .map(|(v, level)| FeatureMap {
                    values: g.value(*v).clone(),
                    level,
                })
                .collect::<Vec<_>>()
        };
        Ok(EncoderTrace {
            undercomplete: maps(&t.0, &mut (1..)),
            overcomplete: maps(&t.1, &mut (1..)),
            latent: LatentCode {
                values: g.value(flat).clone(),
                source_shape: self.config.latent_shape(),
            },
        })
    }
}
