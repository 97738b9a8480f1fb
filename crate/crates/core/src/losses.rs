//! Reconstruction loss, latent cosine shape prior, weighted cross-entropy and
//! the lambda-weighted total objective.
//!
//! Reductions are means: over elements for the pixel losses and over the batch
//! for the shape prior.

use crate::architectures::{blocks::flatten, AutoEncoder, LatentCode, UNet};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, Mode, NetworkParams};
use crate::tensor::Tensor;

/// A scalar loss with its optional breakdown.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub seg: Option<f64>,
    pub shape: Option<f64>,
}

impl LossValue {
    fn plain(value: f64) -> Self {
        Self {
            value,
            seg: None,
            shape: None,
        }
    }
}

/// Positive-class weight of the segmentation cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights {
    positive_weight: f64,
}

impl ClassWeights {
    pub fn new(positive_weight: f64) -> Result<Self> {
        if !positive_weight.is_finite() || positive_weight <= 0.0 {
            return Err(Error::config(
                "pos_weight",
                format!("must be finite and > 0, got {positive_weight}"),
            ));
        }
        Ok(Self { positive_weight })
    }

    pub fn positive_weight(&self) -> f64 {
        self.positive_weight
    }

    /// `total pixels / foreground pixels` over the given masks.
    pub fn inverse_foreground_frequency<'a>(masks: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let (mut fg, mut total) = (0.0, 0usize);
        for m in masks {
            fg += m.sum();
            total += m.len();
        }
        if fg <= 0.0 {
            return Err(Error::Validation("training masks contain no foreground".into()));
        }
        Self::new(total as f64 / fg)
    }
}

fn check_same(a: &Tensor, b: &Tensor, context: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(context, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_binary(y: &Tensor) -> Result<()> {
    match y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::Validation(format!("mask value {v} is not binary"))),
        None => Ok(()),
    }
}

/// Mean squared error between a mask and its reconstruction.
pub fn reconstruction_loss(y: &Tensor, y_tilde: &Tensor) -> Result<LossValue> {
    check_same(y, y_tilde, "reconstruction loss")?;
    let mut g = Graph::new();
    let (a, b) = (g.input(y.clone()), g.input(y_tilde.clone()));
    let l = g.mse(a, b)?;
    Ok(LossValue::plain(g.value(l).data()[0]))
}

/// Mean over the batch of `1 - cos(z_gt, z_pred)`; range `[0, 2]`.
pub fn shape_prior_loss(z_gt: &LatentCode, z_pred: &LatentCode) -> Result<LossValue> {
    check_same(&z_gt.values, &z_pred.values, "shape prior loss")?;
    let mut g = Graph::new();
    let (a, b) = (g.input(z_gt.values.clone()), g.input(z_pred.values.clone()));
    let l = g.cosine_distance(a, b)?;
    Ok(LossValue::plain(g.value(l).data()[0]))
}

/// Weighted binary cross-entropy with probability clamping at `1e-7`.
pub fn weighted_bce(y: &Tensor, y_hat: &Tensor, w: ClassWeights) -> Result<LossValue> {
    check_same(y, y_hat, "weighted bce")?;
    check_binary(y)?;
    let mut g = Graph::new();
    let p = g.input(y_hat.clone());
    let l = g.weighted_bce(y, p, w.positive_weight)?;
    Ok(LossValue::plain(g.value(l).data()[0]))
}

/// A frozen shape prior: an auto-encoder and its pretrained parameters.
#[derive(Clone, Copy)]
pub struct ShapePrior<'a> {
    pub encoder: &'a AutoEncoder,
    pub params: &'a NetworkParams,
}

/// Graph nodes of one evaluation of the total objective.
pub struct ObjectiveVars {
    pub prediction: Var,
    pub seg: Var,
    pub shape: Option<Var>,
    pub total: Var,
}

/// Builds `seg + lambda * shape` on `g`.
///
/// The prior's parameters are bound as constants in evaluation mode, so the
/// shape term sends gradient into the prediction but never into the encoder.
/// Soft predictions are encoded directly.
pub fn objective_graph(
    g: &mut Graph,
    segmenter: &UNet,
    seg_binding: &mut Binding,
    prior: Option<ShapePrior>,
    x: Var,
    y: &Tensor,
    weights: ClassWeights,
    lambda: f64,
) -> Result<ObjectiveVars> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config("lambda", format!("must be finite and >= 0, got {lambda}")));
    }
    let prediction = segmenter.forward_graph(g, seg_binding, x)?;
    let seg = g.weighted_bce(y, prediction, weights.positive_weight)?;
    let Some(prior) = prior else {
        return Ok(ObjectiveVars {
            prediction,
            seg,
            shape: None,
            total: seg,
        });
    };
    let mut frozen = Binding::new(prior.params, Mode::Eval, false);
    let yv = g.input(y.clone());
    let z_gt = prior.encoder.encode_graph(g, &mut frozen, yv)?;
    let z_gt = flatten(g, z_gt)?;
    let z_pred = prior.encoder.encode_graph(g, &mut frozen, prediction)?;
    let z_pred = flatten(g, z_pred)?;
    let shape = g.cosine_distance(z_gt, z_pred)?;
    let weighted = g.scale(shape, lambda);
    let total = g.add(seg, weighted)?;
    Ok(ObjectiveVars {
        prediction,
        seg,
        shape: Some(shape),
        total,
    })
}

/// Evaluates `seg(y, phi(x)) + lambda * shape(y, phi(x))`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    y: &Tensor,
    x: &Tensor,
    segmenter: &UNet,
    segmenter_params: &NetworkParams,
    prior: Option<ShapePrior>,
    weights: ClassWeights,
    lambda: f64,
    mode: Mode,
) -> Result<LossValue> {
    check_binary(y)?;
    let mut g = Graph::new();
    let mut b = Binding::new(segmenter_params, mode, false);
    let xv = g.input(x.clone());
    let vars = objective_graph(&mut g, segmenter, &mut b, prior, xv, y, weights, lambda)?;
    Ok(LossValue {
        value: g.value(vars.total).data()[0],
        seg: Some(g.value(vars.seg).data()[0]),
        shape: Some(vars.shape.map_or(0.0, |s| g.value(s).data()[0])),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architectures::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
    }

    fn latent(v: &[f64]) -> LatentCode {
        LatentCode {
            values: t(v),
            source_shape: (v.len(), 1, 1),
        }
    }

    #[test]
    fn reconstruction_anchors() {
        let y = t(&[1.0, 0.0]);
        assert_eq!(reconstruction_loss(&y, &y).unwrap().value, 0.0);
        assert_eq!(reconstruction_loss(&Tensor::full(&[2, 3], 1.0), &Tensor::zeros(&[2, 3])).unwrap().value, 1.0);
        assert_eq!(reconstruction_loss(&y, &t(&[0.5, 0.5])).unwrap().value, 0.25);
        assert!(reconstruction_loss(&y, &t(&[0.5])).is_err());
    }

    #[test]
    fn shape_prior_anchors() {
        let z = latent(&[1.0, 2.0, -0.5]);
        assert!(shape_prior_loss(&z, &z).unwrap().value.abs() < 1e-15);
        let orth = latent(&[2.0, -1.0, 0.0]);
        assert!((shape_prior_loss(&z, &orth).unwrap().value - 1.0).abs() < 1e-15);
        let neg = latent(&[-1.0, -2.0, 0.5]);
        assert!((shape_prior_loss(&z, &neg).unwrap().value - 2.0).abs() < 1e-15);
        let zero = latent(&[0.0, 0.0, 0.0]);
        assert_eq!(shape_prior_loss(&z, &zero).unwrap().value, 1.0);
    }

    #[test]
    fn bce_anchors() {
        let w1 = ClassWeights::new(1.0).unwrap();
        let w2 = ClassWeights::new(2.0).unwrap();
        let l = weighted_bce(&t(&[1.0]), &t(&[0.5]), w1).unwrap().value;
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = weighted_bce(&t(&[1.0]), &t(&[0.5]), w2).unwrap().value;
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let y = t(&[1.0, 0.0, 1.0]);
        let near = t(&[1.0 - 1e-7, 1e-7, 1.0]);
        assert!(weighted_bce(&y, &near, w1).unwrap().value < 1e-6);
        assert!(matches!(weighted_bce(&t(&[0.5]), &t(&[0.5]), w1), Err(Error::Validation(_))));
        assert!(ClassWeights::new(0.0).is_err());
        assert!(ClassWeights::new(f64::NAN).is_err());
    }

    #[test]
    fn inverse_frequency() {
        let m = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(ClassWeights::inverse_foreground_frequency([&m]).unwrap().positive_weight(), 4.0);
        assert!(ClassWeights::inverse_foreground_frequency([&Tensor::zeros(&[2])]).is_err());
    }

    #[test]
    fn total_loss_degenerate_cases() {
        let cfg = ModelConfig {
            depth: 3,
            base_channels: 2,
            input_size: (16, 16),
            latent_channels: Some(4),
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let unet = UNet::new(cfg.clone()).unwrap();
        let sp = unet.init(&mut rng);
        let ae = AutoEncoder::socae(cfg).unwrap();
        let ap = ae.init(&mut rng);
        let x = Tensor::new(&[1, 1, 16, 16], (0..256).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let y = Tensor::new(&[1, 1, 16, 16], (0..256).map(|i| (i % 5 == 0) as u8 as f64).collect()).unwrap();
        let w = ClassWeights::new(3.0).unwrap();
        let prior = Some(ShapePrior { encoder: &ae, params: &ap });
        let l0 = total_loss(&y, &x, &unet, &sp, prior, w, 0.0, Mode::Eval).unwrap();
        let pred = unet.forward(&sp, &x).unwrap();
        assert_eq!(l0.value, weighted_bce(&y, &pred, w).unwrap().value);
        let l40 = total_loss(&y, &x, &unet, &sp, prior, w, 40.0, Mode::Eval).unwrap();
        assert!((l40.value - (l40.seg.unwrap() + 40.0 * l40.shape.unwrap())).abs() < 1e-12);
        assert!(matches!(
            total_loss(&y, &x, &unet, &sp, prior, w, -1.0, Mode::Eval),
            Err(Error::Config { .. })
        ));
    }
}
