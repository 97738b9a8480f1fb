use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, EpochSummary, LogRecord, TrainingLog};
use super::config::{Stage, TrainConfig};
use super::optim::Adam;
use crate::architectures::{AutoEncoder, ModelConfig, NetworkKind, UNet};
use crate::autodiff::{BatchStats, Graph};
use crate::data::{augment, stack_images, stack_masks, ImageSample};
use crate::error::{Error, Result};
use crate::losses::{objective_graph, ClassWeights, LossValue, ShapePrior};
use crate::metrics::{dice, BinaryMask};
use crate::params::{Binding, Mode, NetworkParams};
use crate::tensor::Tensor;

/// Samples per forward pass when evaluating.
const EVAL_BATCH: usize = 8;

/// Loss and parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub loss: LossValue,
    pub grads: BTreeMap<String, Tensor>,
    pub stats: Vec<(String, BatchStats)>,
}

fn collect_grads(g: &Graph, b: &Binding, root: crate::autodiff::Var) -> BTreeMap<String, Tensor> {
    let grads = g.backward(root);
    b.vars()
        .iter()
        .filter_map(|(name, v)| grads.get(*v).map(|t| (name.clone(), t.clone())))
        .collect()
}

fn apply(adam: &mut Adam, params: &mut NetworkParams, step: StepGradients) -> Result<LossValue> {
    adam.step(params, &step.grads)?;
    params.update_running_stats(&step.stats)?;
    Ok(step.loss)
}

/// Optimizes a U-Net against the (optionally shape-regularized) objective.
pub struct SegmenterTrainer<'a> {
    unet: UNet,
    params: NetworkParams,
    adam: Adam,
    prior: Option<ShapePrior<'a>>,
    weights: ClassWeights,
    lambda: f64,
}

impl<'a> SegmenterTrainer<'a> {
    /// Fails with a configuration error when the prior cannot encode the
    /// segmenter's output.
    pub fn new(
        unet: UNet,
        params: NetworkParams,
        learning_rate: f64,
        prior: Option<ShapePrior<'a>>,
        weights: ClassWeights,
        lambda: f64,
    ) -> Result<Self> {
        if let Some(p) = &prior {
            let enc = p.encoder.config().input_size;
            if enc != unet.config().input_size {
                return Err(Error::config(
                    "input_size",
                    format!(
                        "prior encodes {}x{} masks but the segmenter outputs {}x{}",
                        enc.0,
                        enc.1,
                        unet.config().input_size.0,
                        unet.config().input_size.1
                    ),
                ));
            }
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::config("lambda", format!("must be finite and >= 0, got {lambda}")));
        }
        Ok(Self {
            unet,
            params,
            adam: Adam::new(learning_rate),
            prior,
            weights,
            lambda,
        })
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn into_params(self) -> NetworkParams {
        self.params
    }

    /// Loss and gradients on one batch without updating anything.
    pub fn gradients(&self, x: &Tensor, y: &Tensor) -> Result<StepGradients> {
        let mut g = Graph::new();
        let mut b = Binding::new(&self.params, Mode::Train, true);
        let xv = g.input(x.clone());
        let vars = objective_graph(&mut g, &self.unet, &mut b, self.prior, xv, y, self.weights, self.lambda)?;
        let loss = LossValue {
            value: g.value(vars.total).data()[0],
            seg: Some(g.value(vars.seg).data()[0]),
            shape: vars.shape.map(|s| g.value(s).data()[0]),
        };
        let grads = collect_grads(&g, &b, vars.total);
        Ok(StepGradients {
            loss,
            grads,
            stats: b.take_stats(),
        })
    }

    /// One Adam step on a batch; returns the loss before the update.
    pub fn step(&mut self, x: &Tensor, y: &Tensor) -> Result<LossValue> {
        let s = self.gradients(x, y)?;
        apply(&mut self.adam, &mut self.params, s)
    }
}

/// Optimizes an auto-encoder to reconstruct masks.
pub struct AutoEncoderTrainer {
    net: AutoEncoder,
    params: NetworkParams,
    adam: Adam,
}

impl AutoEncoderTrainer {
    pub fn new(net: AutoEncoder, params: NetworkParams, learning_rate: f64) -> Self {
        Self {
            net,
            params,
            adam: Adam::new(learning_rate),
        }
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn gradients(&self, y: &Tensor) -> Result<StepGradients> {
        let mut g = Graph::new();
        let mut b = Binding::new(&self.params, Mode::Train, true);
        let yv = g.input(y.clone());
        let rec = self.net.forward_graph(&mut g, &mut b, yv)?;
        let loss = g.mse(rec, yv)?;
        let value = g.value(loss).data()[0];
        let grads = collect_grads(&g, &b, loss);
        Ok(StepGradients {
            loss: LossValue {
                value,
                seg: Some(value),
                shape: None,
            },
            grads,
            stats: b.take_stats(),
        })
    }

    pub fn step(&mut self, y: &Tensor) -> Result<LossValue> {
        let s = self.gradients(y)?;
        apply(&mut self.adam, &mut self.params, s)
    }
}

/// Best checkpoint plus the full training curve.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
}

fn check_samples(samples: &[ImageSample], model: &ModelConfig, channels: Option<usize>, what: &str) -> Result<()> {
    for s in samples {
        if s.size() != model.input_size {
            return Err(Error::config(
                "input_size",
                format!(
                    "{what} case {} is {}x{} but the model expects {}x{}",
                    s.case_id,
                    s.size().0,
                    s.size().1,
                    model.input_size.0,
                    model.input_size.1
                ),
            ));
        }
        if let Some(c) = channels {
            if s.channels() != c {
                return Err(Error::config(
                    "input_channels",
                    format!("{what} case {} has {} channels, model expects {c}", s.case_id, s.channels()),
                ));
            }
        }
    }
    Ok(())
}

/// Epoch loop shared by both stages. `step` consumes a batch and returns its
/// loss; `validate` scores the current parameters (`true` = higher is better).
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    train: &[ImageSample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    higher_is_better: bool,
    mut step: impl FnMut(&[&ImageSample]) -> Result<LossValue>,
    mut validate: impl FnMut() -> Result<Option<f64>>,
    mut snapshot: impl FnMut() -> NetworkParams,
) -> Result<(NetworkParams, usize, f64, TrainingLog)> {
    if train.is_empty() {
        return Err(Error::Validation("no training samples".into()));
    }
    let mut log = TrainingLog::default();
    let mut best: Option<(NetworkParams, usize, f64)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut global = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ImageSample> = match &cfg.augmentation {
                Some(a) => chunk.iter().map(|&i| augment(&train[i], a, rng)).collect::<Result<_>>()?,
                None => chunk.iter().map(|&i| train[i].clone()).collect(),
            };
            let refs: Vec<&ImageSample> = batch.iter().collect();
            global += 1;
            let loss = step(&refs)?;
            if !loss.value.is_finite() {
                return Err(Error::Divergence {
                    step: global as usize,
                    detail: format!("epoch {epoch}: loss {} (data {:?}, shape {:?})", loss.value, loss.seg, loss.shape),
                });
            }
            sum += loss.value * chunk.len() as f64;
            log.records.push(LogRecord {
                step: global,
                epoch,
                seg_loss: loss.seg.unwrap_or(loss.value),
                shape_loss: loss.shape,
                total: loss.value,
            });
        }
        let mean_loss = sum / train.len() as f64;
        let val = validate()?;
        log.epochs.push(EpochSummary {
            epoch,
            mean_loss,
            val_metric: val,
        });
        let (score, better) = match (val, &best) {
            (Some(v), Some((_, _, b))) => (v, if higher_is_better { v > *b } else { v < *b }),
            (Some(v), None) => (v, true),
            // Without validation data the latest epoch is kept.
            (None, _) => (if cfg.stage == Stage::Ae { mean_loss } else { f64::NAN }, true),
        };
        if better {
            best = Some((snapshot(), epoch, score));
        }
    }
    let (params, epoch, metric) = best.expect("epochs >= 1");
    Ok((params, epoch, metric, log))
}

/// Starts the reconstruction head at the mean foreground rate instead of
/// 0.5, so early steps are not spent learning that most pixels are empty.
fn set_prior_bias(params: &mut NetworkParams, train: &[ImageSample]) {
    let fg = train.iter().map(|s| s.foreground_fraction()).sum::<f64>() / train.len().max(1) as f64;
    let p = fg.clamp(1e-3, 0.5);
    if let Some(b) = params.get_mut("head.bias") {
        b.data_mut().fill((p / (1.0 - p)).ln());
        b.round_to_f32();
    }
}

/// Trains an auto-encoder on ground-truth masks and returns the epoch with
/// the lowest validation reconstruction MSE (the last epoch when `val` is
/// empty).
pub fn train_autoencoder(
    kind: NetworkKind,
    model: &ModelConfig,
    train: &[ImageSample],
    val: &[ImageSample],
    cfg: &TrainConfig,
    config_hash: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = AutoEncoder::new(kind, model.clone())?;
    check_samples(train, model, None, "training")?;
    check_samples(val, model, None, "validation")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = net.init(&mut rng);
    set_prior_bias(&mut init, train);
    let trainer = std::cell::RefCell::new(AutoEncoderTrainer::new(net.clone(), init, cfg.learning_rate));
    let val_masks: Vec<&ImageSample> = val.iter().collect();
    let (params, epoch, metric, log) = run_epochs(
        train,
        cfg,
        &mut rng,
        false,
        |batch| trainer.borrow_mut().step(&stack_masks(batch)?),
        || {
            if val_masks.is_empty() {
                return Ok(None);
            }
            let t = trainer.borrow();
            let mut sum = 0.0;
            for chunk in val_masks.chunks(EVAL_BATCH) {
                let y = stack_masks(chunk)?;
                let rec = net.forward(t.params(), &y)?;
                sum += crate::losses::reconstruction_loss(&y, &rec)?.value * chunk.len() as f64;
            }
            Ok(Some(sum / val_masks.len() as f64))
        },
        || trainer.borrow().params().clone(),
    )?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            kind,
            model: model.clone(),
            params,
            epoch,
            val_metric: metric,
            config_hash: config_hash.to_string(),
        },
        log,
    })
}

/// Evaluation-mode probabilities for each sample, as `(1, 1, h, w)` tensors.
pub fn predict(unet: &UNet, params: &NetworkParams, samples: &[&ImageSample]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let p = unet.forward(params, &stack_images(chunk)?)?;
        out.extend((0..chunk.len()).map(|i| p.batch_item(i)));
    }
    Ok(out)
}

/// Mean Dice of thresholded predictions over `samples`.
pub fn mean_dice(unet: &UNet, params: &NetworkParams, samples: &[&ImageSample], threshold: f64) -> Result<f64> {
    let probs = predict(unet, params, samples)?;
    let mut sum = 0.0;
    for (s, p) in samples.iter().zip(&probs) {
        sum += dice(&s.mask, &BinaryMask::threshold(p, threshold)?)?;
    }
    Ok(sum / samples.len() as f64)
}

/// Trains a U-Net with an optional frozen shape prior and returns the epoch
/// with the highest validation Dice (the last epoch when `val` is empty).
pub fn train_segmenter(
    model: &ModelConfig,
    train: &[ImageSample],
    val: &[ImageSample],
    cfg: &TrainConfig,
    prior: Option<ShapePrior>,
    threshold: f64,
    config_hash: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let unet = UNet::new(model.clone())?;
    check_samples(train, model, Some(model.input_channels), "training")?;
    check_samples(val, model, Some(model.input_channels), "validation")?;
    let weights = match cfg.pos_weight {
        Some(w) => ClassWeights::new(w)?,
        None => {
            let masks: Vec<Tensor> = train.iter().map(|s| s.mask_tensor()).collect();
            ClassWeights::inverse_foreground_frequency(&masks)?
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = unet.init(&mut rng);
    let trainer = std::cell::RefCell::new(SegmenterTrainer::new(
        unet.clone(),
        init,
        cfg.learning_rate,
        prior,
        weights,
        cfg.lambda,
    )?);
    let val_refs: Vec<&ImageSample> = val.iter().collect();
    let (params, epoch, metric, log) = run_epochs(
        train,
        cfg,
        &mut rng,
        true,
        |batch| trainer.borrow_mut().step(&stack_images(batch)?, &stack_masks(batch)?),
        || {
            if val_refs.is_empty() {
                return Ok(None);
            }
            mean_dice(&unet, trainer.borrow().params(), &val_refs, threshold).map(Some)
        },
        || trainer.borrow().params().clone(),
    )?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            kind: NetworkKind::Unet,
            model: model.clone(),
            params,
            epoch,
            val_metric: metric,
            config_hash: config_hash.to_string(),
        },
        log,
    })
}
