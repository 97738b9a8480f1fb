//! Finite-difference gradient cases shared by the gradient tests and the
//! acceptance run. Each case returns its worst relative error.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vesselprior::architectures::blocks::{
    communication_block, fusion_block, init_communication_block, init_fusion_block, init_residual_chain,
    residual_chain,
};
use vesselprior::architectures::{AutoEncoder, ModelConfig, UNet};
use vesselprior::autodiff::{Graph, Var};
use vesselprior::losses::{objective_graph, ClassWeights, ShapePrior};
use vesselprior::params::{is_buffer, Mode, NetworkParams, ParamInit};
use vesselprior::{Result, Tensor};

use super::{check_gradients, noise, tensor, GradCheck};

/// Required bound on the relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Scalar readout `sum(w * out)` with fixed pseudo-random weights.
fn readout(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let w = tensor(g.value(out).shape(), seed);
    g.weighted_sum(out, &w)
}

/// Moves every trainable value off its initial value so no ReLU sits exactly
/// at its kink (zero biases over a dead channel would).
pub fn jitter(mut p: NetworkParams, seed: u64) -> NetworkParams {
    let names: Vec<String> = p.iter().map(|(k, _)| k.to_string()).filter(|k| !is_buffer(k)).collect();
    for (i, name) in names.iter().enumerate() {
        let t = p.get_mut(name).unwrap();
        let n = noise(t.len(), seed + i as u64);
        for (v, e) in t.data_mut().iter_mut().zip(n) {
            *v += 0.1 * e;
        }
    }
    p
}

/// Depth 3 on 8x8 inputs, two base channels.
pub fn tiny() -> ModelConfig {
    ModelConfig {
        depth: 3,
        base_channels: 2,
        input_size: (8, 8),
        latent_channels: Some(3),
        ..ModelConfig::default()
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn binary_mask(shape: &[usize], seed: u64) -> Tensor {
    tensor(shape, seed).map(|v| if v > 0.4 { 1.0 } else { 0.0 })
}

fn worst(checks: impl IntoIterator<Item = GradCheck>) -> GradCheck {
    checks
        .into_iter()
        .reduce(|a, b| GradCheck {
            relative_error: a.relative_error.max(b.relative_error),
            checked: a.checked + b.checked,
        })
        .expect("at least one check")
}

const MODES: [Mode; 2] = [Mode::Train, Mode::Eval];

pub fn residual_chain_case() -> GradCheck {
    let mut r = rng(1);
    let mut init = ParamInit::new(&mut r);
    init_residual_chain(&mut init, "res", 2, 2);
    let p = jitter(init.finish(), 50);
    let x = tensor(&[2, 2, 4, 4], 11);
    worst(MODES.map(|mode| {
        check_gradients(&p, &x, mode, |g, b, x| {
            let y = residual_chain(g, b, "res", x, 2)?;
            readout(g, y, 3)
        })
    }))
}

pub fn communication_block_case() -> GradCheck {
    let mut r = rng(2);
    let mut init = ParamInit::new(&mut r);
    init_communication_block(&mut init, "cb", 2, 2);
    let p = jitter(init.finish(), 50);
    let x = tensor(&[2, 2, 8, 8], 12);
    worst(MODES.map(|mode| {
        check_gradients(&p, &x, mode, |g, b, x| {
            // The undercomplete map is derived from the overcomplete one so
            // both inputs are differentiated.
            let small = g.max_pool(x, 2, 2)?;
            let (eu, eo) = communication_block(g, b, "cb", small, x, 2, 2)?;
            let a = readout(g, eu, 4)?;
            let c = readout(g, eo, 5)?;
            g.add(a, c)
        })
    }))
}

pub fn fusion_block_case() -> GradCheck {
    let mut r = rng(3);
    let mut init = ParamInit::new(&mut r);
    init_fusion_block(&mut init, "fb", 2, 2);
    let p = jitter(init.finish(), 50);
    let x = tensor(&[2, 2, 8, 8], 13);
    worst(MODES.map(|mode| {
        check_gradients(&p, &x, mode, |g, b, x| {
            let bottom = g.resize_bilinear(x, 2, 2)?;
            let z = fusion_block(g, b, "fb", bottom, x, 2)?;
            readout(g, z, 6)
        })
    }))
}

fn encoder_case(ae: &AutoEncoder, seed: u64) -> GradCheck {
    let p = jitter(ae.init(&mut rng(seed)), seed);
    let x = tensor(&[2, 1, 8, 8], seed + 100);
    worst(MODES.map(|mode| {
        check_gradients(&p, &x, mode, |g, b, x| {
            let z = ae.encode_graph(g, b, x)?;
            readout(g, z, seed + 7)
        })
    }))
}

pub fn cae_encoder_case() -> GradCheck {
    encoder_case(&AutoEncoder::cae(tiny()).unwrap(), 4)
}

pub fn socae_encoder_case() -> GradCheck {
    encoder_case(&AutoEncoder::socae(tiny()).unwrap(), 5)
}

pub fn socae_encoder_without_cb_case() -> GradCheck {
    let cfg = ModelConfig {
        communication_block: false,
        ..tiny()
    };
    encoder_case(&AutoEncoder::socae(cfg).unwrap(), 6)
}

pub fn decoder_case() -> GradCheck {
    let ae = AutoEncoder::cae(tiny()).unwrap();
    let p = jitter(ae.init(&mut rng(7)), 7);
    let (c, h, w) = tiny().latent_shape();
    let z = tensor(&[2, c, h, w], 17).map(f64::abs);
    worst(MODES.map(|mode| {
        check_gradients(&p, &z, mode, |g, b, z| {
            let y = ae.decode_graph(g, b, z)?;
            readout(g, y, 8)
        })
    }))
}

pub fn unet_case() -> GradCheck {
    let unet = UNet::new(tiny()).unwrap();
    let p = jitter(unet.init(&mut rng(8)), 8);
    let x = tensor(&[2, 1, 8, 8], 18);
    worst(MODES.map(|mode| {
        check_gradients(&p, &x, mode, |g, b, x| {
            let y = unet.forward_graph(g, b, x)?;
            readout(g, y, 9)
        })
    }))
}

pub fn reconstruction_loss_case() -> GradCheck {
    let target = binary_mask(&[2, 1, 8, 8], 19);
    let x = tensor(&[2, 1, 8, 8], 20).map(|v| 0.5 + 0.4 * v);
    check_gradients(&NetworkParams::default(), &x, Mode::Eval, |g, _, x| {
        let t = g.input(target.clone());
        g.mse(x, t)
    })
}

pub fn weighted_bce_case() -> GradCheck {
    let target = binary_mask(&[2, 1, 8, 8], 21);
    let x = tensor(&[2, 1, 8, 8], 22).map(|v| 0.5 + 0.45 * v);
    check_gradients(&NetworkParams::default(), &x, Mode::Eval, |g, _, x| g.weighted_bce(&target, x, 3.5))
}

pub fn cosine_distance_case() -> GradCheck {
    let other = tensor(&[3, 16], 23);
    let x = tensor(&[3, 16], 24);
    check_gradients(&NetworkParams::default(), &x, Mode::Eval, |g, _, x| {
        let o = g.input(other.clone());
        g.cosine_distance(o, x)
    })
}

pub fn total_objective_case() -> GradCheck {
    let unet = UNet::new(tiny()).unwrap();
    let p = jitter(unet.init(&mut rng(9)), 9);
    let ae = AutoEncoder::socae(tiny()).unwrap();
    let ap = jitter(ae.init(&mut rng(10)), 10);
    let y = binary_mask(&[2, 1, 8, 8], 25);
    let x = tensor(&[2, 1, 8, 8], 26);
    let weights = ClassWeights::new(2.5).unwrap();
    let prior = ShapePrior {
        encoder: &ae,
        params: &ap,
    };
    check_gradients(&p, &x, Mode::Train, |g, b, x| {
        Ok(objective_graph(g, &unet, b, Some(prior), x, &y, weights, 40.0)?.total)
    })
}

/// Every case with a display name.
pub fn all() -> Vec<(&'static str, fn() -> GradCheck)> {
    vec![
        ("residual chain", residual_chain_case),
        ("communication block", communication_block_case),
        ("fusion block", fusion_block_case),
        ("CAE encoder", cae_encoder_case),
        ("S-OCAE encoder", socae_encoder_case),
        ("S-OCAE encoder without CB", socae_encoder_without_cb_case),
        ("decoder", decoder_case),
        ("U-Net", unet_case),
        ("reconstruction loss", reconstruction_loss_case),
        ("weighted BCE", weighted_bce_case),
        ("cosine shape loss", cosine_distance_case),
        ("total objective", total_objective_case),
    ]
}
