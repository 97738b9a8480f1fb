//! Building blocks shared by the networks: convolution stages, full
//! pre-activation residual chains, the communication block and the fusion
//! block of the semi-overcomplete encoder.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamInit};

/// Kernel size of the pooling inside the fusion block.
pub const FUSION_POOL_KERNEL: usize = 2;

/// `conv3x3 -> BN -> ReLU`, parameters under `{name}.conv` and `{name}.bn`.
pub fn conv_bn_relu(g: &mut Graph, b: &mut Binding, name: &str, x: Var) -> Result<Var> {
    let y = b.conv(g, &format!("{name}.conv"), x, 1)?;
    let y = b.batch_norm(g, &format!("{name}.bn"), y)?;
    Ok(g.relu(y))
}

pub fn init_conv_bn_relu<R: Rng>(init: &mut ParamInit<R>, name: &str, in_ch: usize, out_ch: usize) {
    init.conv(&format!("{name}.conv"), out_ch, in_ch, 3);
    init.batch_norm(&format!("{name}.bn"), out_ch);
}

/// Full pre-activation residual function `BN -> ReLU -> conv -> BN -> ReLU -> conv`.
pub fn preact_unit(g: &mut Graph, b: &mut Binding, name: &str, x: Var) -> Result<Var> {
    let y = b.batch_norm(g, &format!("{name}.bn1"), x)?;
    let y = g.relu(y);
    let y = b.conv(g, &format!("{name}.conv1"), y, 1)?;
    let y = b.batch_norm(g, &format!("{name}.bn2"), y)?;
    let y = g.relu(y);
    b.conv(g, &format!("{name}.conv2"), y, 1)
}

pub fn init_preact_unit<R: Rng>(init: &mut ParamInit<R>, name: &str, ch: usize) {
    init.batch_norm(&format!("{name}.bn1"), ch);
    init.conv(&format!("{name}.conv1"), ch, ch, 3);
    init.batch_norm(&format!("{name}.bn2"), ch);
    init.conv(&format!("{name}.conv2"), ch, ch, 3);
}

/// Residual recursion over `units` pre-activation units:
///
/// `R_j = R_{j-1} + sum_{i<j} F(R_i, w_i)` for `j = 1..=units`, starting at `R_0 = r0`.
///
/// Each `F(R_i, w_i)` is evaluated once and reused by every later step. Unit
/// `i` lives under `{prefix}.unit{i}`.
pub fn residual_chain(
    g: &mut Graph,
    b: &mut Binding,
    prefix: &str,
    r0: Var,
    units: usize,
) -> Result<Var> {
    if units == 0 {
        return Err(Error::config("residual_units", "must be >= 1"));
    }
    let mut r = r0;
    let mut residuals: Vec<Var> = Vec::with_capacity(units);
    for j in 0..units {
        let f = preact_unit(g, b, &format!("{prefix}.unit{j}"), r)?;
        if g.value(f).shape() != g.value(r).shape() {
            return Err(Error::shape(
                format!("residual unit {prefix}.unit{j}"),
                g.value(r).shape(),
                g.value(f).shape(),
            ));
        }
        residuals.push(f);
        let mut acc = residuals[0];
        for &f in &residuals[1..] {
            acc = g.add(acc, f)?;
        }
        r = g.add(r, acc)?;
    }
    Ok(r)
}

pub fn init_residual_chain<R: Rng>(init: &mut ParamInit<R>, prefix: &str, ch: usize, units: usize) {
    for j in 0..units {
        init_preact_unit(init, &format!("{prefix}.unit{j}"), ch);
    }
}

/// Exchanges residual features between an undercomplete map `f_eu` and an
/// overcomplete map `f_eo` whose spatial size is `factor` times larger.
///
/// Returns `(f_eu + down(R(f_eo)), f_eo + up(R(f_eu)))` where each `R` is an
/// independent residual chain (`{prefix}.o2u` and `{prefix}.u2o`).
pub fn communication_block(
    g: &mut Graph,
    b: &mut Binding,
    prefix: &str,
    f_eu: Var,
    f_eo: Var,
    factor: usize,
    units: usize,
) -> Result<(Var, Var)> {
    let (nu, cu, hu, wu) = g.value(f_eu).dims4()?;
    let (no, co, ho, wo) = g.value(f_eo).dims4()?;
    if nu != no || (ho, wo) != (hu * factor, wu * factor) {
        return Err(Error::shape(
            "communication block spatial ratio",
            (nu, hu * factor, wu * factor),
            (no, ho, wo),
        ));
    }
    if cu != co {
        return Err(Error::shape("communication block channels", cu, co));
    }
    let from_eo = residual_chain(g, b, &format!("{prefix}.o2u"), f_eo, units)?;
    let down = g.resize_bilinear(from_eo, hu, wu)?;
    let from_eu = residual_chain(g, b, &format!("{prefix}.u2o"), f_eu, units)?;
    let up = g.resize_bilinear(from_eu, ho, wo)?;
    Ok((g.add(f_eu, down)?, g.add(f_eo, up)?))
}

pub fn init_communication_block<R: Rng>(
    init: &mut ParamInit<R>,
    prefix: &str,
    ch: usize,
    units: usize,
) {
    init_residual_chain(init, &format!("{prefix}.o2u"), ch, units);
    init_residual_chain(init, &format!("{prefix}.u2o"), ch, units);
}

/// Integer ratio by which `top` must be reduced to reach `bottom`.
pub fn fusion_ratio(bottom: (usize, usize), top: (usize, usize)) -> Result<usize> {
    let ok = bottom.0 > 0
        && bottom.1 > 0
        && top.0 % bottom.0 == 0
        && top.1 % bottom.1 == 0
        && top.0 / bottom.0 == top.1 / bottom.1
        && top.0 / bottom.0 >= FUSION_POOL_KERNEL;
    if !ok {
        return Err(Error::shape(
            "fusion block reduction ratio",
            format!("integer multiple >= {FUSION_POOL_KERNEL} of {bottom:?}"),
            top,
        ));
    }
    Ok(top.0 / bottom.0)
}

/// Fuses the bottom undercomplete map with the top overcomplete map into a
/// 4-D latent tensor shaped like `f_eu_bottom`.
///
/// 1. max-pool `f_eo_top` (kernel 2, stride = size ratio) to the bottleneck size;
/// 2. concatenate along channels and apply a pre-activated 1x1 convolution;
/// 3. residual chain;
/// 4. add the pooled features, then `conv -> BN -> ReLU`.
pub fn fusion_block(
    g: &mut Graph,
    b: &mut Binding,
    prefix: &str,
    f_eu_bottom: Var,
    f_eo_top: Var,
    units: usize,
) -> Result<Var> {
    let (_, cu, hu, wu) = g.value(f_eu_bottom).dims4()?;
    let (_, co, ho, wo) = g.value(f_eo_top).dims4()?;
    let ratio = fusion_ratio((hu, wu), (ho, wo))?;
    if cu != co {
        return Err(Error::config(
            "latent_channels",
            format!("pooled overcomplete channels {co} differ from bottleneck channels {cu}"),
        ));
    }
    let pooled = g.max_pool(f_eo_top, FUSION_POOL_KERNEL, ratio)?;
    let z1 = g.concat_channels(f_eu_bottom, pooled)?;
    let z2 = b.batch_norm(g, &format!("{prefix}.pre.bn"), z1)?;
    let z2 = g.relu(z2);
    let z2 = b.conv(g, &format!("{prefix}.pre.conv"), z2, 0)?;
    let z3 = residual_chain(g, b, &format!("{prefix}.res"), z2, units)?;
    let sum = g.add(z3, pooled)?;
    conv_bn_relu(g, b, &format!("{prefix}.post"), sum)
}

pub fn init_fusion_block<R: Rng>(init: &mut ParamInit<R>, prefix: &str, ch: usize, units: usize) {
    init.batch_norm(&format!("{prefix}.pre.bn"), 2 * ch);
    init.conv(&format!("{prefix}.pre.conv"), ch, 2 * ch, 1);
    init_residual_chain(init, &format!("{prefix}.res"), ch, units);
    init_conv_bn_relu(init, &format!("{prefix}.post"), ch, ch);
}

/// Flattens `(n, c, h, w)` to `(n, c*h*w)`, channel-major then row-major.
pub fn flatten(g: &mut Graph, x: Var) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4()?;
    g.reshape(x, &[n, c * h * w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Mode, NetworkParams};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_convs(p: &mut NetworkParams) {
        let names: Vec<String> = p
            .iter()
            .filter(|(k, _)| k.contains(".conv"))
            .map(|(k, _)| k.to_string())
            .collect();
        for k in names {
            let t = p.get_mut(&k).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_residuals_collapse_to_identity() {
        for units in 1..=3 {
            let mut rng = ChaCha8Rng::seed_from_u64(units as u64);
            let mut init = ParamInit::new(&mut rng);
            init_residual_chain(&mut init, "r", 3, units);
            let mut p = init.finish();
            zero_convs(&mut p);
            let x = Tensor::new(&[2, 3, 4, 4], (0..96).map(|i| (i as f64).cos()).collect()).unwrap();
            for mode in [Mode::Train, Mode::Eval] {
                let mut g = Graph::new();
                let mut b = Binding::new(&p, mode, true);
                let xv = g.input(x.clone());
                let y = residual_chain(&mut g, &mut b, "r", xv, units).unwrap();
                assert_eq!(g.value(y), &x);
            }
        }
    }

    #[test]
    fn residual_chain_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = ParamInit::new(&mut rng);
        init_residual_chain(&mut init, "r", 3, 1);
        let p = init.finish();
        let mut g = Graph::new();
        let mut b = Binding::new(&p, Mode::Eval, false);
        let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(residual_chain(&mut g, &mut b, "r", x, 1).is_err());
    }

    #[test]
    fn communication_block_shapes_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = ParamInit::new(&mut rng);
        init_communication_block(&mut init, "cb", 2, 2);
        let p = init.finish();
        let mut g = Graph::new();
        let mut b = Binding::new(&p, Mode::Eval, false);
        let eu = g.input(Tensor::full(&[1, 2, 8, 8], 0.3));
        let eo = g.input(Tensor::full(&[1, 2, 16, 16], 0.1));
        let (a, c) = communication_block(&mut g, &mut b, "cb", eu, eo, 2, 2).unwrap();
        assert_eq!(g.value(a).shape(), &[1, 2, 8, 8]);
        assert_eq!(g.value(c).shape(), &[1, 2, 16, 16]);
        let bad = g.input(Tensor::zeros(&[1, 2, 24, 24]));
        assert!(matches!(
            communication_block(&mut g, &mut b, "cb", eu, bad, 2, 2),
            Err(Error::Shape { .. })
        ));
        let bad_ch = g.input(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(communication_block(&mut g, &mut b, "cb", eu, bad_ch, 2, 2).is_err());
    }

    #[test]
    fn fusion_block_shapes_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut init = ParamInit::new(&mut rng);
        init_fusion_block(&mut init, "fb", 32, 2);
        let p = init.finish();
        let mut g = Graph::new();
        let mut b = Binding::new(&p, Mode::Eval, false);
        let eu = g.input(Tensor::full(&[1, 32, 4, 4], 0.2));
        let eo = g.input(Tensor::full(&[1, 32, 32, 32], 0.5));
        let z = fusion_block(&mut g, &mut b, "fb", eu, eo, 2).unwrap();
        let flat = flatten(&mut g, z).unwrap();
        assert_eq!(g.value(flat).shape(), &[1, 512]);
        let odd = g.input(Tensor::zeros(&[1, 32, 30, 30]));
        assert!(matches!(
            fusion_block(&mut g, &mut b, "fb", eu, odd, 2),
            Err(Error::Shape { .. })
        ));
        let narrow = g.input(Tensor::zeros(&[1, 16, 32, 32]));
        assert!(matches!(
            fusion_block(&mut g, &mut b, "fb", eu, narrow, 2),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn fusion_pooling_of_constant_is_constant() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 3, 32, 32], 0.25));
        let ratio = fusion_ratio((4, 4), (32, 32)).unwrap();
        let p = g.max_pool(x, FUSION_POOL_KERNEL, ratio).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 3, 4, 4]);
        assert!(g.value(p).data().iter().all(|&v| v == 0.25));
    }
}
