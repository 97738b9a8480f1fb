//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

pub mod gradcases;

use vesselprior::autodiff::{Graph, Var};
use vesselprior::params::{is_buffer, Binding, Mode, NetworkParams};
use vesselprior::{Result, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Deterministic pseudo-random values in `[-1, 1)` (xorshift), independent of
/// the library's RNG.
pub fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..len)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, noise(n, seed)).unwrap()
}

/// Result of comparing analytic and finite-difference gradients.
#[derive(Debug)]
pub struct GradCheck {
    pub relative_error: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|)` over the concatenated gradient vectors.
fn relative(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares reverse-mode gradients of a scalar `f(params, x)` against central
/// differences, over every trainable parameter element and every input
/// element. `f` must return a scalar node; `mode` selects batch or running
/// statistics for normalization layers.
pub fn check_gradients(
    params: &NetworkParams,
    input: &Tensor,
    mode: Mode,
    f: impl Fn(&mut Graph, &mut Binding, Var) -> Result<Var>,
) -> GradCheck {
    let eval = |p: &NetworkParams, x: &Tensor| -> f64 {
        let mut g = Graph::new();
        let mut b = Binding::new(p, mode, false);
        let xv = g.input(x.clone());
        let out = f(&mut g, &mut b, xv).unwrap();
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let mut b = Binding::new(params, mode, true);
    let xv = g.param(input.clone());
    let out = f(&mut g, &mut b, xv).unwrap();
    assert_eq!(g.value(out).len(), 1, "objective must be scalar");
    let grads = g.backward(out);

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = params.clone();
    let names: Vec<String> = params.iter().map(|(k, _)| k.to_string()).filter(|k| !is_buffer(k)).collect();
    for name in &names {
        let var = b.vars().get(name).copied();
        let len = params.get(name).unwrap().len();
        for i in 0..len {
            let a = var.and_then(|v| grads.get(v)).map_or(0.0, |t| t.data()[i]);
            let orig = work.get(name).unwrap().data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + FD_STEP;
            let up = eval(&work, input);
            work.get_mut(name).unwrap().data_mut()[i] = orig - FD_STEP;
            let down = eval(&work, input);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            analytic.push(a);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let gx = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
    let mut x = input.clone();
    for i in 0..input.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let up = eval(params, &x);
        x.data_mut()[i] = orig - FD_STEP;
        let down = eval(params, &x);
        x.data_mut()[i] = orig;
        analytic.push(gx.data()[i]);
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    GradCheck {
        relative_error: relative(&analytic, &numeric),
        checked: analytic.len(),
    }
}

/// Boundary pixels of a row-major mask: foreground with a background
/// 4-neighbour, where anything outside the frame is background.
pub fn oracle_surface(mask: &[bool], rows: usize, cols: usize, spacing: (f64, f64)) -> Vec<(f64, f64)> {
    let at = |r: isize, c: isize| -> bool {
        r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols && mask[r as usize * cols + c as usize]
    };
    let mut out = Vec::new();
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            if at(r, c) && !(at(r - 1, c) && at(r + 1, c) && at(r, c - 1) && at(r, c + 1)) {
                out.push((r as f64 * spacing.0, c as f64 * spacing.1));
            }
        }
    }
    out
}

fn oracle_min_dist(p: (f64, f64), set: &[(f64, f64)]) -> f64 {
    let mut best = f64::INFINITY;
    for q in set {
        let d = ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
        if d < best {
            best = d;
        }
    }
    best
}

/// Double-loop ASSD; `None` when either surface is empty.
pub fn oracle_assd(a: &[(f64, f64)], b: &[(f64, f64)]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for p in a {
        total += oracle_min_dist(*p, b);
    }
    for p in b {
        total += oracle_min_dist(*p, a);
    }
    Some(total / (a.len() + b.len()) as f64)
}

/// Double-loop symmetric Hausdorff distance; `None` when either surface is empty.
pub fn oracle_hausdorff(a: &[(f64, f64)], b: &[(f64, f64)]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let mut h: f64 = 0.0;
    for p in a {
        h = h.max(oracle_min_dist(*p, b));
    }
    for p in b {
        h = h.max(oracle_min_dist(*p, a));
    }
    Some(h)
}

/// Mask of `rows x cols` from the low bits of `bits`.
pub fn mask_from_bits(bits: u32, rows: usize, cols: usize) -> Vec<bool> {
    (0..rows * cols).map(|i| bits >> i & 1 == 1).collect()
}
