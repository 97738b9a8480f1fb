use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::NetworkParams;
use crate::tensor::Tensor;

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction. Updated parameters are rounded to `f32`, the
/// checkpoint precision, so saved and in-memory models agree exactly.
#[derive(Clone, Debug)]
pub struct Adam {
    learning_rate: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update for every gradient in `grads`.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let (b1, b2) = ADAM_BETAS;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("gradient of {name}"), p.shape(), g.shape()));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = self.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                *w = (*w - update) as f32 as f64;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = NetworkParams::default();
        p.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(&[2], vec![0.5, -3.0]).unwrap());
        let mut adam = Adam::new(0.125);
        adam.step(&mut p, &grads).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.875).abs() < 1e-6 && (w[1] + 0.875).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = NetworkParams::default();
        p.insert("w", Tensor::new(&[1], vec![3.0]).unwrap());
        let mut adam = Adam::new(0.05);
        for _ in 0..500 {
            let w = p.get("w").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Tensor::new(&[1], vec![2.0 * (w - 1.0)]).unwrap());
            adam.step(&mut p, &grads).unwrap();
        }
        assert!((p.get("w").unwrap().data()[0] - 1.0).abs() < 1e-2);
    }
}
