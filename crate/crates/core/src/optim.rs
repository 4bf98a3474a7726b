//! First-order optimizers over [`AdapterParams`].

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterParams;
use crate::tensor::Tensor;

/// Update rule. Both variants descend the loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Plain gradient descent, `θ ← θ − α∇L`.
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer with its moment estimates.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u32,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self { kind, learning_rate, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update in place. `grads` must share `params`' layout.
    pub fn step(&mut self, params: &mut AdapterParams, grads: &AdapterParams) {
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.tensors_mut().zip(grads.tensors()) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.is_empty() {
                    self.first = grads.tensors().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
                    self.second = self.first.clone();
                }
                let t = self.step as i32;
                let bc1 = 1.0 - libm::pow(beta1, t as f64);
                let bc2 = 1.0 - libm::pow(beta2, t as f64);
                for (((p, g), m), v) in params
                    .tensors_mut()
                    .zip(grads.tensors())
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let pd = p.data_mut();
                    let md = m.data_mut();
                    let vd = v.data_mut();
                    for i in 0..pd.len() {
                        let gi = g.data()[i];
                        md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                        vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                        let m_hat = md[i] / bc1;
                        let v_hat = vd[i] / bc2;
                        pd[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::LowRankPair;
    use alloc::vec;

    fn one(v: f64) -> AdapterParams {
        AdapterParams::from_pairs(
            1,
            1.0,
            vec![LowRankPair {
                layer: "p".into(),
                down: Tensor::scalar(v),
                up: Tensor::scalar(0.0),
            }],
        )
        .unwrap()
    }

    #[test]
    fn sgd_step_on_square() {
        let mut p = one(1.0);
        let g = one(2.0);
        Optimizer::new(OptimizerKind::Sgd, 0.1).step(&mut p, &g);
        assert!((p.pairs()[0].down.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // With bias correction the first step is lr · g/|g| (up to ε).
        let mut p = one(1.0);
        let g = one(-5.0);
        Optimizer::new(OptimizerKind::default(), 3e-4).step(&mut p, &g);
        assert!((p.pairs()[0].down.item() - (1.0 + 3e-4)).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one(0.7);
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.1);
        for _ in 0..3 {
            opt.step(&mut p, &one(0.0));
        }
        assert_eq!(p, before);
    }
}
