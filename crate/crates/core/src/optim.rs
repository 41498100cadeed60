//! First-order optimizers over flat parameter vectors, plus mini-batching.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    steps: i32,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Optimizer {
    /// Plain SGD when `momentum == 0`, heavy-ball otherwise.
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            lr,
            momentum,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            ..Optimizer::sgd(lr, 0.0)
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::sgd(lr, momentum),
            OptimizerKind::Adam => Optimizer::adam(lr),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        match self.kind {
            OptimizerKind::Sgd if self.momentum == 0.0 => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Sgd => {
                if self.first.len() != grad.len() {
                    self.first = vec![0.0; grad.len()];
                }
                for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.first) {
                    *v = self.momentum * *v + g;
                    *p -= self.lr * *v;
                }
            }
            OptimizerKind::Adam => {
                if self.first.len() != grad.len() {
                    self.first = vec![0.0; grad.len()];
                    self.second = vec![0.0; grad.len()];
                }
                self.steps += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.steps);
                let c2 = 1.0 - ADAM_BETA2.powi(self.steps);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.first[i] = ADAM_BETA1 * self.first[i] + (1.0 - ADAM_BETA1) * g;
                    self.second[i] = ADAM_BETA2 * self.second[i] + (1.0 - ADAM_BETA2) * g * g;
                    let mhat = self.first[i] / c1;
                    let vhat = self.second[i] / c2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Shuffled mini-batches covering `0..n`. A trailing batch of one sample is
/// folded into the previous batch so batch statistics stay defined.
pub fn minibatches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("len > 1");
        batches.last_mut().expect("len > 0").extend(last);
    }
    batches
}
