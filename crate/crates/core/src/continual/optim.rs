//! Optimizers and learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diffcore::DiffTensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Gradient descent with Nesterov momentum.
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHyper {
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        OptimizerHyper {
            momentum: 0.9,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter optimizer state for one parameter group.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    hyper: OptimizerHyper,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, hyper: OptimizerHyper, shapes: &[usize]) -> Self {
        let zeros = || shapes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        Optimizer {
            kind,
            hyper,
            first: zeros(),
            second: if kind == OptimizerKind::Adam {
                zeros()
            } else {
                Vec::new()
            },
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// One update of every tensor in `params` with the matching gradient.
    pub fn step(&mut self, params: &mut [&mut DiffTensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "optimizer step",
                format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        self.steps += 1;
        let h = self.hyper;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let w = p.values_mut();
            if w.len() != g.len() || w.len() != self.first[i].len() {
                return Err(Error::shape(
                    "optimizer step",
                    format!("parameter {i}: {} values, {} grads", w.len(), g.len()),
                ));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    let v = &mut self.first[i];
                    for j in 0..w.len() {
                        let d = g[j] + h.weight_decay * w[j];
                        v[j] = h.momentum * v[j] + d;
                        w[j] -= lr * (d + h.momentum * v[j]);
                    }
                }
                OptimizerKind::Adam => {
                    let (m, s) = (&mut self.first[i], &mut self.second[i]);
                    let c1 = 1.0 - h.beta1.powi(self.steps as i32);
                    let c2 = 1.0 - h.beta2.powi(self.steps as i32);
                    for j in 0..w.len() {
                        let d = g[j] + h.weight_decay * w[j];
                        m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * d;
                        s[j] = h.beta2 * s[j] + (1.0 - h.beta2) * d * d;
                        w[j] -= lr * (m[j] / c1) / ((s[j] / c2).sqrt() + h.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Learning rate as a function of the iteration index `t` in `0..total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `peak * t / warmup` during warmup, then cosine annealing to 0.
    WarmupCosine { warmup: usize, total: usize, peak: f64 },
    /// Straight line from `start` at `t = 0` to `end` at `t = total - 1`.
    Linear { total: usize, start: f64, end: f64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::WarmupCosine { warmup, total, peak } => {
                if total == 0 || warmup > total || !(peak > 0.0) {
                    return Err(Error::Config(format!("bad warmup-cosine schedule {self:?}")));
                }
            }
            LrSchedule::Linear { total, start, end } => {
                if total == 0 || !(start > 0.0) || end < 0.0 {
                    return Err(Error::Config(format!("bad linear schedule {self:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn lr(&self, t: usize) -> f64 {
        match *self {
            LrSchedule::WarmupCosine { warmup, total, peak } => {
                if t < warmup {
                    peak * t as f64 / warmup as f64
                } else {
                    let span = (total - warmup).max(1) as f64;
                    0.5 * peak * (1.0 + (PI * (t - warmup) as f64 / span).cos())
                }
            }
            LrSchedule::Linear { total, start, end } => {
                if total <= 1 {
                    start
                } else {
                    start + (end - start) * t as f64 / (total - 1) as f64
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine() {
        let s = LrSchedule::WarmupCosine {
            warmup: 10,
            total: 110,
            peak: 2.0,
        };
        s.validate().unwrap();
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(5) - 1.0).abs() < 1e-15);
        assert_eq!(s.lr(10), 2.0);
        assert!((s.lr(60) - 1.0).abs() < 1e-12);
        for t in 10..110 {
            let want = 0.5 * 2.0 * (1.0 + (PI * (t - 10) as f64 / 100.0).cos());
            assert!((s.lr(t) - want).abs() < 1e-15);
            assert!(s.lr(t + 1) <= s.lr(t));
        }
        assert!(LrSchedule::WarmupCosine {
            warmup: 5,
            total: 4,
            peak: 1.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn linear_decay_endpoints() {
        let s = LrSchedule::Linear {
            total: 5,
            start: 1e-3,
            end: 5e-4,
        };
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(4) - 5e-4).abs() < 1e-18);
        assert!((s.lr(2) - 7.5e-4).abs() < 1e-18);
    }

    #[test]
    fn sgd_nesterov_matches_hand_computation() {
        let hyper = OptimizerHyper {
            weight_decay: 0.0,
            ..OptimizerHyper::default()
        };
        let mut opt = Optimizer::new(OptimizerKind::Sgd, hyper, &[1]);
        let mut w = DiffTensor::from_vec(vec![1.0]);
        opt.step(&mut [&mut w], &[vec![2.0]], 0.1).unwrap();
        // v = 2, step = 2 + 0.9 * 2
        assert!((w.values()[0] - (1.0 - 0.1 * 3.8)).abs() < 1e-15);
        opt.step(&mut [&mut w], &[vec![2.0]], 0.1).unwrap();
        // v = 0.9 * 2 + 2 = 3.8, step = 2 + 0.9 * 3.8
        assert!((w.values()[0] - (0.62 - 0.1 * 5.42)).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut opt = Optimizer::new(
            OptimizerKind::Adam,
            OptimizerHyper {
                weight_decay: 0.0,
                ..Default::default()
            },
            &[2],
        );
        let mut w = DiffTensor::from_vec(vec![0.0, 0.0]);
        opt.step(&mut [&mut w], &[vec![3.0, -0.5]], 0.01).unwrap();
        assert!((w.values()[0] + 0.01).abs() < 1e-9);
        assert!((w.values()[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind, OptimizerHyper::default(), &[2]);
            let mut w = DiffTensor::from_vec(vec![3.0, -2.0]);
            for _ in 0..2000 {
                let g: Vec<f64> = w.values().iter().map(|x| 2.0 * x).collect();
                opt.step(&mut [&mut w], &[g], 0.01).unwrap();
            }
            assert!(w.values().iter().all(|x| x.abs() < 1e-2), "{kind:?}: {:?}", w.values());
        }
    }
}
