use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::TrainerConfig(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Optimizer with its moment buffers. Parameters and moments are rounded to
/// `f32` after every update so the whole state persists exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

fn round(v: f64) -> f64 {
    v as f32 as f64
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n: usize) -> Self {
        let buffers = if config.kind == OptimizerKind::Adam { n } else { 0 };
        Self {
            config,
            step: 0,
            m: vec![0.0; buffers],
            v: vec![0.0; buffers],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        let c = self.config;
        self.step += 1;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p = round(*p - c.learning_rate * g);
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - c.beta1.powf(self.step as f64);
                let c2 = 1.0 - c.beta2.powf(self.step as f64);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = round(c.beta1 * self.m[i] + (1.0 - c.beta1) * g);
                    self.v[i] = round(c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g);
                    let update = c.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + c.eps);
                    params[i] = round(params[i] - update);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: OptimizerKind, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind,
            learning_rate: lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut opt = Optimizer::new(cfg(kind, 0.0), 3);
            let mut p = vec![0.5, -0.25, 1.0];
            opt.update(&mut p, &[1.0, 2.0, -3.0]);
            assert_eq!(p, vec![0.5, -0.25, 1.0]);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut opt = Optimizer::new(cfg(OptimizerKind::Adam, 0.01), 2);
        let mut p = vec![1.0, 1.0];
        opt.update(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Optimizer::new(cfg(OptimizerKind::Adam, 0.05), 1);
        let mut p = vec![3.0];
        for _ in 0..500 {
            let g = [2.0 * (p[0] - 1.0)];
            opt.update(&mut p, &g);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }
}
