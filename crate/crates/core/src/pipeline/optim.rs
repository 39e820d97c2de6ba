use crate::model::ModelParams;

use super::config::{OptimizerKind, Schedule, TrainConfig};

/// Learning rate for `epoch` (1-based) of `epochs`.
pub fn scheduled_lr(cfg: &TrainConfig, epoch: usize, epochs: usize) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            let t = (epoch - 1) as f64 / epochs as f64;
            0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// First-order optimizer over every tensor of a [`ModelParams`].
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    clip_norm: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Self {
            kind: cfg.optimizer,
            lr: cfg.lr,
            momentum: cfg.momentum,
            clip_norm: cfg.clip_norm,
            step: 0,
            v: if cfg.optimizer == OptimizerKind::Adam {
                zeros.clone()
            } else {
                Vec::new()
            },
            m: zeros,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update; returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let data = tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for j in 0..data.len() {
                        m[j] = self.momentum * m[j] + g[j] * scale;
                        data[j] -= self.lr * m[j];
                    }
                }
                OptimizerKind::Adam => {
                    let v = &mut self.v[i];
                    for j in 0..data.len() {
                        let gj = g[j] * scale;
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                        data[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + EPS);
                    }
                }
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ParamId};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_step_moves_against_gradient() {
        let cfg = ModelConfig {
            vocab_size: 5,
            d_model: 2,
            d_vision: 2,
            d_ff: 2,
            max_len: 4,
            positional: false,
        };
        let mut p = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let before = p.get(ParamId::RationaleBias).data().to_vec();
        let mut grads: Vec<Vec<f64>> = p.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        grads[ParamId::RationaleBias.index()] = vec![1.0, -2.0];
        let tc = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            momentum: 0.0,
            clip_norm: 0.0,
            lr: 0.5,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::new(&p, &tc);
        opt.step(&mut p, &grads);
        let after = p.get(ParamId::RationaleBias).data();
        assert!((after[0] - (before[0] - 0.5)).abs() < 1e-15);
        assert!((after[1] - (before[1] + 1.0)).abs() < 1e-15);
    }
}
