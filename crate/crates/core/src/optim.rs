//! SGD with Nesterov momentum, L2 weight decay and a step learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    /// Epochs (0-based) at which the rate is multiplied by `factor`.
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn validate(&self, total_epochs: usize) -> Result<()> {
        ensure!(
            self.base > 0.0 && self.base.is_finite(),
            Config,
            "learning rate must be positive, got {}",
            self.base
        );
        ensure!(
            self.decay_epochs.windows(2).all(|w| w[0] < w[1]),
            Config,
            "decay epochs must be strictly increasing: {:?}",
            self.decay_epochs
        );
        ensure!(
            self.decay_epochs.last().is_none_or(|&e| e < total_epochs),
            Config,
            "decay epochs {:?} must be below the epoch count {}",
            self.decay_epochs,
            total_epochs
        );
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.base * libm::pow(self.factor, decays as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Nesterov SGD in velocity form: with `g ← g + λθ`,
/// `v ← μv − lr·g`, `θ ← θ + μv − lr·g`.
#[derive(Debug, Clone)]
pub struct Sgd<R> {
    pub config: SgdConfig,
    velocity: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Sgd<R> {
    pub fn new(config: SgdConfig, params: usize) -> Self {
        Self {
            config,
            velocity: vec![None; params],
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore<R>,
        grads: &[(ParamId, Tensor<R>)],
        lr: f64,
    ) -> Result<()> {
        let mu = R::from_f64(self.config.momentum);
        let wd = R::from_f64(self.config.weight_decay);
        let lr = R::from_f64(lr);
        for (id, g) in grads {
            let theta = store.get_mut(*id);
            ensure!(
                g.shape() == theta.shape(),
                Shape,
                "gradient shape {:?} vs parameter {:?}",
                g.shape(),
                theta.shape()
            );
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((p, &gi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let g = gi + wd * *p;
                *vi = mu * *vi - lr * g;
                *p = *p + mu * *vi - lr * g;
            }
        }
        Ok(())
    }
}
