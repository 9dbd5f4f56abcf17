//! Mini-batch training and batched inference.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{align_frames, Crop};
use crate::error::{ensure, Error, Result};
use crate::metrics::argmax;
use crate::network::Model;
use crate::optim::{LrSchedule, Sgd, SgdConfig};
use crate::params::{Mode, ParamStore, Session};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Clips are cropped or tiled to this many frames.
    pub frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: LrSchedule {
                base: 0.1,
                decay_epochs: alloc::vec![30, 40],
                factor: 0.1,
            },
            sgd: SgdConfig::default(),
            epochs: 65,
            batch_size: 8,
            seed: 0,
            frames: 300,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch size must be positive");
        ensure!(self.frames >= 1, Config, "frame count must be positive");
        self.schedule.validate(self.epochs)
    }
}

/// A model input `[C, T, V]` with its label.
#[derive(Debug, Clone)]
pub struct Example<R> {
    pub x: Tensor<R>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss: f64,
    /// Accuracy of the training-mode predictions seen during the epoch.
    pub train_top1: f64,
}

pub struct Trainer<R: Real> {
    pub model: Model,
    pub params: ParamStore<R>,
    pub config: TrainConfig,
    optimizer: Sgd<R>,
    rng: crate::init::Rng64,
}

fn stack<R: Real>(examples: &[&Example<R>], frames: usize, crops: &[Crop]) -> Result<Tensor<R>> {
    let first = examples[0].x.shape();
    ensure!(
        first.len() == 3,
        Shape,
        "examples must be [C,T,V], got {:?}",
        first
    );
    let (c, v) = (first[0], first[2]);
    let mut data = Vec::with_capacity(examples.len() * c * frames * v);
    for (e, &crop) in examples.iter().zip(crops) {
        ensure!(
            e.x.shape()[0] == c && e.x.shape()[2] == v,
            Shape,
            "examples disagree on channels/joints: {:?} vs {:?}",
            e.x.shape(),
            first
        );
        data.extend_from_slice(align_frames(&e.x, frames, crop)?.data());
    }
    Tensor::from_vec(&[examples.len(), c, frames, v], data)
}

impl<R: Real> Trainer<R> {
    pub fn new(model: Model, params: ParamStore<R>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Sgd::new(config.sgd, params.len());
        let rng = crate::init::rng(config.seed);
        Ok(Self {
            model,
            params,
            config,
            optimizer,
            rng,
        })
    }

    /// One pass over `data` in a seeded random order with random crops.
    pub fn train_epoch(&mut self, epoch: usize, data: &[Example<R>]) -> Result<EpochLog> {
        ensure!(!data.is_empty(), Data, "training set is empty");
        let lr = self.config.schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut correct, mut steps) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Example<R>> = chunk.iter().map(|&i| &data[i]).collect();
            let crops: Vec<Crop> = batch
                .iter()
                .map(|e| {
                    Crop::At(
                        self.rng
                            .gen_range(0..=e.x.shape()[1].saturating_sub(self.config.frames)),
                    )
                })
                .collect();
            let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
            let x = stack(&batch, self.config.frames, &crops)?;
            let mut s = Session::new(&mut self.params, Mode::Train);
            let xi = s.input(x);
            let out = self.model.forward(&mut s, xi)?;
            let loss = s.tape.softmax_cross_entropy(out.logits, &labels)?;
            let loss_value = s.tape.value(loss).data()[0].as_f64();
            s.tape.backward(loss)?;
            let grads: Vec<_> = s
                .param_grads()
                .into_iter()
                .map(|(id, g)| (id, g.clone()))
                .collect();
            if !loss_value.is_finite() || grads.iter().any(|(_, g)| !g.is_finite()) {
                let norm = libm::sqrt(
                    grads
                        .iter()
                        .flat_map(|(_, g)| g.data())
                        .map(|v| v.as_f64() * v.as_f64())
                        .sum::<f64>(),
                );
                return Err(Error::Numeric(alloc::format!(
                    "non-finite training step at epoch {epoch}, step {steps}: loss {loss_value}, lr {lr}, grad norm {norm}"
                )));
            }
            correct += argmax(s.tape.value(out.logits))
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            drop(s);
            self.optimizer.step(&mut self.params, &grads, lr)?;
            loss_sum += loss_value * labels.len() as f64;
            steps += 1;
        }
        Ok(EpochLog {
            epoch,
            lr,
            steps,
            loss: loss_sum / data.len() as f64,
            train_top1: correct as f64 / data.len() as f64,
        })
    }

    /// Eval-mode logits `[N, K]` with center crops.
    pub fn predict(&mut self, data: &[Example<R>]) -> Result<Tensor<R>> {
        predict(
            &self.model,
            &mut self.params,
            data,
            self.config.frames,
            self.config.batch_size,
        )
    }
}

/// Eval-mode logits `[N, K]` with center crops.
pub fn predict<R: Real>(
    model: &Model,
    params: &mut ParamStore<R>,
    data: &[Example<R>],
    frames: usize,
    batch_size: usize,
) -> Result<Tensor<R>> {
    ensure!(batch_size >= 1, Config, "batch size must be positive");
    let k = model.config.num_classes;
    let mut out = Vec::with_capacity(data.len() * k);
    for chunk in data.chunks(batch_size) {
        let batch: Vec<&Example<R>> = chunk.iter().collect();
        let crops = alloc::vec![Crop::Center; batch.len()];
        let x = stack(&batch, frames, &crops)?;
        let mut s = Session::new(params, Mode::Eval);
        let xi = s.input(x);
        let logits = model.forward(&mut s, xi)?.logits;
        out.extend_from_slice(s.tape.value(logits).data());
    }
    Tensor::from_vec(&[data.len(), k], out)
}
