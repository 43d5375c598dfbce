use serde::{Deserialize, Serialize};

use super::config::UNetConfig;
use super::params::ModelParams;
use crate::dataset::{minibatches, Dataset};
use crate::diffusion::{LossDraws, NoiseSchedule, SignalBatch};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Real> AdamW<F> {
    pub fn new(num_params: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![F::ZERO; num_params],
            v: vec![F::ZERO; num_params],
        }
    }

    pub fn update(&mut self, params: &mut [F], grads: &[F], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one_b1 = F::from_f64(1.0 - self.beta1);
        let one_b2 = F::from_f64(1.0 - self.beta2);
        let bc1 = 1.0 - self.beta1.powf(self.step as f64);
        let bc2 = 1.0 - self.beta2.powf(self.step as f64);
        let step_size = F::from_f64(lr / bc1);
        let inv_bc2 = F::from_f64(1.0 / bc2);
        let decay = F::from_f64(1.0 - lr * self.weight_decay);
        let eps = F::from_f64(self.eps);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *p *= decay;
            *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 0.01,
            epochs: 2000,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

const DRAW_TAG: u64 = 0x4452_4157;

/// Training state that survives a checkpoint round trip.
#[derive(Debug, Clone)]
pub struct DiffusionTrainer {
    pub params: ModelParams<f32>,
    pub optimizer: AdamW<f32>,
    pub epochs_done: usize,
    pub loss_history: Vec<f64>,
    pub hyper: TrainHyper,
}

impl DiffusionTrainer {
    pub fn new(params: ModelParams<f32>, hyper: TrainHyper) -> Result<Self> {
        hyper.validate()?;
        let optimizer = AdamW::new(params.num_params(), hyper.weight_decay);
        Ok(Self {
            params,
            optimizer,
            epochs_done: 0,
            loss_history: Vec::new(),
            hyper,
        })
    }

    /// One pass over `ds`; returns the mean per-element loss of the epoch.
    pub fn run_epoch(&mut self, ds: &Dataset, sched: &NoiseSchedule) -> Result<f64> {
        let len = ds
            .signal_len()
            .ok_or_else(|| Error::invalid("training set is empty"))?;
        UNetConfig::check_length(len)?;
        let epoch = self.epochs_done;
        let batches = minibatches(ds.len(), self.hyper.batch_size, self.hyper.seed, epoch)?;
        let mut total = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let sigs: Vec<_> = idx.iter().map(|&i| &ds.signals()[i]).collect();
            let s0 = SignalBatch::<f32>::from_signals(&sigs)?;
            let mut r = rng::seeded(rng::derive_seed(self.hyper.seed, &[DRAW_TAG, epoch as u64, bi as u64]));
            let draws = LossDraws::sample(s0.batch, s0.len, sched, &mut r);
            let (loss, grads) = self.params.loss_and_gradients(&s0, &draws, sched)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, loss });
            }
            self.optimizer
                .update(self.params.data_mut(), &grads, self.hyper.learning_rate);
            total += loss * idx.len() as f64;
        }
        let loss = total / ds.len() as f64;
        if !loss.is_finite() || self.params.data().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { epoch, loss });
        }
        self.epochs_done += 1;
        self.loss_history.push(loss);
        Ok(loss)
    }

    /// Continues until `hyper.epochs` epochs have been run in total.
    pub fn run(&mut self, ds: &Dataset, sched: &NoiseSchedule, mut on_epoch: impl FnMut(usize, f64)) -> Result<()> {
        if ds.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        while self.epochs_done < self.hyper.epochs {
            let loss = self.run_epoch(ds, sched)?;
            on_epoch(self.epochs_done, loss);
        }
        Ok(())
    }
}

/// Trains from `params` for `hyper.epochs` epochs; returns the trained
/// weights and the per-epoch loss history.
pub fn train_diffusion(
    params: ModelParams<f32>,
    ds: &Dataset,
    hyper: &TrainHyper,
    sched: &NoiseSchedule,
) -> Result<(ModelParams<f32>, Vec<f64>)> {
    let mut trainer = DiffusionTrainer::new(params, hyper.clone())?;
    trainer.run(ds, sched, |_, _| {})?;
    Ok((trainer.params, trainer.loss_history))
}
