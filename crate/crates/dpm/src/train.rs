//! Adam training of the reference network with an exponential moving average
//! of its parameters.

use petdiff_core::rng::Generator;
use petdiff_core::{Error, Result, RngStream, Slice2D};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::net::{ConvNet, TrainSample};
use crate::sample::standard_normal;
use crate::schedule::NoiseSchedule;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Gradients with a larger global norm are rescaled to this norm.
const GRAD_CLIP: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    /// λ of the hybrid loss.
    pub vlb_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_epochs: 40,
            batch_size: 8,
            learning_rate: 2e-3,
            ema_decay: 0.995,
            vlb_weight: 0.001,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_epochs >= 1, Invalid, "n_epochs must be >= 1");
        ensure!(self.batch_size >= 1, Invalid, "batch_size must be >= 1");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Invalid,
            "learning_rate must be > 0, got {}",
            self.learning_rate
        );
        ensure!(
            (0.0..1.0).contains(&self.ema_decay),
            Invalid,
            "ema_decay must lie in [0, 1), got {}",
            self.ema_decay
        );
        ensure!(self.vlb_weight >= 0.0, Invalid, "vlb_weight must be >= 0, got {}", self.vlb_weight);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub eps_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub eps_loss: f64,
}

/// A training pair: normalized target `x_0` and normalized condition `c`.
pub type Pair = (Slice2D, Slice2D);

pub struct Trainer {
    net: ConvNet,
    ema: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    cfg: TrainConfig,
    sched: NoiseSchedule,
}

impl Trainer {
    pub fn new(net: ConvNet, sched: NoiseSchedule, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let n = net.n_params();
        Ok(Trainer {
            ema: net.params().to_vec(),
            net,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            cfg,
            sched,
        })
    }

    pub fn net(&self) -> &ConvNet {
        &self.net
    }

    pub fn ema(&self) -> &[f64] {
        &self.ema
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// The network with its averaged parameters, used for sampling.
    pub fn ema_net(&self) -> ConvNet {
        ConvNet::from_params(self.net.architecture(), self.ema.clone()).expect("EMA matches the architecture")
    }

    pub fn into_parts(self) -> (ConvNet, Vec<f64>) {
        (self.net, self.ema)
    }

    /// Draws `t` and `ε` for each pair, in order, from `g`.
    pub fn draw_samples(&self, batch: &[Pair], g: &mut Generator) -> Vec<TrainSample> {
        batch
            .iter()
            .map(|(x0, c)| {
                let t = g.random_range(1..=self.sched.t_max());
                let eps = standard_normal(x0.nx, x0.ny, g);
                TrainSample {
                    x0: x0.clone(),
                    c: c.clone(),
                    t,
                    eps,
                }
            })
            .collect()
    }

    /// Mean hybrid loss and gradient over `samples` at the current parameters.
    pub fn batch_loss(&self, samples: &[TrainSample]) -> Result<(StepStats, Vec<f64>)> {
        ensure!(!samples.is_empty(), Invalid, "training batch is empty");
        let evals: Vec<_> = samples
            .par_iter()
            .map(|s| self.net.loss_and_grad(s, &self.sched, self.cfg.vlb_weight, None))
            .collect::<Result<_>>()?;
        let k = samples.len() as f64;
        let mut grad = vec![0.0; self.net.n_params()];
        let (mut loss, mut eps_loss) = (0.0, 0.0);
        for e in &evals {
            loss += e.loss / k;
            eps_loss += e.eps_loss / k;
            for (g, d) in grad.iter_mut().zip(&e.grad) {
                *g += d / k;
            }
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            let ts: Vec<usize> = samples.iter().map(|s| s.t).collect();
            let pnorm = self.net.params().iter().map(|p| p * p).sum::<f64>().sqrt();
            return Err(Error::Numerical(format!(
                "non-finite training loss {loss} at step {} (timesteps {ts:?}, gradient norm {norm}, parameter norm {pnorm})",
                self.step
            )));
        }
        Ok((StepStats { loss, eps_loss }, grad))
    }

    /// One optimizer step on `batch`, followed by an EMA update.
    pub fn train_step(&mut self, batch: &[Pair], g: &mut Generator) -> Result<StepStats> {
        let samples = self.draw_samples(batch, g);
        let (stats, mut grad) = self.batch_loss(&samples)?;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > GRAD_CLIP {
            grad.iter_mut().for_each(|g| *g *= GRAD_CLIP / norm);
        }
        self.step += 1;
        let s = self.step as i32;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(s), 1.0 - ADAM_BETA2.powi(s));
        let lr = self.cfg.learning_rate;
        for (i, p) in self.net.params_mut().iter_mut().enumerate() {
            let gi = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * gi;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            *p -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
        self.update_ema();
        Ok(stats)
    }

    /// Moves the averaged parameters toward the current ones. The decay ramps
    /// up as `(1 + n)/(10 + n)` over the first steps.
    pub fn update_ema(&mut self) {
        let n = self.step as f64;
        let d = self.cfg.ema_decay.min((1.0 + n) / (10.0 + n));
        for (e, p) in self.ema.iter_mut().zip(self.net.params()) {
            *e = d * *e + (1.0 - d) * p;
        }
    }

    /// One pass over `data` in a seeded random order.
    pub fn train_epoch(&mut self, data: &[Pair], epoch: usize) -> Result<EpochStats> {
        ensure!(!data.is_empty(), Invalid, "no training pairs");
        let root = RngStream::new(self.cfg.seed).split_named("train");
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut root.split_named("shuffle").split(epoch as u64).generator());
        let (mut loss, mut eps_loss, mut n) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<Pair> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut g = root.split_named("step").split(self.step).generator();
            let s = self.train_step(&batch, &mut g)?;
            loss += s.loss * batch.len() as f64;
            eps_loss += s.eps_loss * batch.len() as f64;
            n += batch.len();
        }
        Ok(EpochStats {
            epoch,
            loss: loss / n as f64,
            eps_loss: eps_loss / n as f64,
        })
    }

    /// Runs all configured epochs, calling `observe` after each.
    pub fn fit(&mut self, data: &[Pair], mut observe: impl FnMut(&EpochStats)) -> Result<Vec<EpochStats>> {
        let mut history = Vec::with_capacity(self.cfg.n_epochs);
        for epoch in 1..=self.cfg.n_epochs {
            let s = self.train_epoch(data, epoch)?;
            log::info!("epoch {epoch}: loss {:.5} (noise {:.5})", s.loss, s.eps_loss);
            observe(&s);
            history.push(s);
        }
        Ok(history)
    }
}
