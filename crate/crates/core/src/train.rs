//! Min-SNR weighted noise-prediction training with exact resume.
//!
//! All randomness of step `k` (timesteps, noise, dropout mask) is drawn from
//! a stream keyed by `(seed, k)` and the sample order of epoch `e` from a
//! stream keyed by `(seed, e)`. A checkpoint therefore only needs the step
//! counter to continue bit-identically.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use ndarray::{Array4, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::denoiser::denoiser_forward;
use crate::error::{dim, invalid, Error, IoContext, Result};
use crate::image::Image;
use crate::model::{is_adapter_param, Model, MODEL_FILE};
use crate::params::{Adam, AdamConfig, Graph};
use crate::parcel::BrainSample;
use crate::rng::{tagged, tags};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::tokenizer::{encode_graph, responses_tensor, DropoutMask};

pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const STATE_FILE: &str = "state.json";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    #[default]
    NoisePrediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Caps the number of optimizer steps below `epochs` worth of batches.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub token_dropout: bool,
    /// After this many steps only the tokenizer and cross-attention weights
    /// keep training.
    pub adapter_only_after: Option<usize>,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub loss_parameterization: Parameterization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            max_steps: None,
            seed: 0,
            optimizer: AdamConfig::default(),
            token_dropout: true,
            adapter_only_after: None,
            checkpoint_every: 0,
            loss_parameterization: Parameterization::NoisePrediction,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::Config { field: format!("train.{field}"), reason: reason.into() });
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps", "must be positive when set");
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            return bad("optimizer.learning_rate", "must be a positive number");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(n);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    /// Dataset indices used by optimizer step `step`.
    pub fn batch_indices(&self, n: usize, step: usize) -> Vec<usize> {
        let per_epoch = self.steps_per_epoch(n);
        let (epoch, pos) = (step / per_epoch, step % per_epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut tagged(self.seed, tags::EPOCH, epoch as u64));
        let start = pos * self.batch_size;
        order[start..(start + self.batch_size).min(n)].to_vec()
    }
}

/// Paired training data.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub samples: Vec<BrainSample>,
}

impl Dataset {
    pub fn new(images: Vec<Image>, samples: Vec<BrainSample>) -> Result<Self> {
        if images.is_empty() {
            return Err(invalid("dataset is empty"));
        }
        if images.len() != samples.len() {
            return Err(dim(format!("{} images but {} brain samples", images.len(), samples.len())));
        }
        Ok(Self { images, samples })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

pub fn stack_images(images: &[Image]) -> Result<Array4<f32>> {
    let views: Vec<_> = images.iter().map(|i| i.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| dim(format!("images differ in shape: {e}")))
}

/// Randomness consumed by one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInputs {
    pub t: Vec<usize>,
    pub noise: Array4<f32>,
    pub mask: DropoutMask,
    /// Per-sample loss weights `w_t`.
    pub weights: Vec<f64>,
}

pub fn draw_step_inputs(
    sched: &NoiseSchedule,
    n: usize,
    image_size: usize,
    p: usize,
    token_dropout: bool,
    rng: &mut impl Rng,
) -> Result<StepInputs> {
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..sched.timesteps())).collect();
    let noise = Array4::from_shape_simple_fn((n, image_size, image_size, 3), || StandardNormal.sample(rng));
    let mask = if token_dropout { DropoutMask::draw(n, p, None, rng) } else { DropoutMask::keep_all(n, p) };
    let weights = t.iter().map(|&t| sched.min_snr_weight(t)).collect::<Result<Vec<_>>>()?;
    Ok(StepInputs { t, noise, mask, weights })
}

/// `mean(w_b * (eps_hat - eps)^2)` over every element.
pub fn weighted_mse(tape: &mut Tape<f32>, eps_hat: Var, eps: &Array4<f32>, weights: &[f64]) -> Var {
    let b = weights.len();
    let target = tape.constant(eps.clone().into_dyn());
    let w = ArrayD::from_shape_vec(IxDyn(&[b, 1, 1, 1]), weights.iter().map(|&w| w as f32).collect()).unwrap();
    let w = tape.constant(w);
    let d = tape.sub(eps_hat, target);
    let sq = tape.mul(d, d);
    let weighted = tape.mul(sq, w);
    tape.mean_all(weighted)
}

pub struct StepResult {
    pub loss: f64,
    pub mean_weight: f64,
    pub grads: BTreeMap<String, ArrayD<f32>>,
}

/// Forward and backward pass for one batch.
pub fn training_step(
    model: &Model,
    sched: &NoiseSchedule,
    images: &[Image],
    samples: &[BrainSample],
    inputs: &StepInputs,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<StepResult> {
    let x0 = stack_images(images)?;
    let n = x0.dim().0;
    if samples.len() != n || inputs.t.len() != n || inputs.noise.dim() != x0.dim() {
        return Err(dim("batch images, samples and step inputs disagree"));
    }
    let mut xt = x0;
    for (i, &t) in inputs.t.iter().enumerate() {
        let a = sched.alpha_bar(t)?;
        let (sa, sn) = (a.sqrt() as f32, (1.0 - a).sqrt() as f32);
        let noise = inputs.noise.index_axis(Axis(0), i);
        xt.index_axis_mut(Axis(0), i).zip_mut_with(&noise, |x, &e| *x = sa * *x + sn * e);
    }
    let responses = responses_tensor(samples)?;
    let mut g = Graph::with_trainable(&model.params, trainable);
    let rv = g.tape.constant(responses.into_dyn());
    let tokens = encode_graph(&mut g, rv)?;
    let mask = g.tape.constant(inputs.mask.mask.clone().into_dyn());
    let tokens = g.tape.mul(tokens, mask);
    let xv = g.tape.constant(xt.into_dyn());
    let out = denoiser_forward(&mut g, &model.config.denoiser, xv, &inputs.t, tokens)?;
    let loss = weighted_mse(&mut g.tape, out.eps, &inputs.noise, &inputs.weights);
    let value = g.tape.value(loss).iter().next().copied().unwrap_or(f32::NAN) as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss at timesteps {:?}", inputs.t)));
    }
    let grads = g.gradients(loss);
    let mean_weight = inputs.weights.iter().sum::<f64>() / n as f64;
    Ok(StepResult { loss: value, mean_weight, grads })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub mean_w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainState {
    step: usize,
    train: TrainConfig,
    schedule: ScheduleConfig,
    /// Per-step streams are keyed by `(seed, step)`; this records that scheme.
    rng: RngState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_step: usize,
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub schedule_config: ScheduleConfig,
    sched: NoiseSchedule,
    step: usize,
    pub history: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(model: Model, schedule_config: ScheduleConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sched = NoiseSchedule::linear(&schedule_config)?;
        Ok(Self { model, optimizer: Adam::new(config.optimizer.clone()), config, schedule_config, sched, step: 0, history: Vec::new() })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn adapter_only(&self) -> bool {
        self.config.adapter_only_after.is_some_and(|k| self.step >= k)
    }

    /// One optimizer step on the batch scheduled for the current step.
    pub fn train_step(&mut self, data: &Dataset) -> Result<LossRecord> {
        let idx = self.config.batch_indices(data.len(), self.step);
        let batch = data.subset(&idx);
        let mut rng = tagged(self.config.seed, tags::STEP, self.step as u64);
        let inputs = draw_step_inputs(
            &self.sched,
            idx.len(),
            self.model.config.denoiser.image_size,
            self.model.num_parcels(),
            self.config.token_dropout,
            &mut rng,
        )?;
        let adapter_only = self.adapter_only();
        let trainable = move |name: &str| !adapter_only || is_adapter_param(name);
        let result = training_step(&self.model, &self.sched, &batch.images, &batch.samples, &inputs, &trainable)?;
        self.optimizer.update(&mut self.model.params, &result.grads)?;
        let record = LossRecord { step: self.step, loss: result.loss, mean_w: result.mean_weight };
        self.history.push(record.clone());
        self.step += 1;
        Ok(record)
    }

    /// Trains until `total_steps`, checkpointing into `out` when given.
    pub fn run(&mut self, data: &Dataset, out: Option<&Path>) -> Result<()> {
        let total = self.config.total_steps(data.len());
        while self.step < total {
            let rec = self.train_step(data)?;
            if rec.step % 100 == 0 || self.step == total {
                info!("step {} / {total}: loss {:.5} (mean w {:.3})", rec.step, rec.loss, rec.mean_w);
            }
            if let Some(dir) = out {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step % every == 0 && self.step < total {
                    self.save(dir)?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(dir)?;
        }
        Ok(())
    }

    /// Writes model, optimizer, state and loss curve into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        self.model.save(&dir.join(MODEL_FILE))?;
        self.optimizer.save(&dir.join(OPTIMIZER_FILE))?;
        let state = TrainState {
            step: self.step,
            train: self.config.clone(),
            schedule: self.schedule_config.clone(),
            rng: RngState { seed: self.config.seed, next_step: self.step },
        };
        let path = dir.join(STATE_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&state).expect("state serializes")).at(&path)?;
        write_loss_csv(&dir.join(LOSS_FILE), &self.history)
    }

    /// Restores a trainer from a checkpoint directory written by [`Trainer::save`].
    pub fn resume(dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = std::fs::read_to_string(&path).at(&path)?;
        let state: TrainState =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let model = Model::load(&dir.join(MODEL_FILE))?;
        let optimizer = Adam::load(state.train.optimizer.clone(), &dir.join(OPTIMIZER_FILE))?;
        let history = read_loss_csv(&dir.join(LOSS_FILE))?;
        if history.len() != state.step {
            return Err(Error::Checkpoint(format!("loss curve has {} rows for step {}", history.len(), state.step)));
        }
        let sched = NoiseSchedule::linear(&state.schedule)?;
        Ok(Self {
            model,
            optimizer,
            config: state.train,
            schedule_config: state.schedule,
            sched,
            step: state.step,
            history,
        })
    }
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().at(path)?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Weighted loss on fixed `(t, noise)` draws per item without dropout: a
/// low-variance view of how well the model fits `data`.
pub fn probe_loss(model: &Model, sched: &NoiseSchedule, data: &Dataset, draws_per_item: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let all_params = |_: &str| false;
    for i in 0..data.len() {
        let mut rng = tagged(seed, tags::PROBE, i as u64);
        let t: Vec<usize> = (0..draws_per_item)
            .map(|k| {
                let lo = k * sched.timesteps() / draws_per_item;
                let hi = (k + 1) * sched.timesteps() / draws_per_item;
                rng.random_range(lo..hi)
            })
            .collect();
        let s = model.config.denoiser.image_size;
        let noise = Array4::from_shape_simple_fn((draws_per_item, s, s, 3), || StandardNormal.sample(&mut rng));
        let weights = t.iter().map(|&t| sched.min_snr_weight(t)).collect::<Result<Vec<_>>>()?;
        let inputs = StepInputs { t, noise, mask: DropoutMask::keep_all(draws_per_item, model.num_parcels()), weights };
        let images = vec![data.images[i].clone(); draws_per_item];
        let samples = vec![data.samples[i].clone(); draws_per_item];
        let r = training_step(model, sched, &images, &samples, &inputs, &all_params)?;
        total += r.loss;
        count += 1;
    }
    Ok(total / count as f64)
}
