//! The optimization loop: loss assembly, clipping, AdamW, schedules and
//! resumable state.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::Batcher;
use crate::depth::{temperature_at, TemperatureSchedule};
use crate::error::{Error, Result};
use crate::layer::LayerTrace;
use crate::model::{model_loss, ForwardMode, Model, ModelConfig};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig, LrSchedule};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

const LAMBDA_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub seq: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub lr_floor_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub aux_weight: f64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_decay_frac: f64,
    /// Soft loop aggregation in the forward pass instead of straight-through.
    pub soft_mode: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            seq: 32,
            peak_lr: 3e-3,
            warmup_frac: 0.05,
            lr_floor_frac: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
            aux_weight: 1e-5,
            tau_init: 5.0,
            tau_min: 0.1,
            tau_decay_frac: 0.8,
            soft_mode: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be positive"));
        }
        if self.seq < 2 || self.seq > model.max_seq {
            return Err(Error::config(
                "seq",
                format!("must lie in [2, max_seq = {}], got {}", model.max_seq, self.seq),
            ));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("peak_lr", "must be a non-negative number"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config("warmup_frac", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.lr_floor_frac) {
            return Err(Error::config("lr_floor_frac", "must lie in [0, 1]"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if !(self.aux_weight >= 0.0) {
            return Err(Error::config("aux_weight", "must be non-negative"));
        }
        self.temperature().validate()
    }

    pub fn temperature(&self) -> TemperatureSchedule {
        TemperatureSchedule {
            tau_init: self.tau_init,
            tau_min: self.tau_min,
            decay_frac: self.tau_decay_frac,
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.peak_lr,
            warmup_frac: self.warmup_frac,
            floor_frac: self.lr_floor_frac,
            total_steps: self.steps,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// `lm_loss + aux_weight * aux_loss`.
    pub loss: f64,
    pub lm_loss: f64,
    /// Unweighted sum of the per-layer balance losses.
    pub aux_loss: f64,
    pub lr: f64,
    pub tau: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub mean_expected_loops: Vec<f64>,
    pub mean_loops: Vec<f64>,
    pub mean_lambda: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Counts over `[0, 1)` in ten equal bins, all layers pooled.
    pub lambda_hist: Vec<usize>,
    /// Assignment fraction per expert, per layer.
    pub expert_load: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_per_sec: Option<f64>,
}

pub fn lambda_histogram<'a>(values: impl IntoIterator<Item = &'a f64>) -> Vec<usize> {
    let mut hist = vec![0; LAMBDA_BINS];
    for &l in values {
        let bin = ((l * LAMBDA_BINS as f64) as usize).min(LAMBDA_BINS - 1);
        hist[bin] += 1;
    }
    hist
}

#[allow(clippy::type_complexity)]
fn summarize(traces: &[LayerTrace]) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64, f64, Vec<usize>, Vec<Vec<f64>>) {
    let all = || traces.iter().flat_map(|t| &t.lambda);
    let load = traces
        .iter()
        .map(|t| {
            let total: usize = t.expert_counts.iter().sum();
            t.expert_counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
        })
        .collect();
    (
        traces.iter().map(LayerTrace::mean_expected).collect(),
        traces.iter().map(LayerTrace::mean_loops).collect(),
        traces.iter().map(LayerTrace::mean_lambda).collect(),
        all().copied().fold(f64::INFINITY, f64::min),
        all().copied().fold(f64::NEG_INFINITY, f64::max),
        lambda_histogram(all()),
        load,
    )
}

/// Model, optimizer and random streams of one training run.
pub struct Trainer<T: Real = f64> {
    pub model: Model<T>,
    pub optim: AdamW<T>,
    pub config: TrainConfig,
    /// Gumbel noise stream.
    pub noise: Rng,
    pub batcher: Batcher,
    step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate(&model)?;
        let model = Model::new(model, config.seed)?;
        let optim = AdamW::new(config.adamw(), &model.params);
        Ok(Self {
            noise: Rng::with_stream(config.seed, 1),
            batcher: Batcher::new(config.batch, config.seq, Rng::with_stream(config.seed, 2)),
            model,
            optim,
            config,
            step: 0,
        })
    }

    /// Steps completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    pub fn next_batch(&mut self, stream: &[usize]) -> Vec<usize> {
        self.batcher.next(stream)
    }

    /// Forward, backward, clip and update on one `[batch * seq]` batch.
    pub fn train_step(&mut self, tokens: &[usize]) -> Result<StepMetrics> {
        let c = &self.config;
        let (batch, seq) = (c.batch, c.seq);
        let tau = temperature_at(&c.temperature(), self.step, c.steps);
        let lr = c.lr_schedule().lr_at(self.step);
        let (aux_weight, clip, soft) = (c.aux_weight, c.clip_norm, c.soft_mode);

        let mut tape = Tape::new();
        let vars = self.model.params.bind(&mut tape);
        let mode = ForwardMode::Train {
            tau,
            rng: &mut self.noise,
            soft,
        };
        let out = model_loss(&mut tape, &self.model, &vars, tokens, batch, seq, mode, aux_weight)?;
        let loss = tape.value(out.loss).item().as_f64();
        let lm = tape.value(out.lm).item().as_f64();
        let aux = out.aux.map_or(0.0, |a| tape.value(a).item().as_f64());
        let non_finite = |loss: f64| Error::NonFinite {
            step: self.step,
            loss,
            aux,
            lr,
            tau,
        };
        if !loss.is_finite() {
            return Err(non_finite(loss));
        }

        let mut grads = tape.backward(out.loss)?;
        let mut flat: Vec<Tensor<T>> = vars
            .iter()
            .map(|(id, v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(self.model.params.get(id).shape())))
            .collect();
        let grad_norm = clip_global_norm(&mut flat, clip);
        if !grad_norm.is_finite() {
            return Err(non_finite(loss));
        }
        self.optim.update(&mut self.model.params, &flat, lr)?;

        let (mean_expected_loops, mean_loops, mean_lambda, lambda_min, lambda_max, lambda_hist, expert_load) =
            summarize(&out.traces);
        let metrics = StepMetrics {
            step: self.step,
            loss,
            lm_loss: lm,
            aux_loss: aux,
            lr,
            tau,
            grad_norm,
            mean_expected_loops,
            mean_loops,
            mean_lambda,
            lambda_min,
            lambda_max,
            lambda_hist,
            expert_load,
            tokens_per_sec: None,
        };
        self.step += 1;
        Ok(metrics)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut tensors = Vec::with_capacity(3 * self.model.params.len());
        for (i, (_, p)) in self.model.params.iter().enumerate() {
            tensors.push((format!("param.{}", p.name), p.value.clone()));
            tensors.push((format!("adam_m.{}", p.name), self.optim.m[i].clone()));
            tensors.push((format!("adam_v.{}", p.name), self.optim.v[i].clone()));
        }
        Checkpoint {
            config_digest: self.model.config.digest(),
            counters: vec![("step".into(), self.step), ("optim_step".into(), self.optim.step)],
            rngs: vec![
                ("noise".into(), self.noise.state()),
                ("data".into(), self.batcher.rng().state()),
            ],
            tensors,
        }
    }

    /// Rebuilds a trainer from a checkpoint written for the same model.
    pub fn resume(model: ModelConfig, config: TrainConfig, ckpt: &Checkpoint<T>) -> Result<Self> {
        let mut t = Self::new(model, config)?;
        if ckpt.config_digest != t.model.config.digest() {
            return Err(CheckpointError::ConfigMismatch.into());
        }
        load_params(&mut t.model, ckpt)?;
        let names: Vec<String> = t.model.params.iter().map(|(_, p)| p.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            t.optim.m[i] = checked(ckpt, &format!("adam_m.{name}"), t.optim.m[i].shape())?;
            t.optim.v[i] = checked(ckpt, &format!("adam_v.{name}"), t.optim.v[i].shape())?;
        }
        t.step = ckpt.counter("step")?;
        t.optim.step = ckpt.counter("optim_step")?;
        t.noise = Rng::from_state(&ckpt.rng("noise")?);
        t.batcher.set_rng(Rng::from_state(&ckpt.rng("data")?));
        Ok(t)
    }
}

fn checked<T: Real>(ckpt: &Checkpoint<T>, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let t = ckpt.tensor(name)?;
    if t.shape() != shape {
        return Err(CheckpointError::Malformed(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())).into());
    }
    Ok(t.clone())
}

/// Copies checkpointed parameter values into `model`.
pub fn load_params<T: Real>(model: &mut Model<T>, ckpt: &Checkpoint<T>) -> Result<()> {
    if ckpt.config_digest != model.config.digest() {
        return Err(CheckpointError::ConfigMismatch.into());
    }
    let ids: Vec<_> = model.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let shape = model.params.get(id).shape().to_vec();
        *model.params.get_mut(id) = checked(ckpt, &format!("param.{name}"), &shape)?;
    }
    Ok(())
}
