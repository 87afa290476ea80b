//! Learning-rate schedule, Adam and the two-stage training loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::Utterance;
use crate::error::{contract, Error, Result};
use crate::fusion::{Model, VariantKind};
use crate::noise::{mix_at_snr, NoiseBank, NoisePool, PartitionPart};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub peak_lr: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Config {
                field: "warmup_steps".into(),
                reason: format!("need 0 < warmup ({}) < total ({})", self.warmup_steps, self.total_steps),
            });
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config {
                field: "peak_lr".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Linear warmup to the peak, then linear decay to zero at `total_steps`.
pub fn lr_at(step: usize, s: &LrSchedule) -> Result<f64> {
    s.validate()?;
    if step > s.total_steps {
        return Err(contract(format!("step {step} beyond total {}", s.total_steps)));
    }
    // The ratio is formed first so that it is exactly 1 at the breakpoint.
    let frac = if step <= s.warmup_steps {
        step as f64 / s.warmup_steps as f64
    } else {
        (s.total_steps - step) as f64 / (s.total_steps - s.warmup_steps) as f64
    };
    Ok(s.peak_lr * frac)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: impl Iterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes.map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { cfg, m, v, t: 0 }
    }

    /// One bias-corrected update of every parameter in place.
    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[&[f64]], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (x, &g)) in p.iter_mut().zip(grads[k]).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1Audio,
    Stage2Av,
}

/// Babble augmentation applied to training audio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub pool: NoisePool,
    pub snr_db: f64,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub augmentation: Option<Augmentation>,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: Stage::Stage1Audio,
            steps: 2000,
            batch_size: 8,
            warmup_steps: 100,
            peak_lr: 1e-3,
            augmentation: None,
            adam: AdamConfig::default(),
            seed: 1,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: Stage::Stage2Av,
            steps: 3000,
            batch_size: 8,
            warmup_steps: 300,
            peak_lr: 8e-3,
            augmentation: Some(Augmentation {
                pool: NoisePool::A,
                snr_db: 0.0,
                probability: 0.5,
            }),
            adam: AdamConfig::default(),
            seed: 1,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            peak_lr: self.peak_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config {
                field: "batch_size".into(),
                reason: "must be positive".into(),
            });
        }
        if self.steps > 0 {
            self.schedule().validate()?;
        }
        if let Some(a) = &self.augmentation {
            if !(0.0..=1.0).contains(&a.probability) {
                return Err(Error::Config {
                    field: "augmentation.probability".into(),
                    reason: "must lie in [0, 1]".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Audio of `u` mixed with babble from `part` of `bank`.
pub fn noisy_audio(u: &Utterance, bank: &NoiseBank, part: PartitionPart, snr_db: f64, seed: u64) -> Result<Tensor> {
    let track = bank.babble(part, u.audio.rows(), seed)?;
    mix_at_snr(&u.audio, &track.features, snr_db)
}

/// Copies the audio-only stage-1 weights into the shared submodules of
/// `model`. Returns the number of tensors copied.
pub fn init_from_stage1(model: &mut Model, stage1: &Model) -> Result<usize> {
    if stage1.kind() != VariantKind::AudioOnly {
        return Err(contract("stage-1 checkpoint must be the audio_only variant"));
    }
    Ok(model.params.copy_matching(&stage1.params))
}

/// Trains `model` in place and returns the per-step loss trace.
///
/// Every step samples `batch_size` utterances with replacement; the loss
/// is the mean over the batch.
pub fn train(
    model: &mut Model,
    data: &[Utterance],
    noise: Option<&NoiseBank>,
    cfg: &TrainConfig,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(contract("no training data"));
    }
    if cfg.stage == Stage::Stage1Audio && model.kind() != VariantKind::AudioOnly {
        return Err(contract("stage 1 trains the audio_only variant"));
    }
    if let Some(a) = &cfg.augmentation {
        match noise {
            Some(bank) if bank.pool == a.pool => {}
            _ => return Err(contract(format!("augmentation needs the {} noise bank", a.pool))),
        }
    }
    let schedule = cfg.schedule();
    let visual = model.kind().is_audiovisual();
    let ids: Vec<_> = model.params.ids().collect();
    let mut adam = Adam::new(cfg.adam, ids.iter().map(|&id| model.params.get(id).len()));
    let mut trace = Vec::with_capacity(cfg.steps);
    let diverged = |step: usize, reason: String| Error::Diverged { step, reason };

    for step in 1..=cfg.steps {
        let lr = lr_at(step, &schedule)?;
        let mut rng = seed::rng(cfg.seed, "batch", step as u64);
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let u = &data[rng.gen_range(0..data.len())];
            let audio = match (&cfg.augmentation, noise) {
                (Some(a), Some(bank)) if rng.gen_bool(a.probability) => {
                    let nseed = seed::derive(cfg.seed, "augment", (step * cfg.batch_size + b) as u64);
                    noisy_audio(u, bank, PartitionPart::Train, a.snr_db, nseed)?
                }
                _ => u.audio.clone(),
            };
            let x_v = visual.then_some(&u.video);
            let loss = model.loss(&mut g, &p, &audio, x_v, &u.tokens).map_err(|e| match e {
                Error::NonFinite { op } => diverged(step, format!("non-finite value in {op}")),
                other => other,
            })?;
            losses.push(loss);
        }
        let stacked = g.concat(&losses).map_err(|e| diverged(step, e.to_string()))?;
        let loss = g.mean(stacked).map_err(|e| diverged(step, e.to_string()))?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(diverged(step, "loss is not finite".into()));
        }
        let grads = g.backward(loss)?;

        let mut values: Vec<Vec<f64>> = ids.iter().map(|&id| model.params.get(id).data().to_vec()).collect();
        let grad_slices: Vec<&[f64]> = ids.iter().map(|&id| grads.wrt(p.get(id)).data()).collect();
        if grad_slices.iter().any(|gs| gs.iter().any(|x| !x.is_finite())) {
            return Err(diverged(step, "gradient is not finite".into()));
        }
        adam.step(&mut values, &grad_slices, lr);
        for (&id, v) in ids.iter().zip(values) {
            let shape = model.params.get(id).shape().to_vec();
            model.params.set(id, Tensor::new(shape, v)?)?;
        }
        trace.push(TraceRow { step, lr, loss: value });
    }
    Ok(trace)
}
