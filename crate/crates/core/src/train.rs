//! Optimizer, learning-rate schedule, ablation switches, the epoch loop and
//! evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, Dataset, Instance, Rule};
use crate::error::{Error, Result};
use crate::layer::{LayerOptions, RouterMode};
use crate::network::{loss_and_grad, predict, ForwardConfig};
use crate::params::{Architecture, Dims, ModelParams, ModuleKind};
use crate::tensor::{Scalar, Tensor};

// ── Learning rate ───────────────────────────────────────────────────

/// Linear warm-up to a cap, then step decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    /// Rate added per warm-up epoch.
    pub warmup_step: f64,
    pub max_lr: f64,
    /// Last epoch before decay starts.
    pub decay_after: usize,
    pub decay_factor: f64,
    /// Epochs between decays.
    pub decay_every: usize,
    pub min_lr: f64,
}

/// Factor applied to the reference rates for desk-scale runs, which take far
/// fewer optimizer steps.
pub const DESK_LR_SCALE: f64 = 30.0;

impl Default for LrSchedule {
    fn default() -> Self {
        Self::reference().scaled(DESK_LR_SCALE)
    }
}

impl LrSchedule {
    /// Warm-up of 2.5e-5 per epoch capped at 1e-4, ×0.25 decay every two
    /// epochs after epoch 16, floored at 2.5e-5.
    pub fn reference() -> Self {
        Self {
            warmup_step: 2.5e-5,
            max_lr: 1e-4,
            decay_after: 16,
            decay_factor: 0.25,
            decay_every: 2,
            min_lr: 2.5e-5,
        }
    }

    /// Multiplies every rate by `factor`, keeping the shape.
    pub fn scaled(self, factor: f64) -> Self {
        Self {
            warmup_step: self.warmup_step * factor,
            max_lr: self.max_lr * factor,
            min_lr: self.min_lr * factor,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.warmup_step, self.max_lr, self.min_lr, self.decay_factor];
        if positive.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config("learning-rate schedule values must be positive".into()));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Rate for a 1-based epoch.
    pub fn lr(&self, epoch: usize) -> Result<f64> {
        if epoch < 1 {
            return Err(Error::Config("epochs are numbered from 1".into()));
        }
        let warm = |e: usize| (self.warmup_step * e as f64).min(self.max_lr);
        if epoch <= self.decay_after {
            return Ok(warm(epoch));
        }
        // The first decay lands on the epoch right after warm-up; later
        // decays follow every `decay_every` epochs.
        let decays = (epoch - self.decay_after - 1) / self.decay_every + 1;
        let rate = warm(self.decay_after) * self.decay_factor.powi(decays as i32);
        Ok(rate.max(self.min_lr))
    }
}

// ── Adam ────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update. Non-finite gradients abort before
    /// anything is modified.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Config(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Config(format!(
                    "gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of parameter {i}"),
                epoch: 0,
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let corr1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let corr2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let eps = T::from_f64_lossy(self.eps);
        let lr = T::from_f64_lossy(lr);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let m_hat = md[i] / corr1;
                let v_hat = vd[i] / corr2;
                pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

// ── Ablations ───────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub disabled_modules: Vec<ModuleKind>,
    pub router_mode: RouterMode,
    pub agreements_enabled: bool,
    pub memory_enabled: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationConfig {
    pub fn full() -> Self {
        Self {
            disabled_modules: Vec::new(),
            router_mode: RouterMode::Learned,
            agreements_enabled: true,
            memory_enabled: true,
        }
    }

    /// Parses comma-separated switches: `router=learned|random|none`,
    /// `agreements=on|off`, `memory=on|off`, `without=R5` (repeatable).
    pub fn parse(spec: &str) -> Result<Self> {
        let mut out = Self::full();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("ablation switch {item:?} is not key=value")))?;
            let flag = |v: &str| match v {
                "on" | "true" => Ok(true),
                "off" | "false" => Ok(false),
                _ => Err(Error::Config(format!("expected on/off, got {v:?}"))),
            };
            match key.trim() {
                "router" => {
                    out.router_mode = match value.trim() {
                        "learned" => RouterMode::Learned,
                        "random" => RouterMode::Random,
                        "none" => RouterMode::None,
                        other => return Err(Error::Config(format!("unknown router mode {other:?}"))),
                    }
                }
                "agreements" => out.agreements_enabled = flag(value.trim())?,
                "memory" => out.memory_enabled = flag(value.trim())?,
                "without" => {
                    let kind = ModuleKind::parse(value.trim())?;
                    if !out.disabled_modules.contains(&kind) {
                        out.disabled_modules.push(kind);
                    }
                }
                other => return Err(Error::Config(format!("unknown ablation switch {other:?}"))),
            }
        }
        Ok(out)
    }

    pub fn layer_options(&self) -> LayerOptions {
        LayerOptions {
            router: self.router_mode,
            agreements: self.agreements_enabled,
            memory: self.memory_enabled,
        }
    }

    pub fn architecture(&self, dims: Dims, with_knowledge: bool) -> Result<Architecture> {
        Architecture::with_disabled(dims, with_knowledge, &self.disabled_modules)
    }
}

// ── Evaluation ──────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub overall: f64,
    /// Accuracy per rule present in the split, keyed by rule name.
    pub per_rule: BTreeMap<Rule, f64>,
    pub loss: f64,
}

/// Exact-match accuracy of `argmax(y)` against the labeled answer, plus the
/// mean loss. Instances are visited in order so results are reproducible.
pub fn evaluate<T: Scalar>(
    arch: &Architecture,
    params: &ModelParams<T>,
    instances: &[Instance],
    config: &ForwardConfig,
) -> Result<EvalMetrics> {
    let mut correct = 0usize;
    let mut loss = 0.0;
    let mut by_rule: BTreeMap<Rule, (usize, usize)> = BTreeMap::new();
    for inst in instances {
        let pred = predict(arch, params, inst, config, 0)?;
        let hit = pred.answer() == inst.answer();
        correct += usize::from(hit);
        loss += pred.loss.to_f64_lossy();
        let slot = by_rule.entry(inst.rule).or_default();
        slot.0 += usize::from(hit);
        slot.1 += 1;
    }
    let count = instances.len().max(1) as f64;
    Ok(EvalMetrics {
        overall: correct as f64 / count,
        per_rule: by_rule
            .into_iter()
            .map(|(rule, (hit, total))| (rule, hit as f64 / total as f64))
            .collect(),
        loss: loss / count,
    })
}

// ── Training ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 30,
            seed: 7,
            schedule: LrSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub per_rule_acc: BTreeMap<Rule, f64>,
}

/// Callbacks fired during training.
pub trait TrainObserver {
    /// After every epoch, with the metrics and current parameters.
    fn epoch_end(&mut self, _metrics: &EpochMetrics, _params: &ModelParams<f32>) -> Result<()> {
        Ok(())
    }
    /// Whenever the best validation result improves.
    fn new_best(&mut self, _epoch: usize, _params: &ModelParams<f32>) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: ModelParams<f32>,
    /// 0 when no epoch ran and the initial parameters are returned.
    pub best_epoch: usize,
    pub last: ModelParams<f32>,
    pub history: Vec<EpochMetrics>,
}

/// Mean loss and summed-then-averaged gradient over a batch, accumulated in
/// batch order.
pub fn batch_gradient<T: Scalar>(
    arch: &Architecture,
    params: &ModelParams<T>,
    batch: &[&Instance],
    config: &ForwardConfig,
    salt: u64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut total: Option<Vec<Tensor<T>>> = None;
    let mut loss = 0.0;
    for inst in batch {
        let (l, g) = loss_and_grad(arch, params, inst, config, salt)?;
        loss += l.to_f64_lossy();
        total = Some(match total {
            None => g,
            Some(mut acc) => {
                for (a, gi) in acc.iter_mut().zip(&g) {
                    for (x, &y) in a.data_mut().iter_mut().zip(gi.data()) {
                        *x = *x + y;
                    }
                }
                acc
            }
        });
    }
    let n = batch.len().max(1);
    let scale = T::one() / T::from_usize(n).unwrap();
    let grads = total
        .unwrap_or_else(|| params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect())
        .into_iter()
        .map(|g| g.map(|x| x * scale))
        .collect();
    Ok((loss / n as f64, grads))
}

/// Trains `initial` on `dataset.train`, evaluating on `dataset.val` after
/// every epoch. Returns the best parameters by validation accuracy (ties go
/// to the lower validation loss).
pub fn train(
    arch: &Architecture,
    initial: ModelParams<f32>,
    dataset: &Dataset,
    forward: &ForwardConfig,
    settings: &TrainSettings,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    if settings.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    settings.schedule.validate()?;
    initial.validate(arch)?;
    for (i, inst) in dataset.train.iter().chain(&dataset.val).enumerate() {
        inst.check(&arch.dims, i)?;
    }

    let mut params = initial;
    let mut best = params.clone();
    let mut best_key: Option<(f64, f64)> = None;
    let mut best_epoch = 0;
    let mut optimizer = OptimizerState::new(params.tensors());
    let mut history = Vec::with_capacity(settings.epochs);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();

    for epoch in 1..=settings.epochs {
        let lr = settings.schedule.lr(epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(settings.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(settings.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let (loss, grads) = batch_gradient(arch, &params, &batch, forward, epoch as u64)
                .map_err(|e| numerical(e, epoch))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "training loss".into(),
                    epoch,
                });
            }
            loss_sum += loss * batch.len() as f64;
            optimizer
                .step(params.tensors_mut(), &grads, lr)
                .map_err(|e| numerical(e, epoch))?;
            if !params.is_finite() {
                return Err(Error::NonFinite {
                    what: "parameters".into(),
                    epoch,
                });
            }
        }

        let val = evaluate(arch, &params, &dataset.val, forward).map_err(|e| numerical(e, epoch))?;
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / dataset.train.len().max(1) as f64,
            val_loss: val.loss,
            val_acc: val.overall,
            per_rule_acc: val.per_rule,
        };
        let improved = match best_key {
            None => true,
            Some((acc, loss)) => metrics.val_acc > acc || (metrics.val_acc == acc && metrics.val_loss < loss),
        };
        if improved {
            best_key = Some((metrics.val_acc, metrics.val_loss));
            best = params.clone();
            best_epoch = epoch;
            observer.new_best(epoch, &best)?;
        }
        observer.epoch_end(&metrics, &params)?;
        history.push(metrics);
    }

    Ok(TrainOutcome {
        best,
        best_epoch,
        last: params,
        history,
    })
}

/// Tags a numerical failure with the epoch it happened in.
fn numerical(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, epoch },
        Error::Tensor(crate::tensor::TensorError::NonFinite { op }) => Error::NonFinite {
            what: format!("{op} output"),
            epoch,
        },
        other => other,
    }
}
