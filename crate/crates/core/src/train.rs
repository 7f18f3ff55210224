//! SGD with momentum and the training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{total_loss, LossConfig, LossValues};
use crate::data::{augment, keypoint_targets, stack_images, LabeledSample};
use crate::model::{Model, ATTENTION_PREFIX, BACKBONE_PREFIX};
use crate::nn::Binder;
use crate::tensor::{Real, Tape, Tensor};
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "iteration,lr,ce,attn,reg,total,wall_ms";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: Real,
    pub momentum: Real,
    pub weight_decay: Real,
    pub batch: usize,
    /// Learning-rate factor for parameters under `backbone.`.
    pub backbone_lr_mult: Real,
    /// Learning-rate factor for parameters under `attention.`.
    pub attention_lr_mult: Real,
    pub decay_factor: Real,
    pub decay_every: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
    /// Save an extra checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
    /// When false the `wall_ms` column is written as 0, making the metrics
    /// file reproducible byte for byte.
    pub log_wall_time: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch: 10,
            backbone_lr_mult: 1.0,
            attention_lr_mult: 1.0,
            decay_factor: 0.9,
            decay_every: 1000,
            epochs: 30,
            seed: 0,
            augment: true,
            checkpoint_every: 0,
            log_wall_time: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("backbone_lr_mult", self.backbone_lr_mult),
            ("attention_lr_mult", self.attention_lr_mult),
            ("decay_factor", self.decay_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0,1) and weight decay non-negative".into()));
        }
        if self.batch == 0 || self.decay_every == 0 || self.epochs == 0 {
            return Err(Error::Config("batch, decay_every and epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// `lr·decay^⌊t/decay_every⌋`.
    pub fn lr_at(&self, iteration: usize) -> Real {
        self.lr * self.decay_factor.powi((iteration / self.decay_every) as i32)
    }

    pub fn lr_for(&self, param: &str, iteration: usize) -> Real {
        let base = self.lr_at(iteration);
        if param.starts_with(BACKBONE_PREFIX) {
            base * self.backbone_lr_mult
        } else if param.starts_with(ATTENTION_PREFIX) {
            base * self.attention_lr_mult
        } else {
            base
        }
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    pub lr: Real,
    pub loss: LossValues,
    pub wall_ms: u128,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub iteration: usize,
    pub velocity: BTreeMap<String, Tensor>,
    pub rng: ChaCha8Rng,
    pub history: Vec<MetricRow>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState {
            iteration: 0,
            velocity: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            history: Vec::new(),
        }
    }
}

/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v` for every named parameter.
/// Rejects non-finite gradients before touching any parameter.
pub fn sgd_step(
    params: Vec<(String, &mut Tensor)>,
    grads: &[(String, Tensor)],
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<()> {
    let by_name: BTreeMap<&str, &Tensor> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: name.clone(),
                iteration: state.iteration,
            });
        }
    }
    for (name, p) in params {
        let Some(g) = by_name.get(name.as_str()) else { continue };
        if g.shape() != p.shape() {
            return Err(Error::Runtime(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let lr = cfg.lr_for(&name, state.iteration);
        let v = state
            .velocity
            .entry(name)
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for ((vi, &gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
            *vi = cfg.momentum * *vi + (gi + cfg.weight_decay * *pi);
            *pi -= lr * *vi;
        }
    }
    state.iteration += 1;
    Ok(())
}

/// Forward, loss and gradients for one batch.
pub fn batch_gradients(
    model: &Model,
    batch: &[LabeledSample],
    loss_cfg: &LossConfig,
) -> Result<(LossValues, Vec<(String, Tensor)>)> {
    let tape = Tape::new();
    let binder = Binder::new(&tape, true);
    let x = tape.constant(stack_images(batch)?);
    let out = model.forward(&binder, x)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let targets = match (&out.attention, loss_cfg.keypoint_supervision) {
        (Some(stack), true) => {
            let fs = model.config.feature_size();
            Some(keypoint_targets(batch, stack.k, (fs, fs))?)
        }
        _ => None,
    };
    let terms = total_loss(out.logits, &labels, out.attention.as_ref(), targets.as_ref(), loss_cfg)?;
    tape.backward(terms.total)?;
    Ok((terms.values(), binder.grads()))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut buf = String::with_capacity(64 * (rows.len() + 1));
    buf.push_str(METRICS_HEADER);
    buf.push('\n');
    for r in rows {
        buf.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration, r.lr, r.loss.ce, r.loss.attn, r.loss.reg, r.loss.total, r.wall_ms
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub iterations: usize,
    pub history: Vec<MetricRow>,
}

impl TrainSummary {
    /// Mean of `f` over the first `n` logged iterations.
    pub fn head_mean(&self, n: usize, f: impl Fn(&LossValues) -> Real) -> Real {
        let rows = &self.history[..n.min(self.history.len())];
        rows.iter().map(|r| f(&r.loss)).sum::<Real>() / rows.len().max(1) as Real
    }

    pub fn tail_mean(&self, n: usize, f: impl Fn(&LossValues) -> Real) -> Real {
        let start = self.history.len().saturating_sub(n);
        let rows = &self.history[start..];
        rows.iter().map(|r| f(&r.loss)).sum::<Real>() / rows.len().max(1) as Real
    }
}

/// Trains `model` in place for `cfg.epochs` epochs over `train`.
///
/// With `out_dir`, writes `metrics.csv` and `checkpoint/` at the end, and
/// `checkpoint-epoch-<e>/` every `cfg.checkpoint_every` epochs.
pub fn train(model: &mut Model, train: &[LabeledSample], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut state = TrainState::new(cfg.seed);
    let start = Instant::now();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<LabeledSample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&train[i], &mut state.rng)
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            let (loss, grads) = batch_gradients(model, &batch, &cfg.loss)?;
            let row = MetricRow {
                iteration: state.iteration,
                lr: cfg.lr_at(state.iteration),
                loss,
                wall_ms: 0,
            };
            sgd_step(model.params_mut(), &grads, &mut state, cfg)?;
            let wall_ms = if cfg.log_wall_time { start.elapsed().as_millis() } else { 0 };
            state.history.push(MetricRow { wall_ms, ..row });
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
                model.save(&dir.join(format!("{CHECKPOINT_DIR}-epoch-{:04}", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        write_metrics_csv(&dir.join(METRICS_FILE), &state.history)?;
        model.save(&dir.join(CHECKPOINT_DIR))?;
    }
    Ok(TrainSummary {
        iterations: state.iteration,
        history: state.history,
    })
}
