//! Seeded train-then-evaluate trials on an in-memory synthetic dataset.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::LossConfig;
use crate::data::{generate_samples, GenConfig, LabeledSample, Split};
use crate::eval::{evaluate, EvalOptions};
use crate::model::{Model, ModelConfig};
use crate::pooling::PoolMode;
use crate::train::{train, TrainConfig};
use crate::{Real, Result};

/// Decoded splits of one generated dataset.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub config: GenConfig,
    pub splits: BTreeMap<Split, Vec<LabeledSample>>,
}

impl SplitData {
    pub fn generate(cfg: &GenConfig) -> Result<Self> {
        let mut splits: BTreeMap<Split, Vec<LabeledSample>> = BTreeMap::new();
        for g in generate_samples(cfg)? {
            splits.entry(g.record.split).or_default().push(g.to_labeled());
        }
        Ok(SplitData {
            config: cfg.clone(),
            splits,
        })
    }

    pub fn get(&self, split: Split) -> &[LabeledSample] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Settings of the pooling comparison on the default biased dataset: every
/// mode gets the compact model and the same training budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub data: GenConfig,
    pub seeds: u64,
    /// Training settings shared by every trial; the seed is set per trial.
    pub train_base: TrainConfig,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            data: GenConfig::default(),
            seeds: 5,
            train_base: TrainConfig {
                epochs: COMPARISON_EPOCHS,
                loss: LossConfig {
                    attention_weight: COMPARISON_ATTENTION_WEIGHT,
                    ..LossConfig::default()
                },
                ..TrainConfig::default()
            },
        }
    }
}

pub const COMPARISON_EPOCHS: usize = 50;
/// The compact backbone is trained from scratch, so the keypoint term is
/// weighted up to let it shape the features before the texture shortcut is
/// learned.
pub const COMPARISON_ATTENTION_WEIGHT: Real = 5.0;

impl ComparisonConfig {
    pub fn model(&self, mode: PoolMode) -> ModelConfig {
        ModelConfig::compact(mode, self.data.classes)
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train_base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub label: String,
    pub seed: u64,
    pub cis: f64,
    pub trans: f64,
    pub cis_mean_per_class: f64,
    pub trans_mean_per_class: f64,
    pub final_ce: f64,
    pub final_attn: f64,
    pub seconds: f64,
}

/// Trains a fresh model seeded with `train_cfg.seed` and scores it on the
/// test splits.
pub fn run_trial(label: &str, data: &SplitData, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrialResult> {
    Ok(run_trial_with_model(label, data, model_cfg, train_cfg)?.0)
}

/// [`run_trial`], also returning the trained model.
pub fn run_trial_with_model(
    label: &str,
    data: &SplitData,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(TrialResult, Model)> {
    let start = Instant::now();
    let mut model = Model::init(model_cfg.clone(), train_cfg.seed)?;
    let summary = train(&mut model, data.get(Split::Train), train_cfg, None)?;
    let opts = EvalOptions::default();
    let cis = evaluate(&model, data.get(Split::TestCis), "test_cis", &opts)?;
    let trans = evaluate(&model, data.get(Split::TestTrans), "test_trans", &opts)?;
    let result = TrialResult {
        label: label.to_string(),
        seed: train_cfg.seed,
        cis: cis.top1,
        trans: trans.top1,
        cis_mean_per_class: cis.mean_per_class,
        trans_mean_per_class: trans.mean_per_class,
        final_ce: summary.tail_mean(10, |l| l.ce) as f64,
        final_attn: summary.tail_mean(10, |l| l.attn) as f64,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((result, model))
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Applies the keys of a JSON object on top of `base`. Nested objects merge
/// recursively; any other value replaces the field.
pub fn with_overrides<T>(base: &T, overrides: &serde_json::Value) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    fn merge(dst: &mut serde_json::Value, src: &serde_json::Value) {
        match (dst, src) {
            (serde_json::Value::Object(d), serde_json::Value::Object(s)) => {
                for (k, v) in s {
                    merge(d.entry(k.clone()).or_insert(serde_json::Value::Null), v);
                }
            }
            (_, serde_json::Value::Null) => {}
            (d, s) => *d = s.clone(),
        }
    }
    let mut value = serde_json::to_value(base)?;
    merge(&mut value, overrides);
    Ok(serde_json::from_value(value)?)
}
