//! Backbone, attention head, pooling and linear classifier assembled into one
//! classifier, plus checkpoint I/O.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionHead, AttentionStack};
use crate::linalg::DEFAULT_NS_ITERS;
use crate::nn::{Binder, Conv2dLayer, ConvSpec, LinearLayer};
use crate::pooling::{avg_pool, avg_pr_pool, cov_pool, expand, ChannelReduction, PoolMode};
use crate::tensor::{read_tensor_file, write_tensor_file, Real, Tape, Tensor, Var};
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const TENSOR_EXT: &str = "ptns";
pub const INPUT_CHANNELS: usize = 3;
/// Pixels in `[0,1]` are shifted and scaled by these before the first conv.
pub const INPUT_MEAN: Real = 0.5;
pub const INPUT_STD: Real = 0.25;

/// Parameters whose names start with this prefix belong to the backbone.
pub const BACKBONE_PREFIX: &str = "backbone.";
/// Parameters of the attention head start with this prefix.
pub const ATTENTION_PREFIX: &str = "attention.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    /// Output width of each backbone block; every block halves the resolution.
    pub channels: Vec<usize>,
    pub pool: PoolMode,
    /// Keypoint-supervised maps.
    pub k: usize,
    /// Complementary maps.
    pub q: usize,
    /// Channel width after the 1×1 reduction in covariance modes.
    pub d_reduced: usize,
    pub num_classes: usize,
    pub ns_iters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            channels: vec![16, 32, 64, 128],
            pool: PoolMode::AvgPr,
            k: 3,
            q: 1,
            d_reduced: 64,
            num_classes: 8,
            ns_iters: DEFAULT_NS_ITERS,
        }
    }
}

impl ModelConfig {
    /// Three narrow blocks (8×8×32 features at 64×64 input) for quick runs.
    pub fn compact(pool: PoolMode, num_classes: usize) -> Self {
        ModelConfig {
            channels: vec![8, 16, 32],
            pool,
            d_reduced: 16,
            num_classes,
            ..ModelConfig::default()
        }
    }

    pub fn feature_size(&self) -> usize {
        self.input_size >> self.channels.len()
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&INPUT_CHANNELS)
    }

    pub fn m(&self) -> usize {
        self.k + self.q
    }

    pub fn pooled_dim(&self) -> usize {
        self.pool.pooled_dim(self.feature_dim(), self.m(), self.d_reduced)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("backbone widths must be positive, got {:?}", self.channels));
        }
        let stride = 1usize.checked_shl(self.channels.len() as u32).unwrap_or(0);
        if stride == 0 || self.input_size == 0 || self.input_size % stride != 0 {
            return bad(format!(
                "input size {} is not divisible by the backbone stride {stride}",
                self.input_size
            ));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.pool.uses_attention() && (self.k == 0 || self.q == 0) {
            return bad(format!("{} needs K ≥ 1 and Q ≥ 1", self.pool));
        }
        if self.pool.uses_reduction() {
            if self.d_reduced == 0 || self.d_reduced > self.feature_dim() {
                return bad(format!(
                    "reduced width {} must be in 1..={}",
                    self.d_reduced,
                    self.feature_dim()
                ));
            }
            let fs = self.feature_size();
            if fs * fs < 2 {
                return bad("covariance pooling needs at least 2 feature positions".into());
            }
            if self.ns_iters == 0 {
                return bad("Newton–Schulz needs at least one iteration".into());
            }
        }
        Ok(())
    }
}

/// Everything one forward pass produces.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput<'t> {
    pub logits: Var<'t>,
    pub attention: Option<AttentionStack<'t>>,
    pub features: Var<'t>,
    pub pooled: Var<'t>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Vec<Conv2dLayer>,
    pub attention: Option<AttentionHead>,
    pub reduction: Option<ChannelReduction>,
    pub classifier: LinearLayer,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Vec::with_capacity(config.channels.len());
        let mut cin = INPUT_CHANNELS;
        for &cout in &config.channels {
            backbone.push(Conv2dLayer::init(ConvSpec::same(3, cin, cout), &mut rng)?);
            cin = cout;
        }
        let d = config.feature_dim();
        let attention = if config.pool.uses_attention() {
            Some(AttentionHead::init(d, config.k, config.q, &mut rng)?)
        } else {
            None
        };
        let reduction = if config.pool.uses_reduction() {
            Some(ChannelReduction::init(d, config.d_reduced, &mut rng)?)
        } else {
            None
        };
        let classifier = LinearLayer::init(config.pooled_dim(), config.num_classes, &mut rng);
        Ok(Model {
            config,
            backbone,
            attention,
            reduction,
            classifier,
        })
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.iter().enumerate() {
            layer.params(&format!("{BACKBONE_PREFIX}{i}"), &mut out);
        }
        if let Some(head) = &self.attention {
            head.params("attention", &mut out);
        }
        if let Some(red) = &self.reduction {
            red.params("reduction", &mut out);
        }
        self.classifier.params("classifier", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.iter_mut().enumerate() {
            layer.params_mut(&format!("{BACKBONE_PREFIX}{i}"), &mut out);
        }
        if let Some(head) = &mut self.attention {
            head.params_mut("attention", &mut out);
        }
        if let Some(red) = &mut self.reduction {
            red.params_mut("reduction", &mut out);
        }
        self.classifier.params_mut("classifier", &mut out);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != INPUT_CHANNELS {
            return Err(Error::Data(format!(
                "expected input [N,{s},{s},{INPUT_CHANNELS}], got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Runs the network on `x: [N,S,S,3]`. Parameters are bound through
    /// `binder`, as leaves when it is trainable.
    pub fn forward<'t>(&self, binder: &Binder<'t>, x: Var<'t>) -> Result<ModelOutput<'t>> {
        self.check_input(&x.shape())?;
        let mut h = x.add_scalar(-INPUT_MEAN).scale(1.0 / INPUT_STD);
        for (i, layer) in self.backbone.iter().enumerate() {
            h = layer
                .forward(binder, &format!("{BACKBONE_PREFIX}{i}"), h)?
                .relu()
                .maxpool2d(2, 2, 0)?;
        }
        let features = h;
        let attention = match &self.attention {
            Some(head) => Some(head.forward(binder, "attention", features)?),
            None => None,
        };
        let iters = self.config.ns_iters;
        let pooled = match (self.config.pool, attention, &self.reduction) {
            (PoolMode::Avg, _, _) => avg_pool(features)?,
            (PoolMode::AvgPr, Some(st), _) => avg_pr_pool(expand(features, st.maps)?)?,
            (PoolMode::Cov, _, Some(red)) => cov_pool(red.forward(binder, "reduction", features)?, iters)?,
            (PoolMode::CovPr, Some(st), Some(red)) => {
                let fp = expand(features, st.maps)?;
                cov_pool(red.forward(binder, "reduction", fp)?, iters)?
            }
            (mode, _, _) => {
                return Err(Error::Config(format!("model is missing components for {mode} pooling")))
            }
        };
        let logits = self.classifier.forward(binder, "classifier", pooled)?;
        Ok(ModelOutput {
            logits,
            attention,
            features,
            pooled,
        })
    }

    /// Softmax probabilities `[N,C]` and, when present, attention maps
    /// `[N,H,W,M]`, without recording gradients.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let tape = Tape::new();
        let binder = Binder::new(&tape, false);
        let out = self.forward(&binder, tape.constant(x.clone()))?;
        let probs = (*out.logits.softmax().value()).clone();
        Ok((probs, out.attention.map(|s| (*s.maps.value()).clone())))
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.infer(x)?.0)
    }

    /// Writes `config.json` and one `<name>.ptns` per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = serde_json::to_string_pretty(&self.config)?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, cfg + "\n").map_err(|e| Error::io(&path, e))?;
        for (name, t) in self.params() {
            write_tensor_file(&dir.join(format!("{name}.{TENSOR_EXT}")), t)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        let mut model = Model::init(config, 0)?;
        for (name, slot) in model.params_mut() {
            let t = read_tensor_file(&dir.join(format!("{name}.{TENSOR_EXT}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    /// Parameter tensors keyed by name, for comparisons.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        self.params().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }
}
