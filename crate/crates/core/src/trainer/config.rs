use serde::{Deserialize, Serialize};

use crate::error::{GmopeError, Result};
use crate::experts::{Activation, EncoderConfig, Pooling};
use crate::graph::SplitRatios;
use crate::router::{RouterMode, ScoreDirection};

/// Architecture as written in a configuration file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of experts `M`; one per dataset when unset.
    pub experts: Option<usize>,
    /// Prompt width `d_p`; derived from `d0` when unset.
    pub prompt_dim: Option<usize>,
    pub layers: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub bias: bool,
    pub self_loops: bool,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            experts: None,
            prompt_dim: None,
            layers: 3,
            hidden_dim: 64,
            output_dim: 64,
            activation: Activation::Relu,
            bias: true,
            self_loops: true,
            pooling: Pooling::Mean,
        }
    }
}

impl ModelConfig {
    /// Fix the architecture for aligned width `aligned_dim` and a group of
    /// `datasets` datasets.
    pub fn resolve(&self, aligned_dim: usize, datasets: usize) -> Result<ModelSpec> {
        let experts = self.experts.unwrap_or(datasets);
        let prompt_dim = self.prompt_dim.unwrap_or_else(|| default_prompt_dim(aligned_dim));
        if experts == 0 || prompt_dim == 0 || aligned_dim == 0 {
            return Err(GmopeError::Config(
                "model.experts, model.prompt_dim and alignment.dim must be positive".into(),
            ));
        }
        let encoder = EncoderConfig {
            layers: self.layers,
            input_dim: aligned_dim + prompt_dim,
            hidden_dim: self.hidden_dim,
            output_dim: self.output_dim,
            bias: self.bias,
            activation: self.activation,
            self_loops: self.self_loops,
        };
        encoder
            .validate()
            .map_err(|e| GmopeError::Config(format!("model: {e}")))?;
        Ok(ModelSpec {
            experts,
            prompt_dim,
            aligned_dim,
            encoder,
            pooling: self.pooling,
        })
    }
}

/// `round(d0 / 3)`, kept within `[d0 / 4, d0 / 2]` and at least 1.
pub fn default_prompt_dim(aligned_dim: usize) -> usize {
    let third = (aligned_dim as f64 / 3.0).round() as usize;
    third.clamp(aligned_dim.div_ceil(4), (aligned_dim / 2).max(1)).max(1)
}

/// Fully resolved architecture stored with every model state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub experts: usize,
    pub prompt_dim: usize,
    pub aligned_dim: usize,
    pub encoder: EncoderConfig,
    pub pooling: Pooling,
}

impl ModelSpec {
    pub fn check_compatible(&self, requested: &ModelSpec) -> Result<()> {
        let mismatch = |what: &str, have: usize, want: usize| {
            GmopeError::Manifest(format!("checkpoint has {what} = {have} but the configuration asks for {want}"))
        };
        if self.experts != requested.experts {
            return Err(mismatch("M", self.experts, requested.experts));
        }
        if self.prompt_dim != requested.prompt_dim {
            return Err(mismatch("d_p", self.prompt_dim, requested.prompt_dim));
        }
        if self.aligned_dim != requested.aligned_dim {
            return Err(mismatch("d0", self.aligned_dim, requested.aligned_dim));
        }
        if self.encoder != requested.encoder {
            return Err(GmopeError::Manifest("checkpoint encoder architecture differs from the configuration".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub mode: RouterMode,
    /// Active experts per batch; all `M` when unset.
    pub k: Option<usize>,
    pub temperature: f64,
    pub score_direction: ScoreDirection,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            mode: RouterMode::Soft,
            k: None,
            temperature: 0.8,
            score_direction: ScoreDirection::PreferLow,
        }
    }
}

impl RouterConfig {
    pub fn k_for(&self, experts: usize) -> Result<usize> {
        let k = self.k.unwrap_or(experts);
        if k == 0 || k > experts {
            return Err(GmopeError::Config(format!("router.k = {k} must lie in [1, M = {experts}]")));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(GmopeError::Config("router.temperature must be positive".into()));
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Pretraining epochs.
    pub epochs: usize,
    /// Fine-tuning episodes (one optimizer step each).
    pub episodes: usize,
    pub batch_size: usize,
    /// Weight of the prompt orthogonality loss.
    pub lambda: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Validate every this many episodes (the last episode is always validated).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            episodes: 200,
            batch_size: 256,
            lambda: 1.0,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed: 41,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(GmopeError::Config("train.lambda must be a finite non-negative number".into()));
        }
        if self.lambda == 0.0 || self.lambda >= 3.0 {
            log::warn!("train.lambda = {} lies outside the recommended range (0, 3)", self.lambda);
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(GmopeError::Config("train.batch_size and train.eval_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(GmopeError::Config("train.learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Node,
    Graph,
    Link,
}

impl TaskKind {
    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::Link => "auc",
            TaskKind::Node | TaskKind::Graph => "accuracy",
        }
    }
}

/// Downstream task and its data split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub ratios: SplitRatios,
    /// Seed of the train/val/test partition, independent of the run seed so
    /// that pretraining and every fine-tuning seed see the same held-out set.
    pub split_seed: u64,
    pub negatives_per_positive: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Node,
            ratios: SplitRatios::default(),
            split_seed: 41,
            negatives_per_positive: 1,
        }
    }
}
