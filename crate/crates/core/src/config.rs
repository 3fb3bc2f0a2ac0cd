//! Run configuration: model knobs, loss weights, optimiser settings and data paths.
//!
//! Everything deserialises from one JSON file; every field has a default so a
//! partial file (or `{}`) is valid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, UpsampleMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// One `[N×2]` kernel from the token-mean of the final query.
    #[default]
    Pooled,
    /// Each token row of the final query maps to its own 2-vector.
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReactMode {
    /// `Linear([Q''; L])` with a `[2D → D]` weight.
    #[default]
    ConcatLinear,
    /// `Q'' + L`.
    Add,
    /// `Q'' + MHA(Q'', L, L)`.
    CrossAttn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenReduce {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AocMode {
    /// Count supervision plus an existence head on the detached count prediction.
    #[default]
    Full,
    /// No counting branch; the existence head reads the detached token-mean of the final query.
    Off,
    /// No count supervision; the existence head trains on the (attached) token-mean of the final query.
    BinaryOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_heads: usize,
    pub sdm_layers: usize,
    pub upsample_mode: UpsampleMode,
    pub kernel: KernelMode,
    pub react: ReactMode,
    pub mha_residual: bool,
    pub token_reduce: TokenReduce,
    pub max_len: usize,
    pub se_reduction: usize,
    pub activation: Activation,
    /// Learned per-level positional table added to the pooled visual features.
    pub pos_embed: bool,
    /// Single SDM on the finest level, no hierarchical aggregation.
    pub hsd_off: bool,
    pub aoc: AocMode,
    /// Token gates fixed at 1.
    pub intra_off: bool,
    /// Level gates fixed at 1.
    pub inter_off: bool,
    /// Extra mask loss on each level's own gated map.
    pub deep_supervision: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            n_heads: 4,
            sdm_layers: 3,
            upsample_mode: UpsampleMode::Bilinear,
            kernel: KernelMode::Pooled,
            react: ReactMode::ConcatLinear,
            mha_residual: true,
            token_reduce: TokenReduce::Sum,
            max_len: 20,
            se_reduction: 4,
            activation: Activation::Relu,
            pos_embed: true,
            hsd_off: false,
            aoc: AocMode::Full,
            intra_off: false,
            inter_off: false,
            deep_supervision: false,
        }
    }
}

impl ModelConfig {
    /// Largest token count a query can have (`max_len` words plus the sentence token).
    pub fn max_tokens(&self) -> usize {
        self.max_len + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::Config(format!("dim {} must be a positive multiple of n_heads {}", self.dim, self.n_heads)));
        }
        if self.sdm_layers == 0 {
            return Err(Error::Config("sdm_layers must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if self.se_reduction == 0 {
            return Err(Error::Config("se_reduction must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_mask: f64,
    pub lambda_count: f64,
    pub lambda_exist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_mask: 2.0, lambda_count: 0.1, lambda_exist: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_mask", self.lambda_mask), ("lambda_count", self.lambda_count), ("lambda_exist", self.lambda_exist)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    pub steps: usize,
    pub batch: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Cosine,
            steps: 2000,
            batch: 8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Path to `dataset.json`.
    pub path: Option<String>,
    /// Optional separate evaluation set; defaults to the training set.
    pub eval_path: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioMix {
    pub multi: f64,
    pub single: f64,
    pub none: f64,
}

impl Default for ScenarioMix {
    fn default() -> Self {
        Self { multi: 0.4, single: 0.3, none: 0.3 }
    }
}

/// Synthetic dataset generation knobs (the seed is the top-level one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_images: usize,
    pub grid_hw: (usize, usize),
    /// Number of shape categories (counting label space).
    pub n_categories: usize,
    pub n_colors: usize,
    /// Inclusive range.
    pub instances_per_image: (usize, usize),
    pub expr_per_image: usize,
    pub scenario_mix: ScenarioMix,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_images: 32,
            grid_hw: (32, 32),
            n_categories: 4,
            n_colors: 3,
            instances_per_image: (2, 4),
            expr_per_image: 1,
            scenario_mix: ScenarioMix::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub gen: GenConfig,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            gen: GenConfig::default(),
            seed: 0,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_is_default() {
        assert_eq!(Config::from_json("{}").unwrap(), Config::default());
    }

    #[test]
    fn defaults_match_documented_values() {
        let c = Config::default();
        assert_eq!((c.loss.lambda_mask, c.loss.lambda_count, c.loss.lambda_exist), (2.0, 0.1, 1.0));
        assert_eq!(c.optim.weight_decay, 0.05);
        assert_eq!(c.model.sdm_layers, 3);
        assert_eq!(c.model.max_len, 20);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_json(r#"{"model":{"sdm_layers":0}}"#).is_err());
        assert!(Config::from_json(r#"{"optim":{"lr":0}}"#).is_err());
        assert!(Config::from_json(r#"{"loss":{"lambda_count":-1}}"#).is_err());
        assert!(Config::from_json(r#"{"model":{"dim":30,"n_heads":4}}"#).is_err());
        assert!(Config::from_json(r#"{"model":{"bogus":1}}"#).is_err());
    }
}
