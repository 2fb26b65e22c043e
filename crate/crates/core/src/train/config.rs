//! The flat JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::model::{default_mlp_hidden, ModelConfig, Variant};
use crate::tensor::DType;
use crate::thinking::{CapacitySchedule, Normalization, Reweighting, RoutingPolicy, Selection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    LinearWarmup,
}

/// Training, model and routing settings in one snake_case document.
/// Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seq_len: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_batches: usize,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    /// Stop once the training loss falls below this value.
    pub target_loss: Option<f64>,
    pub dtype: DType,
    /// Adds `wall_ms` to metrics, which makes them differ between runs.
    pub log_wall_time: bool,

    pub preset: Option<String>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Defaults to `8d/3` rounded up to a multiple of 16.
    pub mlp_hidden: Option<usize>,
    pub vocab_size: usize,
    /// Defaults to `seq_len`.
    pub max_seq_len: Option<usize>,
    pub variant: Variant,
    pub thinking_steps: usize,
    pub itt_interval: usize,
    pub rope_base: f64,

    pub normalization: Normalization,
    pub selection: Selection,
    /// One per extra step; defaults to 0.7 each.
    pub capacities: Option<Vec<f64>>,
    pub top_p: f64,
    pub reweighting: Reweighting,
    pub alpha: Vec<f64>,
    pub capacity_schedule: ScheduleKind,
    pub capacity_start: f64,
    pub capacity_warmup_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seq_len: 128,
            batch_size: 16,
            steps: 2000,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            warmup_steps: 100,
            seed: 0,
            eval_every: 100,
            eval_batches: 8,
            train_data: None,
            eval_data: None,
            target_loss: None,
            dtype: DType::F32,
            log_wall_time: false,
            preset: None,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            mlp_hidden: None,
            vocab_size: 256,
            max_seq_len: None,
            variant: Variant::Itt,
            thinking_steps: 2,
            itt_interval: 2,
            rope_base: 10_000.0,
            normalization: Normalization::Sigmoid,
            selection: Selection::CapacityPercentile,
            capacities: None,
            top_p: 0.5,
            reweighting: Reweighting::OnlySelect,
            alpha: Vec::new(),
            capacity_schedule: ScheduleKind::Constant,
            capacity_start: 0.1,
            capacity_warmup_steps: 1000,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }

    pub fn routing(&self) -> RoutingPolicy {
        let extra = self.thinking_steps.saturating_sub(1);
        let capacities = match (&self.capacities, self.variant) {
            (_, Variant::Vanilla | Variant::Loop) => Vec::new(),
            (Some(c), _) => c.clone(),
            (None, _) => vec![0.7; extra],
        };
        RoutingPolicy {
            normalization: self.normalization,
            selection: self.selection,
            capacities,
            top_p: self.top_p,
            reweighting: self.reweighting,
            alpha: self.alpha.clone(),
            schedule: match self.capacity_schedule {
                ScheduleKind::Constant => CapacitySchedule::Constant,
                ScheduleKind::LinearWarmup => CapacitySchedule::LinearWarmup {
                    start: self.capacity_start,
                    warmup_steps: self.capacity_warmup_steps,
                },
            },
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let base = ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            mlp_hidden: self.mlp_hidden.unwrap_or_else(|| default_mlp_hidden(self.d_model)),
            vocab_size: self.vocab_size,
            max_seq_len: self.max_seq_len.unwrap_or(self.seq_len),
            variant: self.variant,
            thinking_steps: self.thinking_steps,
            itt_interval: self.itt_interval,
            rope_base: self.rope_base,
            routing: self.routing(),
        };
        let cfg = match &self.preset {
            Some(name) => ModelConfig::preset(name, &base)?,
            None => base,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.seq_len == 0 || self.batch_size == 0 || self.eval_every == 0 || self.eval_batches == 0 {
            return fail("seq_len, batch_size, eval_every and eval_batches must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return fail("adam_eps must be positive; weight_decay and grad_clip non-negative");
        }
        if self.vocab_size != 256 {
            return fail("byte-level data needs vocab_size 256");
        }
        if self.max_seq_len.is_some_and(|m| m < self.seq_len) {
            return fail("max_seq_len is shorter than seq_len");
        }
        if self.target_loss.is_some_and(|t| !t.is_finite()) {
            return fail("target_loss must be finite");
        }
        self.model()?;
        Ok(())
    }
}
