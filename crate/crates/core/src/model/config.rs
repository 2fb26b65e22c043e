use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::thinking::RoutingPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Loop,
    Itt,
}

/// What a given block index does in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Loop,
    Thinking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub variant: Variant,
    /// Total applications of the block in a dynamic layer (the "×T" of ITT×T /
    /// Loop×T); inner-thinking layers have `T - 1` routed extra steps.
    pub thinking_steps: usize,
    pub itt_interval: usize,
    pub rope_base: f64,
    pub routing: RoutingPolicy,
}

/// SwiGLU width: `8d/3` rounded up to a multiple of 16.
pub fn default_mlp_hidden(d_model: usize) -> usize {
    (8 * d_model).div_ceil(3).div_ceil(16) * 16
}

impl ModelConfig {
    /// Desk-scale configuration: d=64, 4 layers, ITT×2.
    pub fn toy() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            mlp_hidden: default_mlp_hidden(64),
            vocab_size: 256,
            max_seq_len: 128,
            variant: Variant::Itt,
            thinking_steps: 2,
            itt_interval: 2,
            rope_base: 10_000.0,
            routing: RoutingPolicy::with_uniform_capacity(1, 0.7),
        }
    }

    /// Hidden sizes of the reference model family; other fields come from `base`.
    pub fn preset(name: &str, base: &ModelConfig) -> Result<Self> {
        let d_model = match name {
            "162M" => 1024,
            "230M" => 1536,
            "466M" => 2048,
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        };
        Ok(ModelConfig {
            d_model,
            n_heads: d_model / 64,
            mlp_hidden: default_mlp_hidden(d_model),
            ..base.clone()
        })
    }

    pub fn with_variant(&self, variant: Variant, thinking_steps: usize) -> Self {
        let mut cfg = self.clone();
        cfg.variant = variant;
        cfg.thinking_steps = thinking_steps;
        let extra = thinking_steps.saturating_sub(1);
        let fill = cfg.routing.capacities.first().copied().unwrap_or(0.7);
        cfg.routing.capacities.resize(extra, fill);
        if !cfg.routing.alpha.is_empty() {
            cfg.routing.alpha.resize(extra, 1.0);
        }
        cfg
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn extra_steps(&self) -> usize {
        self.thinking_steps - 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return fail("d_model, n_heads and n_layers must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return fail(format!("head_dim {} must be even for rotary", self.head_dim()));
        }
        if self.mlp_hidden == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return fail("mlp_hidden, vocab_size and max_seq_len must be positive".into());
        }
        if self.thinking_steps == 0 {
            return fail("thinking_steps must be at least 1".into());
        }
        if self.itt_interval == 0 {
            return fail("itt_interval must be at least 1".into());
        }
        if !(self.rope_base > 1.0) {
            return fail(format!("rope_base {} must exceed 1", self.rope_base));
        }
        if self.variant == Variant::Itt {
            self.routing.validate(self.extra_steps())?;
        }
        Ok(())
    }

    /// Dynamic layers sit at block indices 1, 1 + k, 1 + 2k, ... for interval k.
    pub fn layer_kind(&self, index: usize) -> LayerKind {
        let dynamic = index >= 1 && (index - 1).is_multiple_of(self.itt_interval);
        match (self.variant, dynamic) {
            (Variant::Loop, true) => LayerKind::Loop,
            (Variant::Itt, true) => LayerKind::Thinking,
            _ => LayerKind::Dense,
        }
    }

    pub fn dynamic_layers(&self) -> Vec<usize> {
        (0..self.n_layers)
            .filter(|&i| self.layer_kind(i) != LayerKind::Dense)
            .collect()
    }
}
