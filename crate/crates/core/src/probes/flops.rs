//! Exact matmul FLOP accounting (2·m·n·k per product).
//!
//! A block over `n` tokens costs `n·(8d² + 4nd + 6dh)`: four `d×d`
//! projections, scores and value mixing over all `n` keys, and the three
//! SwiGLU matrices. An extra thinking step that selects `m` tokens is charged
//! `m/n` of that, plus `2nd` for its router.

use std::fmt;

use num_rational::Ratio;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::config::{LayerKind, ModelConfig, Variant};
use crate::thinking::{selected_count, StepCapacity};

pub fn block_flops(d_model: usize, mlp_hidden: usize, n: usize) -> u64 {
    let (d, h, n) = (d_model as u64, mlp_hidden as u64, n as u64);
    n * (8 * d * d + 4 * n * d + 6 * d * h)
}

pub fn router_flops(d_model: usize, n: usize) -> u64 {
    2 * (n as u64) * (d_model as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepFlops {
    pub step: usize,
    /// `None` for a removed step.
    pub capacity: Option<f64>,
    pub selected_tokens: usize,
    pub block: u64,
    pub router: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub kind: &'static str,
    /// Cost of one full pass of the block, `F`.
    pub base: u64,
    pub steps: Vec<StepFlops>,
}

impl LayerFlops {
    pub fn block_total(&self) -> u64 {
        self.base + self.steps.iter().map(|s| s.block).sum::<u64>()
    }

    pub fn router_total(&self) -> u64 {
        self.steps.iter().map(|s| s.router).sum()
    }

    pub fn total(&self) -> u64 {
        self.block_total() + self.router_total()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsBreakdown {
    pub variant: Variant,
    pub thinking_steps: usize,
    pub seq_len: usize,
    pub layers: Vec<LayerFlops>,
    pub head: u64,
}

impl FlopsBreakdown {
    /// Block FLOPs of all layers, routers excluded.
    pub fn blocks(&self) -> u64 {
        self.layers.iter().map(LayerFlops::block_total).sum()
    }

    pub fn routers(&self) -> u64 {
        self.layers.iter().map(LayerFlops::router_total).sum()
    }

    /// Everything: blocks, routers and the LM head.
    pub fn total(&self) -> u64 {
        self.blocks() + self.routers() + self.head
    }

    pub fn per_token(&self) -> Ratio<u64> {
        Ratio::new(self.total(), self.seq_len as u64)
    }

    /// Headline ratio of layer compute against `baseline`, routers excluded.
    pub fn layer_ratio(&self, baseline: &FlopsBreakdown) -> Ratio<u64> {
        Ratio::new(self.blocks(), baseline.blocks())
    }

    /// Ratio including routers and the LM head on both sides.
    pub fn total_ratio(&self, baseline: &FlopsBreakdown) -> Ratio<u64> {
        Ratio::new(self.total(), baseline.total())
    }
}

pub fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// FLOPs of one forward pass over `seq_len` tokens.
///
/// `capacities` holds one entry per extra step (`s1..s{T-1}`); the base pass
/// always runs at full capacity. Loop and vanilla models ignore it.
pub fn count_flops(cfg: &ModelConfig, capacities: &[StepCapacity], seq_len: usize) -> Result<FlopsBreakdown> {
    cfg.validate()?;
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be positive".into()));
    }
    if cfg.variant == Variant::Itt {
        if capacities.len() != cfg.extra_steps() {
            return Err(Error::Override(format!(
                "{} capacities given for {} extra steps",
                capacities.len(),
                cfg.extra_steps()
            )));
        }
        for c in capacities {
            if let StepCapacity::Active(v) = *c {
                if !(v > 0.0 && v <= 1.0) {
                    return Err(Error::Override(format!("capacity {v} outside (0, 1]")));
                }
            }
        }
    }
    let base = block_flops(cfg.d_model, cfg.mlp_hidden, seq_len);
    let per_token = base / seq_len as u64;
    let layers = (0..cfg.n_layers)
        .map(|layer| {
            let kind = cfg.layer_kind(layer);
            let steps = match kind {
                LayerKind::Dense => Vec::new(),
                LayerKind::Loop => (1..cfg.thinking_steps)
                    .map(|step| StepFlops {
                        step,
                        capacity: Some(1.0),
                        selected_tokens: seq_len,
                        block: base,
                        router: 0,
                    })
                    .collect(),
                LayerKind::Thinking => capacities
                    .iter()
                    .enumerate()
                    .map(|(i, c)| match *c {
                        StepCapacity::Active(c) => {
                            let m = selected_count(c, seq_len);
                            StepFlops {
                                step: i + 1,
                                capacity: Some(c),
                                selected_tokens: m,
                                block: m as u64 * per_token,
                                router: router_flops(cfg.d_model, seq_len),
                            }
                        }
                        StepCapacity::Removed => StepFlops {
                            step: i + 1,
                            capacity: None,
                            selected_tokens: 0,
                            block: 0,
                            router: 0,
                        },
                    })
                    .collect(),
            };
            LayerFlops {
                layer,
                kind: match kind {
                    LayerKind::Dense => "dense",
                    LayerKind::Loop => "loop",
                    LayerKind::Thinking => "itt",
                },
                base,
                steps,
            }
        })
        .collect();
    Ok(FlopsBreakdown {
        variant: cfg.variant,
        thinking_steps: cfg.thinking_steps,
        seq_len,
        layers,
        head: 2 * seq_len as u64 * cfg.d_model as u64 * cfg.vocab_size as u64,
    })
}

/// Breakdown for `cfg` plus the Loop model with the same step count.
pub fn compare_with_loop(
    cfg: &ModelConfig,
    capacities: &[StepCapacity],
    seq_len: usize,
) -> Result<(FlopsBreakdown, FlopsBreakdown)> {
    let model = count_flops(cfg, capacities, seq_len)?;
    let baseline = count_flops(&cfg.with_variant(Variant::Loop, cfg.thinking_steps), &[], seq_len)?;
    Ok((model, baseline))
}

impl fmt::Display for FlopsBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:?} x{} over {} tokens",
            self.variant, self.thinking_steps, self.seq_len
        )?;
        writeln!(f, "layer  kind   base            steps(block)    routers")?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<6} {:<6} {:<15} {:<15} {}",
                l.layer,
                l.kind,
                l.base,
                l.block_total() - l.base,
                l.router_total()
            )?;
        }
        writeln!(f, "blocks  {}", self.blocks())?;
        writeln!(f, "routers {}", self.routers())?;
        writeln!(f, "head    {}", self.head)?;
        write!(f, "total   {}", self.total())
    }
}
