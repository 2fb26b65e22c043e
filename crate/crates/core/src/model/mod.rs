//! Decoder-only byte-level language model with vanilla, loop and
//! inner-thinking layers.

pub mod block;
pub mod config;
pub mod decode;
pub mod params;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use block::{attention_forward, block_forward, loop_layer_forward, mlp_forward, AttentionSpec, KvCache};
pub use config::{default_mlp_hidden, LayerKind, ModelConfig, Variant};
pub use decode::Decoder;
pub use params::{expected_shapes, BlockParams, ModelParams};

use crate::error::{Error, Result};
use crate::tensor::{RotaryTable, Scalar, Tape, Tensor, Var};
use crate::thinking::{itt_layer_forward, Gating, RoutingTrace, StepCapacity, ThinkingContext};

/// Per-call knobs of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOptions {
    /// Capacities of the extra steps; `None` uses the configured ones.
    pub capacities: Option<Vec<StepCapacity>>,
    pub gating: Gating,
    pub detach_extra_steps: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            capacities: None,
            gating: Gating::Policy,
            detach_extra_steps: false,
        }
    }
}

impl ForwardOptions {
    pub fn with_capacities(capacities: Vec<StepCapacity>) -> Self {
        ForwardOptions {
            capacities: Some(capacities),
            ..Default::default()
        }
    }

    pub fn threshold() -> Self {
        ForwardOptions {
            gating: Gating::Threshold,
            ..Default::default()
        }
    }
}

pub struct ForwardOutput<'t, F> {
    /// `[n, vocab]`
    pub logits: Var<'t, F>,
    pub trace: RoutingTrace,
}

/// One KV cache per block application: per layer, one for each step it runs.
pub type LayerCaches<F> = Vec<Vec<KvCache<F>>>;

#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<F>>,
    spec: AttentionSpec<F>,
}

impl<F: Scalar> Model<F> {
    /// Freshly initialized model from a ChaCha8 stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &mut rng)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        let rotary = RotaryTable::new(config.head_dim(), config.max_seq_len, config.rope_base);
        let spec = AttentionSpec {
            n_heads: config.n_heads,
            rotary: Arc::new(rotary),
        };
        Ok(Model { config, params, spec })
    }

    pub fn spec(&self) -> &AttentionSpec<F> {
        &self.spec
    }

    /// Places every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<F>, requires_grad: bool) -> ModelParams<Var<'t, F>> {
        self.params.map(|_, t| tape.leaf(t.clone(), requires_grad))
    }

    /// Empty caches laid out for incremental decoding.
    pub fn empty_caches(&self) -> LayerCaches<F> {
        (0..self.config.n_layers)
            .map(|i| {
                let steps = match self.config.layer_kind(i) {
                    LayerKind::Dense => 1,
                    LayerKind::Loop | LayerKind::Thinking => self.config.thinking_steps,
                };
                vec![KvCache::default(); steps]
            })
            .collect()
    }

    fn resolve_capacities(&self, opts: &ForwardOptions) -> Result<Vec<StepCapacity>> {
        if self.config.variant != Variant::Itt {
            return Ok(Vec::new());
        }
        let caps = match &opts.capacities {
            Some(c) => c.clone(),
            None => self.config.routing.active_capacities(),
        };
        if caps.len() != self.config.extra_steps() {
            return Err(Error::Override(format!(
                "{} capacities for {} extra steps",
                caps.len(),
                self.config.extra_steps()
            )));
        }
        if let Some(StepCapacity::Active(c)) = caps
            .iter()
            .find(|c| matches!(c, StepCapacity::Active(v) if !(*v > 0.0 && *v <= 1.0)))
        {
            return Err(Error::Override(format!("capacity {c} outside (0, 1]")));
        }
        Ok(caps)
    }

    /// Forward pass over `tokens` at positions `start..start + n`.
    ///
    /// With `caches`, every block application attends to the keys it cached
    /// on earlier calls and appends its own.
    pub fn forward_at<'t>(
        &self,
        params: &ModelParams<Var<'t, F>>,
        tokens: &[usize],
        start: usize,
        opts: &ForwardOptions,
        mut caches: Option<&mut LayerCaches<F>>,
    ) -> Result<ForwardOutput<'t, F>> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: cfg.vocab_size,
            });
        }
        let end = start + tokens.len();
        if end > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                position: end - 1,
                max: cfg.max_seq_len,
            });
        }
        let capacities = self.resolve_capacities(opts)?;
        let positions: Vec<usize> = (start..end).collect();
        let mut x = params.embed.embedding(tokens)?;
        let mut trace = RoutingTrace::default();
        for (i, block) in params.blocks.iter().enumerate() {
            let layer_caches = caches.as_deref_mut().map(|c| c[i].as_mut_slice());
            x = match cfg.layer_kind(i) {
                LayerKind::Dense => {
                    block_forward(&x, &positions, block, &self.spec, layer_caches.map(|c| &mut c[0]))?
                }
                LayerKind::Loop => {
                    loop_layer_forward(&x, &positions, block, &self.spec, cfg.thinking_steps, layer_caches)?
                }
                LayerKind::Thinking => {
                    let thinking = params.thinking[i]
                        .as_ref()
                        .ok_or_else(|| Error::Config(format!("layer {i} lacks thinking parameters")))?;
                    let ctx = ThinkingContext {
                        layer: i,
                        spec: &self.spec,
                        policy: &cfg.routing,
                        capacities: &capacities,
                        gating: opts.gating,
                        positions: &positions,
                        detach_extra_steps: opts.detach_extra_steps,
                    };
                    let (y, layer_trace) = itt_layer_forward(&x, block, thinking, &ctx, layer_caches)?;
                    trace.layers.push(layer_trace);
                    y
                }
            };
        }
        let h = x.rms_norm(&params.final_norm)?;
        let logits = h.matmul(&params.head_weight)?.add_row(&params.head_bias)?;
        Ok(ForwardOutput { logits, trace })
    }

    pub fn forward<'t>(
        &self,
        params: &ModelParams<Var<'t, F>>,
        tokens: &[usize],
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput<'t, F>> {
        self.forward_at(params, tokens, 0, opts, None)
    }

    /// Logits `[n, vocab]` and routing trace, without recording gradients.
    pub fn logits(&self, tokens: &[usize], opts: &ForwardOptions) -> Result<(Tensor<F>, RoutingTrace)> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let out = self.forward(&params, tokens, opts)?;
        Ok((out.logits.value(), out.trace))
    }

    /// Mean next-token cross-entropy over `(input, target)` sequences and its
    /// gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        batch: &[(Vec<usize>, Vec<usize>)],
        opts: &ForwardOptions,
    ) -> Result<(f64, ModelParams<Tensor<F>>)> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let tape = Tape::new();
        let params = self.bind(&tape, true);
        let mut total: Option<Var<'_, F>> = None;
        for (input, target) in batch {
            let out = self.forward(&params, input, opts)?;
            let loss = out.logits.cross_entropy(target)?;
            total = Some(match total {
                None => loss,
                Some(t) => t.add(&loss)?,
            });
        }
        let loss = total
            .expect("non-empty batch")
            .scale(F::one() / F::of(batch.len() as f64))?;
        tape.backward(loss)?;
        let grads = params.map(|_, v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())));
        Ok((loss.value().item().to_f64().unwrap_or(f64::NAN), grads))
    }

    pub fn cast<G: Scalar>(&self) -> Result<Model<G>> {
        Model::from_params(self.config.clone(), self.params.cast())
    }

    /// The same weights evaluated as a plain stack of blocks.
    pub fn as_vanilla(&self) -> Result<Model<F>> {
        let mut config = self.config.with_variant(Variant::Vanilla, 1);
        config.routing.capacities.clear();
        let mut params = self.params.clone();
        params.thinking.iter_mut().for_each(|t| *t = None);
        Model::from_params(config, params)
    }
}
