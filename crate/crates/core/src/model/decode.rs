//! Token-by-token decoding with per-step KV caches.
//!
//! Extra thinking steps gate each new token on its own router weight, so a
//! step's cache only ever holds the tokens that step processed. This matches a
//! full-sequence forward with [`Gating::Threshold`] exactly.

use super::{ForwardOptions, LayerCaches, Model, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::thinking::{Gating, RoutingTrace, StepCapacity};

pub struct Decoder<'m, F: Scalar> {
    model: &'m Model<F>,
    caches: LayerCaches<F>,
    opts: ForwardOptions,
    position: usize,
}

impl<'m, F: Scalar> Decoder<'m, F> {
    pub fn new(model: &'m Model<F>) -> Self {
        let extra = match model.config.variant {
            Variant::Itt => model.config.extra_steps(),
            _ => 0,
        };
        Decoder {
            model,
            caches: model.empty_caches(),
            opts: ForwardOptions {
                // Capacities are irrelevant under threshold gating but must be well-formed.
                capacities: Some(vec![StepCapacity::Active(1.0); extra]),
                gating: Gating::Threshold,
                detach_extra_steps: false,
            },
            position: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Feeds `tokens` and returns their logits `[tokens.len(), vocab]`.
    pub fn feed(&mut self, tokens: &[usize]) -> Result<(Tensor<F>, RoutingTrace)> {
        let tape = Tape::new();
        let params = self.model.bind(&tape, false);
        let out = self
            .model
            .forward_at(&params, tokens, self.position, &self.opts, Some(&mut self.caches))?;
        self.position += tokens.len();
        Ok((out.logits.value(), out.trace))
    }

    /// Greedy continuation of `prompt`, one token at a time. Returns the new
    /// tokens and the logits row that produced each of them.
    pub fn generate(&mut self, prompt: &[usize], max_new: usize) -> Result<(Vec<usize>, Vec<Tensor<F>>)> {
        let mut produced = Vec::with_capacity(max_new);
        let mut rows = Vec::with_capacity(max_new);
        if prompt.is_empty() {
            return Err(Error::Data("generation needs a non-empty prompt".into()));
        }
        if max_new == 0 {
            return Ok((produced, rows));
        }
        let mut last = Tensor::zeros(&[0]);
        for &t in prompt {
            last = last_row(&self.feed(&[t])?.0);
        }
        for i in 0..max_new {
            let next = argmax(last.data());
            produced.push(next);
            rows.push(last.clone());
            if i + 1 < max_new {
                last = last_row(&self.feed(&[next])?.0);
            }
        }
        Ok((produced, rows))
    }
}

fn last_row<F: Scalar>(logits: &Tensor<F>) -> Tensor<F> {
    let (rows, cols) = logits.dims2();
    Tensor::new(&[cols], logits.row(rows - 1).to_vec()).expect("row shape")
}

/// Index of the largest value, ties toward the smaller index.
pub fn argmax<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
