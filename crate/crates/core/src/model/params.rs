use rand::Rng;

use super::config::{LayerKind, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::thinking::{RouterParams, ThinkingParams};

const INIT_STD: f64 = 0.02;

/// Weights of one pre-norm transformer block. Matrices are `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub attn_norm: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub mlp_norm: T,
    pub w_gate: T,
    pub w_up: T,
    pub w_down: T,
}

/// All learnable tensors of a model, generic over storage so the same layout
/// holds values, tape handles and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub embed: T,
    pub blocks: Vec<BlockParams<T>>,
    /// One entry per block; `Some` only for inner-thinking layers.
    pub thinking: Vec<Option<ThinkingParams<T>>>,
    pub final_norm: T,
    pub head_weight: T,
    pub head_bias: T,
}

impl<T> BlockParams<T> {
    fn try_map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U>) -> Result<BlockParams<U>> {
        let mut g = |name: &str, t: &T| f(&format!("{prefix}.{name}"), t);
        Ok(BlockParams {
            attn_norm: g("attn_norm", &self.attn_norm)?,
            wq: g("wq", &self.wq)?,
            wk: g("wk", &self.wk)?,
            wv: g("wv", &self.wv)?,
            wo: g("wo", &self.wo)?,
            mlp_norm: g("mlp_norm", &self.mlp_norm)?,
            w_gate: g("w_gate", &self.w_gate)?,
            w_up: g("w_up", &self.w_up)?,
            w_down: g("w_down", &self.w_down)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> BlockParams<U> {
        self.try_map("", &mut |_, t| Ok(f(t)))
            .expect("infallible map")
    }

    pub fn attention(&self) -> [&T; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }
}

impl<T> ModelParams<T> {
    /// Maps every tensor in canonical order, passing its dotted name.
    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<ModelParams<U>> {
        let embed = f("embed", &self.embed)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut thinking = Vec::with_capacity(self.thinking.len());
        for (i, (block, think)) in self.blocks.iter().zip(&self.thinking).enumerate() {
            blocks.push(block.try_map(&format!("layers.{i}"), &mut f)?);
            thinking.push(match think {
                None => None,
                Some(tp) => {
                    let mut step_encodings = Vec::with_capacity(tp.step_encodings.len());
                    for (t, phi) in tp.step_encodings.iter().enumerate() {
                        step_encodings.push(f(&format!("layers.{i}.thinking.phi.{t}"), phi)?);
                    }
                    let mut routers = Vec::with_capacity(tp.routers.len());
                    for (t, r) in tp.routers.iter().enumerate() {
                        let step = t + 1;
                        routers.push(RouterParams {
                            weight: f(&format!("layers.{i}.thinking.router.{step}.weight"), &r.weight)?,
                            bias: f(&format!("layers.{i}.thinking.router.{step}.bias"), &r.bias)?,
                        });
                    }
                    Some(ThinkingParams {
                        step_encodings,
                        routers,
                    })
                }
            });
        }
        Ok(ModelParams {
            embed,
            blocks,
            thinking,
            final_norm: f("final_norm", &self.final_norm)?,
            head_weight: f("head.weight", &self.head_weight)?,
            head_bias: f("head.bias", &self.head_bias)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        self.try_map(|name, t| Ok(f(name, t))).expect("infallible map")
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &T)) {
        self.map(|name, t| f(name, t));
    }

    /// Tensors in canonical order.
    pub fn flatten(&self) -> Vec<(String, &T)> {
        let mut names = Vec::new();
        self.for_each(|name, _| names.push(name.to_string()));
        let mut refs = Vec::with_capacity(names.len());
        self.collect_refs(&mut refs);
        names.into_iter().zip(refs).collect()
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a T>) {
        out.push(&self.embed);
        for (block, think) in self.blocks.iter().zip(&self.thinking) {
            let b = block;
            out.extend([
                &b.attn_norm, &b.wq, &b.wk, &b.wv, &b.wo, &b.mlp_norm, &b.w_gate, &b.w_up, &b.w_down,
            ]);
            if let Some(tp) = think {
                out.extend(tp.step_encodings.iter());
                for r in &tp.routers {
                    out.extend([&r.weight, &r.bias]);
                }
            }
        }
        out.extend([&self.final_norm, &self.head_weight, &self.head_bias]);
    }

    /// Mutable tensors in canonical order.
    pub fn flatten_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = vec![&mut self.embed];
        for (block, think) in self.blocks.iter_mut().zip(self.thinking.iter_mut()) {
            let b = block;
            out.extend([
                &mut b.attn_norm,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.mlp_norm,
                &mut b.w_gate,
                &mut b.w_up,
                &mut b.w_down,
            ]);
            if let Some(tp) = think {
                out.extend(tp.step_encodings.iter_mut());
                for r in &mut tp.routers {
                    out.extend([&mut r.weight, &mut r.bias]);
                }
            }
        }
        out.extend([&mut self.final_norm, &mut self.head_weight, &mut self.head_bias]);
        out
    }
}

/// Expected `(name, shape)` list for a configuration, in canonical order.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    skeleton(cfg).flatten().into_iter().map(|(n, s)| (n, s.clone())).collect()
}

fn skeleton(cfg: &ModelConfig) -> ModelParams<Vec<usize>> {
    let d = cfg.d_model;
    let h = cfg.mlp_hidden;
    let block = BlockParams {
        attn_norm: vec![d],
        wq: vec![d, d],
        wk: vec![d, d],
        wv: vec![d, d],
        wo: vec![d, d],
        mlp_norm: vec![d],
        w_gate: vec![d, h],
        w_up: vec![d, h],
        w_down: vec![h, d],
    };
    let thinking = (0..cfg.n_layers)
        .map(|i| {
            (cfg.layer_kind(i) == LayerKind::Thinking).then(|| ThinkingParams {
                step_encodings: vec![vec![d]; cfg.thinking_steps],
                routers: vec![
                    RouterParams {
                        weight: vec![d, 1],
                        bias: vec![1],
                    };
                    cfg.extra_steps()
                ],
            })
        })
        .collect();
    ModelParams {
        embed: vec![cfg.vocab_size, d],
        blocks: vec![block; cfg.n_layers],
        thinking,
        final_norm: vec![d],
        head_weight: vec![d, cfg.vocab_size],
        head_bias: vec![cfg.vocab_size],
    }
}

impl<F: Scalar> ModelParams<Tensor<F>> {
    /// Matrices `N(0, 0.02²)`, norm scales one, head bias zero, `φ⁰ = 1`,
    /// `φ^{t≥1} = 0`, routers zero. At this point every inner-thinking layer
    /// computes exactly what a plain block computes.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let shapes = skeleton(cfg);
        Ok(shapes.map(|name, shape| {
            let ones = name.ends_with("norm") || name.ends_with("phi.0");
            let zeros = name.contains(".phi.") || name.contains(".router.") || name == "head.bias";
            if ones {
                Tensor::ones(shape)
            } else if zeros {
                Tensor::zeros(shape)
            } else {
                Tensor::randn(shape, INIT_STD, rng)
            }
        }))
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = expected_shapes(cfg);
        let actual = self.flatten();
        if expected.len() != actual.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((en, es), (an, t)) in expected.iter().zip(&actual) {
            if en != an || es.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor {an} has shape {:?}, expected {en} {:?}",
                    t.shape(),
                    es
                )));
            }
            if !t.is_finite() {
                return Err(Error::Config(format!("tensor {an} has non-finite values")));
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.flatten().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<Tensor<G>> {
        self.map(|_, t| t.cast())
    }

    /// Builds a tensor set from `(name, tensor)` pairs, in any order.
    pub fn from_named(cfg: &ModelConfig, mut named: Vec<(String, Tensor<F>)>) -> Result<Self> {
        let params = skeleton(cfg).try_map(|name, shape| {
            let pos = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("missing tensor {name}")))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        })?;
        if let Some((extra, _)) = named.first() {
            return Err(Error::Config(format!("unexpected tensor {extra}")));
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Variant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_layout() {
        let cfg = ModelConfig::toy().with_variant(Variant::Itt, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ModelParams::<Tensor<f32>>::init(&cfg, &mut rng).unwrap();
        p.check_shapes(&cfg).unwrap();
        let tp = p.thinking[1].as_ref().unwrap();
        assert_eq!(tp.step_encodings.len(), 3);
        assert_eq!(tp.routers.len(), 2);
        assert!(tp.step_encodings[0].data().iter().all(|&v| v == 1.0));
        assert!(tp.step_encodings[2].data().iter().all(|&v| v == 0.0));
        assert!(tp.routers[0].weight.data().iter().all(|&v| v == 0.0));
        assert!(p.thinking[0].is_none() && p.thinking[2].is_none());
        assert!(p.head_bias.data().iter().all(|&v| v == 0.0));
        assert!(p.blocks[0].attn_norm.data().iter().all(|&v| v == 1.0));
        let names: Vec<_> = p.flatten().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"layers.1.thinking.router.2.bias".to_string()));
        assert_eq!(names.len(), p.flatten_mut().len());
    }

    #[test]
    fn from_named_round_trip_and_errors() {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::<Tensor<f64>>::init(&cfg, &mut rng).unwrap();
        let named: Vec<_> = p.flatten().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let back = ModelParams::from_named(&cfg, named.clone()).unwrap();
        assert_eq!(back, p);
        let mut missing = named.clone();
        missing.pop();
        assert!(ModelParams::from_named(&cfg, missing).is_err());
        let mut extra = named;
        extra.push(("bogus".into(), Tensor::zeros(&[1])));
        assert!(ModelParams::from_named(&cfg, extra).is_err());
    }
}
