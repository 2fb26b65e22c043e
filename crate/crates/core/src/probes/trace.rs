use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, Variant};
use crate::tensor::Scalar;
use crate::thinking::{LayerTrace, StepCapacity};
use crate::train::data::byte_tokenize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepExport {
    pub step: usize,
    pub capacity: Option<f64>,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerExport {
    pub layer: usize,
    pub steps: Vec<StepExport>,
}

/// JSON document behind router visualizations. Keys appear in field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceExport {
    pub text: String,
    pub tokens: Vec<usize>,
    pub variant: Variant,
    pub thinking_steps: usize,
    pub layers: Vec<LayerExport>,
}

impl From<&LayerTrace> for LayerExport {
    fn from(t: &LayerTrace) -> Self {
        LayerExport {
            layer: t.layer,
            steps: t
                .steps
                .iter()
                .map(|s| StepExport {
                    step: s.step,
                    capacity: s.capacity,
                    selected: s.selected.clone(),
                    weights: s.weights.clone(),
                })
                .collect(),
        }
    }
}

pub fn export_routing_trace<F: Scalar>(
    model: &Model<F>,
    text: &str,
    capacities: Option<Vec<StepCapacity>>,
) -> Result<TraceExport> {
    if text.is_empty() {
        return Err(Error::Data("trace text is empty".into()));
    }
    let tokens = byte_tokenize(text.as_bytes());
    let (_, trace) = model.logits(&tokens, &ForwardOptions {
        capacities,
        ..Default::default()
    })?;
    Ok(TraceExport {
        text: text.to_string(),
        tokens,
        variant: model.config.variant,
        thinking_steps: model.config.thinking_steps,
        layers: trace.layers.iter().map(LayerExport::from).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::thinking::selected_count;

    fn model() -> Model<f32> {
        let mut m = Model::new(ModelConfig::toy().with_variant(Variant::Itt, 3), 1).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
        for tp in m.params.thinking.iter_mut().flatten() {
            for r in &mut tp.routers {
                r.weight = crate::tensor::Tensor::randn(r.weight.shape(), 0.3, &mut rng);
            }
        }
        m
    }

    #[test]
    fn full_capacity_selects_everything() {
        let t = export_routing_trace(&model(), "hello world", Some(vec![StepCapacity::Active(1.0); 2])).unwrap();
        for l in &t.layers {
            for s in &l.steps {
                assert_eq!(s.selected, (0..11).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn sizes_and_codomain() {
        let text = "the quick brown fox jumps";
        let t = export_routing_trace(&model(), text, None).unwrap();
        assert_eq!(t.layers.len(), 2);
        for l in &t.layers {
            for s in &l.steps {
                assert_eq!(s.selected.len(), selected_count(0.7, text.len()));
                assert_eq!(s.weights.len(), text.len());
                assert!(s.weights.iter().all(|&w| w > 0.0 && w < 1.0));
            }
        }
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.starts_with(r#"{"text":"the quick brown fox jumps","tokens":["#));
        assert!(export_routing_trace(&model(), "", None).is_err());
    }
}
