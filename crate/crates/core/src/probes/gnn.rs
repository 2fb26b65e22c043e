//! Gradient nuclear norms of the attention projections, split by whether the
//! model already answers a sample correctly.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::svd::nuclear_norm;
use crate::error::{Error, Result};
use crate::model::decode::argmax;
use crate::model::{ForwardOptions, Model};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::train::data::byte_tokenize;

/// A prompt with a known continuation, e.g. `"3+4="` → `"7"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub prompt: String,
    pub target: String,
}

/// Single-digit additions `a+b=` with their decimal sums, newline terminated.
pub fn arithmetic_samples(count: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|id| {
            let a: u32 = rng.random_range(0..10);
            let b: u32 = rng.random_range(0..10);
            Sample {
                id,
                prompt: format!("{a}+{b}="),
                target: format!("{}\n", a + b),
            }
        })
        .collect()
}

/// Training text made of concatenated arithmetic samples.
pub fn arithmetic_corpus(count: usize, seed: u64) -> String {
    arithmetic_samples(count, seed)
        .into_iter()
        .map(|s| s.prompt + &s.target)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub easy: Vec<Sample>,
    pub hard: Vec<Sample>,
}

/// Easy when `predict(prompt, len)` reproduces the target exactly.
pub fn easy_hard_split_with(
    samples: &[Sample],
    mut predict: impl FnMut(&str, usize) -> Result<String>,
) -> Result<Split> {
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut split = Split::default();
    for s in samples {
        let guess = predict(&s.prompt, s.target.len())?;
        if guess == s.target {
            split.easy.push(s.clone());
        } else {
            split.hard.push(s.clone());
        }
    }
    Ok(split)
}

/// Greedy continuation of `prompt` by full re-evaluation at every position.
pub fn greedy_continue<F: Scalar>(model: &Model<F>, prompt: &str, len: usize) -> Result<String> {
    let mut tokens = byte_tokenize(prompt.as_bytes());
    let opts = ForwardOptions::default();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let (logits, _) = model.logits(&tokens, &opts)?;
        let next = argmax(logits.row(tokens.len() - 1));
        out.push(next as u8);
        tokens.push(next);
    }
    Ok(String::from_utf8_lossy(&out).into_owned())
}

pub fn easy_hard_split<F: Scalar>(model: &Model<F>, samples: &[Sample]) -> Result<Split> {
    easy_hard_split_with(samples, |p, n| greedy_continue(model, p, n))
}

/// One CSV row: nuclear norms of the four attention projection gradients of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnRow {
    pub sample_id: usize,
    pub label: Difficulty,
    pub layer: usize,
    pub wq: f64,
    pub wk: f64,
    pub wv: f64,
    pub wo: f64,
    pub sum: f64,
}

/// Per-layer nuclear norms of `dL/dW` for `W ∈ {Wq, Wk, Wv, Wo}`, where `L` is
/// the mean cross-entropy of the target continuation given the prompt.
pub fn gradient_nuclear_norm(model: &Model<f64>, sample: &Sample, label: Difficulty) -> Result<Vec<GnnRow>> {
    let prompt = byte_tokenize(sample.prompt.as_bytes());
    let target = byte_tokenize(sample.target.as_bytes());
    if prompt.is_empty() || target.is_empty() {
        return Err(Error::Data(format!("sample {} has an empty prompt or target", sample.id)));
    }
    let mut full = prompt.clone();
    full.extend_from_slice(&target);
    let input = &full[..full.len() - 1];
    let rows: Vec<usize> = (prompt.len() - 1..input.len()).collect();

    let tape = Tape::new();
    let params = model.bind(&tape, true);
    let logits = model.forward(&params, input, &ForwardOptions::default())?.logits;
    let loss = logits.gather_rows(&rows)?.cross_entropy(&target)?;
    tape.backward(loss)?;

    let grad = |v: &crate::tensor::Var<'_, f64>| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()));
    params
        .blocks
        .iter()
        .enumerate()
        .map(|(layer, b)| {
            let mut norms = [0.0; 4];
            for (k, (name, w)) in ["wq", "wk", "wv", "wo"].iter().zip(b.attention()).enumerate() {
                norms[k] = nuclear_norm(&format!("layers.{layer}.{name} gradient"), &grad(w))?;
            }
            Ok(GnnRow {
                sample_id: sample.id,
                label,
                layer,
                wq: norms[0],
                wk: norms[1],
                wv: norms[2],
                wo: norms[3],
                sum: norms.iter().sum(),
            })
        })
        .collect()
}

/// Mean nuclear norms per layer and difficulty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnSummary {
    pub label: Difficulty,
    pub layer: usize,
    pub samples: usize,
    pub mean_wq: f64,
    pub mean_wk: f64,
    pub mean_wv: f64,
    pub mean_wo: f64,
    pub mean_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnReport {
    pub rows: Vec<GnnRow>,
    pub easy: usize,
    pub hard: usize,
}

impl GnnReport {
    pub fn summary(&self) -> Vec<GnnSummary> {
        let layers = self.rows.iter().map(|r| r.layer + 1).max().unwrap_or(0);
        let mut out = Vec::new();
        for label in [Difficulty::Easy, Difficulty::Hard] {
            for layer in 0..layers {
                let rs: Vec<&GnnRow> = self.rows.iter().filter(|r| r.label == label && r.layer == layer).collect();
                if rs.is_empty() {
                    continue;
                }
                let n = rs.len() as f64;
                let mean = |f: fn(&GnnRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
                out.push(GnnSummary {
                    label,
                    layer,
                    samples: rs.len(),
                    mean_wq: mean(|r| r.wq),
                    mean_wk: mean(|r| r.wk),
                    mean_wv: mean(|r| r.wv),
                    mean_wo: mean(|r| r.wo),
                    mean_sum: mean(|r| r.sum),
                });
            }
        }
        out
    }

    /// Columns: `sample_id,label,layer,wq,wk,wv,wo,sum`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.rows)
    }

    /// Columns: `label,layer,samples,mean_wq,mean_wk,mean_wv,mean_wo,mean_sum`.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.summary())
    }
}

pub(crate) fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Splits `samples` by greedy correctness, then measures every sample's gradient norms.
pub fn gnn_probe(model: &Model<f64>, samples: &[Sample]) -> Result<GnnReport> {
    let split = easy_hard_split(model, samples)?;
    let mut rows = Vec::new();
    for (label, set) in [(Difficulty::Easy, &split.easy), (Difficulty::Hard, &split.hard)] {
        for s in set {
            rows.extend(gradient_nuclear_norm(model, s, label)?);
        }
    }
    rows.sort_by_key(|r| (r.sample_id, r.layer));
    Ok(GnnReport {
        rows,
        easy: split.easy.len(),
        hard: split.hard.len(),
    })
}
