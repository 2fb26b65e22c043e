use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::RunConfig;
use super::data::{make_batches, Example};
use super::eval::evaluate_perplexity;
use super::optim::{cosine_lr, OptimizerState, StepOutcome};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, LayerKind, Model, Variant};
use crate::tensor::{Scalar, Tensor};
use crate::thinking::StepCapacity;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCapacities {
    pub layer: usize,
    pub capacities: Vec<f64>,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub eval_ppl: Option<f64>,
    pub lr: f64,
    pub tokens_seen: u64,
    pub capacities: Vec<LayerCapacities>,
    pub grad_norm: Option<f64>,
    pub skipped_steps: usize,
    pub wall_ms: Option<u64>,
}

pub struct TrainOutcome<F: Scalar> {
    pub checkpoint: Checkpoint<F>,
    pub records: Vec<MetricsRecord>,
    pub steps_run: usize,
    pub skipped_steps: usize,
    pub final_loss: f64,
    pub reached_target: bool,
}

/// Where a run writes its outputs.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub config: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(RunFiles {
            metrics: dir.join("metrics.jsonl"),
            checkpoint: dir.join("model.ittc"),
            config: dir.join("config.json"),
        })
    }
}

fn epoch_batches(cfg: &RunConfig, ids: &[usize], epoch: u64) -> Result<Vec<Vec<Example>>> {
    let seed = cfg.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    make_batches(ids, cfg.seq_len, cfg.batch_size, Some(seed))
}

/// Trains a freshly initialized model on `train_ids`.
///
/// Metrics are recorded at step 0, every `eval_every` steps and at the last
/// step; each record's checkpoint holds the weights its `train_loss` was
/// measured on. A non-finite loss aborts the run, leaving the last written
/// checkpoint in place.
pub fn train<F: Scalar>(
    cfg: &RunConfig,
    train_ids: &[usize],
    eval_ids: Option<&[usize]>,
    files: Option<&RunFiles>,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let model_cfg = cfg.model()?;
    let mut model = Model::<F>::new(model_cfg.clone(), cfg.seed)?;
    let optimizer = cfg.optimizer();
    let mut state = OptimizerState::new(model.params.flatten().into_iter().map(|(_, t)| t));
    let thinking_layers: Vec<usize> = (0..model_cfg.n_layers)
        .filter(|&i| model_cfg.layer_kind(i) == LayerKind::Thinking)
        .collect();

    let mut metrics = match files {
        Some(f) => {
            fs::write(&f.config, cfg.to_json())?;
            Some(BufWriter::new(File::create(&f.metrics)?))
        }
        None => None,
    };
    let start = Instant::now();
    let mut records = Vec::new();
    let mut skipped = 0;
    let mut epoch = 0u64;
    let mut batches = epoch_batches(cfg, train_ids, epoch)?;
    let mut cursor = 0;
    let mut final_loss = f64::NAN;
    let mut reached_target = false;
    let mut steps_run = 0;
    let mut last_grad_norm = None;

    for step in 0..cfg.steps {
        if cursor == batches.len() {
            epoch += 1;
            batches = epoch_batches(cfg, train_ids, epoch)?;
            cursor = 0;
        }
        let batch = &batches[cursor];
        cursor += 1;

        let capacities = match model_cfg.variant {
            Variant::Itt => model_cfg.routing.capacity_schedule(step)?,
            _ => Vec::new(),
        };
        let opts = ForwardOptions::with_capacities(capacities.iter().map(|&c| StepCapacity::Active(c)).collect());
        let (loss, grads) = model.loss_and_grads(batch, &opts)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        final_loss = loss;
        reached_target = cfg.target_loss.is_some_and(|t| loss < t);
        let last = step + 1 == cfg.steps || reached_target;

        if step % cfg.eval_every == 0 || last {
            let eval = match eval_ids {
                Some(ids) => Some(evaluate_perplexity(
                    &model,
                    ids,
                    cfg.seq_len,
                    Some(cfg.eval_batches * cfg.batch_size),
                    None,
                )?),
                None => None,
            };
            let record = MetricsRecord {
                step,
                train_loss: loss,
                eval_loss: eval.as_ref().map(|e| e.loss),
                eval_ppl: eval.as_ref().map(|e| e.ppl),
                lr: cosine_lr(step, cfg.lr, cfg.warmup_steps, cfg.steps),
                tokens_seen: ((step + 1) * cfg.batch_size * cfg.seq_len) as u64,
                capacities: thinking_layers
                    .iter()
                    .map(|&layer| LayerCapacities {
                        layer,
                        capacities: capacities.clone(),
                    })
                    .collect(),
                grad_norm: last_grad_norm,
                skipped_steps: skipped,
                wall_ms: cfg.log_wall_time.then(|| start.elapsed().as_millis() as u64),
            };
            if let Some(w) = metrics.as_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            if let Some(f) = files {
                let ckpt = Checkpoint {
                    model: model.clone(),
                    run: Some(cfg.clone()),
                    optimizer: Some(state.clone()),
                    train_step: step as u64,
                };
                save_checkpoint(&ckpt, &f.checkpoint)?;
            }
            on_record(&record);
            records.push(record);
        }
        steps_run = step + 1;
        if reached_target {
            break;
        }

        let lr = cosine_lr(step, cfg.lr, cfg.warmup_steps, cfg.steps);
        let grad_list: Vec<&Tensor<F>> = grads.flatten().into_iter().map(|(_, t)| t).collect();
        let mut param_list = model.params.flatten_mut();
        match optimizer.step(&mut param_list, &grad_list, &mut state, lr)? {
            StepOutcome::Applied { grad_norm } => last_grad_norm = Some(grad_norm),
            StepOutcome::Skipped => skipped += 1,
        }
    }

    let checkpoint = Checkpoint {
        model,
        run: Some(cfg.clone()),
        optimizer: Some(state),
        train_step: steps_run as u64,
    };
    if let Some(f) = files {
        save_checkpoint(&checkpoint, &f.checkpoint)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        records,
        steps_run,
        skipped_steps: skipped,
        final_loss,
        reached_target,
    })
}
