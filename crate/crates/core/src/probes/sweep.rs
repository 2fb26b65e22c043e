//! Elastic inference: one trained model evaluated under many capacity vectors.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::flops::{compare_with_loop, ratio_f64};
use super::gnn::write_rows;
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::tensor::Scalar;
use crate::thinking::StepCapacity;
use crate::train::eval::evaluate_perplexity;

pub fn format_capacities(caps: &[StepCapacity]) -> String {
    caps.iter()
        .map(|c| match c {
            StepCapacity::Active(v) => format!("{v}"),
            StepCapacity::Removed => "off".to_string(),
        })
        .collect::<Vec<_>>()
        .join("/")
}

/// Parses `"0.7/0.7/off"` (or comma separated) into per-step capacities.
pub fn parse_capacities(text: &str) -> Result<Vec<StepCapacity>> {
    text.split(['/', ','])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            if s.eq_ignore_ascii_case("off") {
                return Ok(StepCapacity::Removed);
            }
            let v: f64 = s
                .parse()
                .map_err(|_| Error::Override(format!("bad capacity {s:?}")))?;
            if v > 0.0 && v <= 1.0 {
                Ok(StepCapacity::Active(v))
            } else {
                Err(Error::Override(format!("capacity {v} outside (0, 1]")))
            }
        })
        .collect()
}

/// One capacity vector per non-empty line; `#` starts a comment.
pub fn parse_grid(text: &str) -> Result<Vec<Vec<StepCapacity>>> {
    let grid: Vec<_> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(parse_capacities)
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        return Err(Error::Override("capacity grid is empty".into()));
    }
    Ok(grid)
}

/// Uniform 50% and 70%, 70% with a 90% last step, and variants with trailing
/// steps removed.
pub fn reference_grid(extra_steps: usize) -> Vec<Vec<StepCapacity>> {
    use StepCapacity::{Active, Removed};
    let k = extra_steps;
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut grid = vec![vec![Active(0.5); k], vec![Active(0.7); k]];
    let mut last_high = vec![Active(0.7); k];
    last_high[k - 1] = Active(0.9);
    grid.push(last_high);
    for removed in 1..=k {
        let mut v = vec![Active(0.7); k];
        v[k - removed..].fill(Removed);
        grid.push(v);
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub capacities: String,
    pub eval_loss: f64,
    pub eval_ppl: f64,
    pub flops_per_token: f64,
    /// Layer FLOPs relative to the Loop model with the same step count, routers excluded.
    pub ratio_vs_loop: f64,
    /// Empty unless timing was requested.
    pub wall_ms: Option<u64>,
}

pub struct Sweep {
    pub grid: Vec<Vec<StepCapacity>>,
    /// Sorted by `flops_per_token`, ties in grid order.
    pub rows: Vec<SweepRow>,
}

impl Sweep {
    /// A `# grid=` comment line, then `capacities,eval_loss,eval_ppl,flops_per_token,ratio_vs_loop,wall_ms`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let grid: Vec<String> = self.grid.iter().map(|g| format_capacities(g)).collect();
        writeln!(out, "# grid={}", grid.join(";"))?;
        write_rows(out, &self.rows)
    }
}

pub fn elastic_sweep<F: Scalar>(
    model: &Model<F>,
    ids: &[usize],
    seq_len: usize,
    max_windows: Option<usize>,
    grid: &[Vec<StepCapacity>],
    timing: bool,
) -> Result<Sweep> {
    if grid.is_empty() {
        return Err(Error::Override("capacity grid is empty".into()));
    }
    if model.config.variant != Variant::Itt {
        return Err(Error::Config("elastic sweeps need an inner-thinking model".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for caps in grid {
        let start = Instant::now();
        let eval = evaluate_perplexity(model, ids, seq_len, max_windows, Some(caps.clone()))?;
        let (itt, lp) = compare_with_loop(&model.config, caps, seq_len)?;
        rows.push(SweepRow {
            capacities: format_capacities(caps),
            eval_loss: eval.loss,
            eval_ppl: eval.ppl,
            flops_per_token: eval.flops_per_token,
            ratio_vs_loop: ratio_f64(itt.layer_ratio(&lp)),
            wall_ms: timing.then(|| start.elapsed().as_millis() as u64),
        });
    }
    rows.sort_by(|a, b| a.flops_per_token.total_cmp(&b.flops_per_token));
    Ok(Sweep {
        grid: grid.to_vec(),
        rows,
    })
}
