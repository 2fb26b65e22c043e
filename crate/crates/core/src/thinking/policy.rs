use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Squashing applied to router logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Sigmoid,
    Tanh,
}

impl Normalization {
    /// Decode-time gate threshold: 0.5 for sigmoid weights, 0 for tanh weights.
    pub fn threshold(self) -> f64 {
        match self {
            Normalization::Sigmoid => 0.5,
            Normalization::Tanh => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Top `ceil(c·n)` tokens of the sequence.
    CapacityPercentile,
    /// Every token whose weight clears the normalization threshold.
    #[serde(rename = "threshold_0_5")]
    Threshold,
    /// Smallest prefix (by descending weight) holding `top_p` of the weight mass.
    TopP,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reweighting {
    /// Only selected rows are scaled; the rest pass through unchanged.
    OnlySelect,
    /// Unselected rows are additionally scaled by `1 - w`.
    Symmetric,
}

/// How per-step capacities evolve during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CapacitySchedule {
    Constant,
    LinearWarmup { start: f64, warmup_steps: usize },
}

/// Capacity of one extra thinking step at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepCapacity {
    Active(f64),
    /// The step is not executed at all and contributes nothing to the output.
    Removed,
}

impl StepCapacity {
    /// Capacity as a fraction, with removed steps counting as zero.
    pub fn fraction(self) -> f64 {
        match self {
            StepCapacity::Active(c) => c,
            StepCapacity::Removed => 0.0,
        }
    }
}

/// Per-step selection rules for the extra thinking steps of an inner-thinking layer.
///
/// `capacities` and `alpha` are indexed by extra step (`s1` is index 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingPolicy {
    pub normalization: Normalization,
    pub selection: Selection,
    pub capacities: Vec<f64>,
    pub top_p: f64,
    pub reweighting: Reweighting,
    pub alpha: Vec<f64>,
    pub schedule: CapacitySchedule,
}

impl Default for RoutingPolicy {
    fn default() -> Self {
        RoutingPolicy {
            normalization: Normalization::Sigmoid,
            selection: Selection::CapacityPercentile,
            capacities: vec![0.7],
            top_p: 0.5,
            reweighting: Reweighting::OnlySelect,
            alpha: Vec::new(),
            schedule: CapacitySchedule::Constant,
        }
    }
}

fn valid_fraction(c: f64) -> bool {
    c > 0.0 && c <= 1.0
}

impl RoutingPolicy {
    pub fn with_uniform_capacity(extra_steps: usize, capacity: f64) -> Self {
        RoutingPolicy {
            capacities: vec![capacity; extra_steps],
            ..Default::default()
        }
    }

    pub fn alpha(&self, step_index: usize) -> f64 {
        self.alpha.get(step_index).copied().unwrap_or(1.0)
    }

    pub fn validate(&self, extra_steps: usize) -> Result<()> {
        if self.capacities.len() != extra_steps {
            return Err(Error::Config(format!(
                "routing needs {extra_steps} capacities (one per extra thinking step), got {}",
                self.capacities.len()
            )));
        }
        if let Some(c) = self.capacities.iter().find(|&&c| !valid_fraction(c)) {
            return Err(Error::Config(format!("capacity {c} outside (0, 1]")));
        }
        if !valid_fraction(self.top_p) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !self.alpha.is_empty() && self.alpha.len() != extra_steps {
            return Err(Error::Config(format!(
                "alpha needs {extra_steps} entries or none, got {}",
                self.alpha.len()
            )));
        }
        if let Some(a) = self.alpha.iter().find(|&&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Config(format!("alpha {a} must be positive")));
        }
        if let CapacitySchedule::LinearWarmup { start, .. } = self.schedule {
            if !valid_fraction(start) {
                return Err(Error::Config(format!("warmup start capacity {start} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Capacities in effect at `global_step` of training.
    pub fn capacity_schedule(&self, global_step: usize) -> Result<Vec<f64>> {
        match self.schedule {
            CapacitySchedule::Constant => Ok(self.capacities.clone()),
            CapacitySchedule::LinearWarmup {
                warmup_steps: 0, ..
            } => Err(Error::Config("linear warmup needs warmup_steps > 0".into())),
            CapacitySchedule::LinearWarmup {
                start,
                warmup_steps,
            } => {
                let progress = (global_step as f64 / warmup_steps as f64).min(1.0);
                Ok(self
                    .capacities
                    .iter()
                    .map(|&fin| (start + (fin - start) * progress).clamp(f64::MIN_POSITIVE, 1.0))
                    .collect())
            }
        }
    }

    pub fn active_capacities(&self) -> Vec<StepCapacity> {
        self.capacities.iter().map(|&c| StepCapacity::Active(c)).collect()
    }
}

/// Parses `"s1=0.7,s2=0.7,s3=off"` into per-step capacities, starting from `base`.
///
/// Steps are labelled `s1..sK` for the `K` extra thinking steps; `off` removes a step.
pub fn parse_capacity_override(spec: &str, base: &[StepCapacity]) -> Result<Vec<StepCapacity>> {
    let mut out = base.to_vec();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::Override(format!("expected sN=value, got {part:?}")))?;
        let step: usize = key
            .trim()
            .strip_prefix('s')
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Override(format!("bad step label {key:?}")))?;
        if step == 0 || step > out.len() {
            return Err(Error::Override(format!(
                "step s{step} does not exist; valid labels are s1..s{}",
                out.len()
            )));
        }
        let value = value.trim();
        out[step - 1] = if value.eq_ignore_ascii_case("off") {
            StepCapacity::Removed
        } else {
            let c: f64 = value
                .parse()
                .map_err(|_| Error::Override(format!("bad capacity {value:?} for s{step}")))?;
            if !valid_fraction(c) {
                return Err(Error::Override(format!("capacity {c} for s{step} outside (0, 1]")));
            }
            StepCapacity::Active(c)
        };
    }
    Ok(out)
}
