use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference check, one entry per input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over the input's elements.
    pub max_rel_error: Vec<f64>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `f` at `point` with central differences.
///
/// Non-scalar outputs are contracted with a fixed random tensor so every
/// output element contributes. `f` is evaluated twice on the unperturbed
/// point first; differing results are reported as [`Error::NonDeterministic`].
pub fn grad_check<Fun>(f: Fun, point: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    Fun: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let evaluate = |inputs: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value())
    };

    let first = evaluate(point)?;
    if !first.bitwise_eq(&evaluate(point)?) {
        return Err(Error::NonDeterministic);
    }
    let projection = if first.is_scalar() {
        Tensor::ones(first.shape())
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
        Tensor::randn(first.shape(), 1.0, &mut rng)
    };
    let contract = |out: &Tensor<f64>| -> f64 {
        out.data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let tape = Tape::new();
    let vars: Vec<_> = point.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let loss = out.mul(&tape.constant(projection.clone()))?.sum()?;
    tape.backward(loss)?;

    let mut max_rel_error = Vec::with_capacity(point.len());
    for (k, var) in vars.iter().enumerate() {
        let analytic = var
            .grad()
            .unwrap_or_else(|| Tensor::zeros(point[k].shape()));
        let mut worst = 0.0f64;
        let mut probe = point.to_vec();
        for e in 0..point[k].numel() {
            let original = point[k].data()[e];
            probe[k].data_mut()[e] = original + eps;
            let plus = contract(&evaluate(&probe)?);
            probe[k].data_mut()[e] = original - eps;
            let minus = contract(&evaluate(&probe)?);
            probe[k].data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic.data()[e] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
        max_rel_error.push(worst);
    }
    Ok(GradCheckReport { max_rel_error })
}
