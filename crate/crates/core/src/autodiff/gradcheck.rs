//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every backward rule it is used to check.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for relative errors, so gradients that are zero up to
/// round-off do not divide by ~0.
const SCALE_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(SCALE_FLOOR);
    (analytic - numeric).abs() / scale
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// `(f(x + h) - f(x - h)) / 2h` for every coordinate of `x`.
pub fn central_difference<F>(x: &[f64], h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Compares tape gradients of a scalar function of several tensors against
/// central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
}

impl GradCheck {
    pub fn new(step: f64) -> Self {
        Self { step }
    }

    /// Returns the largest relative error over every coordinate of every input.
    ///
    /// `build` must be deterministic: any randomness (Gumbel noise) has to be
    /// frozen by the caller.
    pub fn run<F>(&self, inputs: &[Tensor], build: F) -> Result<f64>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let analytic = self.analytic(inputs, &build)?;
        let mut worst: f64 = 0.0;
        for (k, input) in inputs.iter().enumerate() {
            let numeric = central_difference(input.values(), self.step, |probe| {
                let mut perturbed = inputs.to_vec();
                perturbed[k] = Tensor::new(input.shape().to_vec(), probe.to_vec())?;
                evaluate(&perturbed, &build)
            })?;
            worst = worst.max(max_relative_error(&analytic[k], &numeric));
        }
        Ok(worst)
    }

    fn analytic<F>(&self, inputs: &[Tensor], build: &F) -> Result<Vec<Vec<f64>>>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let loss = build(&mut tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                Ok(tape
                    .grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()]))
            })
            .collect()
    }
}

fn evaluate<F>(inputs: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let value = tape.value(loss);
    if value.len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar output".into()));
    }
    Ok(value.item())
}
