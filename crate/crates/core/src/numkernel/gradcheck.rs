//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward graph; it never reads
//! a gradient produced by [`Tape::backward`].

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Relative error per input: `‖a − n‖ / max(‖a‖, ‖n‖, 1e-12)`.
    pub rel_errors: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Below this norm a gradient counts as structurally zero and differences
/// are measured absolutely; central differences carry ~1e-10 round-off.
pub const GRAD_NORM_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(GRAD_NORM_FLOOR)
}

/// Evaluates `build` on fresh leaves and returns the scalar loss.
pub fn eval_scalar<F>(inputs: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Central differences of the scalar produced by `build` with respect to every
/// entry of every input.
pub fn numerical_gradients<F>(inputs: &[Tensor], eps: f64, build: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut all = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let n = inputs[which].len();
        let mut grad = vec![0.0; n];
        for e in 0..n {
            let orig = inputs[which].data()[e];
            let mut vals = inputs[which].data().to_vec();
            vals[e] = orig + eps;
            work[which].assign(&vals)?;
            let plus = eval_scalar(&work, build)?;
            vals[e] = orig - eps;
            work[which].assign(&vals)?;
            let minus = eval_scalar(&work, build)?;
            grad[e] = (plus - minus) / (2.0 * eps);
        }
        work[which] = inputs[which].clone();
        all.push(grad);
    }
    Ok(all)
}

/// Analytic gradients via the tape for every input.
pub fn analytic_gradients<F>(inputs: &[Tensor], build: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect())
}

pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &build)?;
    let numeric = numerical_gradients(inputs, eps, &build)?;
    Ok(GradReport {
        rel_errors: analytic.iter().zip(&numeric).map(|(a, n)| relative_error(a, n)).collect(),
    })
}
