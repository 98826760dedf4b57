//! Central finite-difference gradient checks.
//!
//! Only forward evaluations are used here, so the results are an oracle
//! independent of every backward closure.

use rand::seq::index::sample;
use rand::Rng;

use super::layers::{named_params, set_param, zero_grads, Module};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely: central differences
/// in `f64` carry roughly `1e-10` of round-off at step `1e-5`.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_err(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

/// `k` distinct (parameter, flat index) picks, uniform over all scalars.
pub fn sample_param_entries(m: &dyn Module, k: usize, rng: &mut impl Rng) -> Vec<(String, usize)> {
    let params = named_params(m);
    let total: usize = params.iter().map(|(_, t)| t.numel()).sum();
    let mut flat: Vec<usize> = sample(rng, total, k.min(total)).into_vec();
    flat.sort_unstable();
    flat.into_iter()
        .map(|mut i| {
            for (name, t) in &params {
                if i < t.numel() {
                    return (name.clone(), i);
                }
                i -= t.numel();
            }
            unreachable!("index within total")
        })
        .collect()
}

/// Compares backprop against central differences for the chosen parameter
/// entries. `loss` must be a pure function of the model's parameters.
pub fn check_params<M: Module>(
    model: &mut M,
    picks: &[(String, usize)],
    step: f64,
    mut loss: impl FnMut(&M) -> Result<Tensor>,
) -> Result<Vec<GradSample>> {
    zero_grads(model);
    let out = loss(model)?;
    out.backward()?;
    let params = named_params(model);
    let mut samples = Vec::with_capacity(picks.len());
    for (name, index) in picks {
        let t = params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))?;
        let analytic = t.grad().map_or(0.0, |g| g[*index]);
        let base = t.to_vec();
        let mut eval_at = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[*index] += delta;
            set_param(model, name, v)?;
            loss(model)?.item()
        };
        let plus = eval_at(step)?;
        let minus = eval_at(-step)?;
        set_param(model, name, base.clone())?;
        samples.push(GradSample {
            name: name.clone(),
            index: *index,
            analytic,
            numeric: (plus - minus) / (2.0 * step),
        });
    }
    Ok(samples)
}

/// Checks every element of every input of `f`, which maps fresh leaves to a
/// scalar. Returns (analytic, numeric) pairs in input-major order.
pub fn check_inputs(
    inputs: &[Tensor],
    step: f64,
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
) -> Result<Vec<(f64, f64)>> {
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param(t.shape(), t.to_vec()))
        .collect::<Result<_>>()?;
    f(&leaves)?.backward()?;
    let mut pairs = Vec::new();
    for (i, leaf) in leaves.iter().enumerate() {
        let g = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for j in 0..leaf.numel() {
            let eval_at = |delta: f64| -> Result<f64> {
                let mut shifted: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
                let mut v = inputs[i].to_vec();
                v[j] += delta;
                shifted[i] = Tensor::new(inputs[i].shape(), v)?;
                f(&shifted)?.item()
            };
            let numeric = (eval_at(step)? - eval_at(-step)?) / (2.0 * step);
            pairs.push((g[j], numeric));
        }
    }
    Ok(pairs)
}
