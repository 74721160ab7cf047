//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward pass, so it is an
//! oracle independent of the backward rules it checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of [`check`], one entry per input.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` per input.
    pub relative_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Fixed projection weights so that outputs with structural constraints
/// (e.g. softmax rows summing to one) still yield informative gradients.
fn projection(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 + ((i as f64) * 0.618_033_988_75).fract()).collect()
}

fn projected<'g>(out: Var<'g, f64>) -> Result<Var<'g, f64>> {
    let shape = out.shape();
    let w = Tensor::new(shape.clone(), projection(out.value().numel()))?;
    Ok(out.mul(out.graph().constant(w))?.sum())
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let graph = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| graph.constant(t.clone())).collect();
    let out = projected(f(&graph, &vars)?)?;
    out.value().item()
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h`, for every input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let graph = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = projected(f(&graph, &vars)?)?;
    let grads = graph.backward(loss)?;

    let mut relative_errors = Vec::with_capacity(inputs.len());
    for (slot, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[slot])
            .map(Tensor::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = Vec::with_capacity(input.numel());
        for i in 0..input.numel() {
            let mut shifted: Vec<Tensor<f64>> = inputs.to_vec();
            let mut data = input.to_vec();
            data[i] = input.data()[i] + h;
            shifted[slot] = Tensor::new(input.shape().to_vec(), data.clone())?;
            let up = evaluate(&shifted, &f)?;
            data[i] = input.data()[i] - h;
            shifted[slot] = Tensor::new(input.shape().to_vec(), data)?;
            let down = evaluate(&shifted, &f)?;
            numeric.push((up - down) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        relative_errors.push(if scale == 0.0 { 0.0 } else { diff / scale });
    }
    Ok(GradCheck { relative_errors })
}
