use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const GRAD_CHECK_EPS: f64 = 1e-5;

/// Compares the recorded backward rule of `op` against central differences.
///
/// The output of `op` is reduced to a scalar by a fixed random projection, so
/// ops with any output shape can be checked. Returns the largest
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)` over all input
/// elements.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!(
            "grad_check eps must be positive, got {eps}"
        )));
    }
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::Data("grad_check inputs must be finite".into()));
    }

    let evaluate = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut graph = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| graph.param(t.clone())).collect();
        let out = op(&mut graph, &vars)?;
        Ok((graph, vars, out))
    };

    let (graph, vars, out) = evaluate(inputs)?;
    let out_shape = graph.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let weights: Vec<f64> = (0..out_shape.numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let seed = Tensor::new(out_shape, weights.clone())?;
    let mut grads = graph.backward_from(out, seed)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
        })
        .collect();
    drop(graph);

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let original = input.data()[i];
            let (up, down) = (original + eps, original - eps);
            perturbed[which].data_mut()[i] = up;
            let (g, _, o) = evaluate(&perturbed)?;
            let plus = g.value(o).clone();
            perturbed[which].data_mut()[i] = down;
            let (g, _, o) = evaluate(&perturbed)?;
            let minus = g.value(o);
            perturbed[which].data_mut()[i] = original;

            // divide by the step actually taken, which may differ from 2*eps
            // by rounding
            let step = up - down;
            let numeric: f64 = plus
                .data()
                .iter()
                .zip(minus.data())
                .zip(&weights)
                .map(|((p, m), w)| w * ((p - m) / step))
                .sum();
            let a = analytic[which].data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
