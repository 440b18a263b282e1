//! Central-difference gradient verification, always in 64-bit.

use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::tensor::Tensor;

/// Compare the tape gradient of a scalar-valued builder against central
/// differences over every coordinate of every input.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// The builder must be pure: it is re-invoked on perturbed copies of the
/// inputs, so any sampling must be fixed outside the closure.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids = tensors
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &ids)?;
        if g.value(out).numel() != 1 {
            return Err(Error::shape("grad_check", "function output must be scalar"));
        }
        if !g.value(out).item().is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok((g, ids, out))
    };

    let (mut g, ids, out) = eval(inputs)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            g.grad(id)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut max_rel: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let probe = |delta: f64| -> Result<f64> {
                let mut copies = inputs.to_vec();
                copies[i].data_mut()[j] += delta;
                let (gp, _, outp) = eval(&copies)?;
                Ok(gp.value(outp).item())
            };
            let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    grad_check_multi(|g, ids| f(g, ids[0]), std::slice::from_ref(x), eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        // f(x) = sum x^2, grad = 2x; analytic vs central differences.
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum_all(sq)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![0.4, -0.2, 1.1]);
        let err = grad_check(
            |g, x| {
                let zero = g.scale(x, 0.0)?;
                let s = g.sum_all(zero)?;
                let c = g.scalar_const(3.5)?;
                g.add(s, c)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-10, "relative error {err}");
    }

    #[test]
    fn non_finite_function_value_errors() {
        let x = Tensor::vector(vec![-1.0]);
        let res = grad_check(|g, x| g.sqrt(x), &x, 1e-6);
        assert!(res.is_err());
    }
}
