//! Central-difference gradient checking.
//!
//! Runs in f64 only: central differences at epsilon 1e-4 lose too many digits
//! in f32 to separate real gradient bugs from rounding noise.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Relative error is meaningless once both gradients drop below what central
/// differences can resolve: truncation at the default epsilon leaves O(1e-8)
/// absolute noise, so elements under this floor are compared as
/// |diff| <= tolerance * GRAD_FLOOR instead.
pub const GRAD_FLOOR: f64 = 1e-4;

/// Outcome of one gradient check. `max_rel_err` is the worst relative error
/// over every element of every checked parameter.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub max_rel_err: f64,
    /// Worst offender: parameter name, flat element index, analytic value,
    /// numeric value.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Per-parameter worst relative error, in registration order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Checks the analytic gradient of `build` against central differences.
///
/// `build` receives a fresh graph plus one leaf per entry of `params` (in
/// order) and must return a scalar loss node. It is re-invoked twice per
/// parameter element for the finite-difference probes, so it must be a pure
/// function of the graph inputs.
pub fn grad_check<B>(
    build: B,
    params: &[(&str, Tensor<f64>)],
    epsilon: f64,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &ids)?;
        if g.shape(loss) != [1] {
            return Err(TensorError::Contract {
                op: "grad_check",
                expected: "scalar loss of shape [1]".into(),
                got: format!("shape {:?}", g.shape(loss)),
            });
        }
        Ok((g, ids, loss))
    };

    let base: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let (g, ids, loss) = eval(&base)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        epsilon,
        max_rel_err: 0.0,
        worst: None,
        per_param: Vec::with_capacity(params.len()),
    };

    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads.get(ids[pi]);
        let mut param_worst = 0.0f64;
        for e in 0..tensor.numel() {
            let mut plus = base.clone();
            plus[pi].data_mut()[e] += epsilon;
            let (gp, _, lp) = eval(&plus)?;
            let loss_plus = gp.value(lp).data()[0];

            let mut minus = base.clone();
            minus[pi].data_mut()[e] -= epsilon;
            let (gm, _, lm) = eval(&minus)?;
            let loss_minus = gm.value(lm).data()[0];

            let numeric = (loss_plus - loss_minus) / (2.0 * epsilon);
            let ana = analytic.map_or(0.0, |t| t.data()[e]);
            let rel = (numeric - ana).abs() / numeric.abs().max(ana.abs()).max(GRAD_FLOOR);
            if rel > param_worst {
                param_worst = rel;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.to_string(), e, ana, numeric));
            }
        }
        report.per_param.push((name.to_string(), param_worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches_closed_form() {
        // loss = mean(x * x); dloss/dx = 2x / n, checked against FD.
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.7]]).unwrap();
        let report = grad_check(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                Ok(g.mean_all(sq))
            },
            &[("x", x)],
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // The analytic pass differentiates mean(x*x) while the FD probes
        // evaluate mean(x*x*x), so numeric and analytic must disagree and the
        // checker has to flag it.
        use std::cell::Cell;
        let calls = Cell::new(0usize);
        let x = Tensor::from_rows(&[vec![0.5, 0.9]]).unwrap();
        let report = grad_check(
            |g, ids| {
                let n = calls.get();
                calls.set(n + 1);
                let sq = g.mul(ids[0], ids[0])?;
                let out = if n == 0 { sq } else { g.mul(sq, ids[0])? };
                Ok(g.mean_all(out))
            },
            &[("x", x)],
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert!(!report.passes(DEFAULT_TOLERANCE));
        assert!(report.worst.is_some());
    }
}
