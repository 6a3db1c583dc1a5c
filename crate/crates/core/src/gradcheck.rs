//! Central-difference verification of graph gradients.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::ParamSet;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst disagreement found by [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares the graph gradient of `loss` against central differences with
/// step `h` for every scalar in `params`.
///
/// `loss` builds a fresh graph from the current parameter values and returns
/// the scalar loss node; it must be deterministic (no dropout). `tamper` sees
/// the analytic gradients before comparison and exists for negative controls.
pub fn gradient_check_with<F, T>(params: &mut ParamSet, h: f64, mut loss: F, tamper: T) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamSet) -> Result<NodeId>,
    T: FnOnce(&mut ParamSet),
{
    assert!(h > 0.0, "finite-difference step must be positive");
    params.zero_grad();
    let mut graph = Graph::new();
    let node = loss(&mut graph, params)?;
    graph.backward(node, params)?;
    tamper(params);
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();

    let mut eval = |params: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let node = loss(&mut g, params)?;
        Ok(g.value(node).data()[0])
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for pi in 0..params.len() {
        let id = crate::params::ParamId(pi);
        for j in 0..params.get(id).value.len() {
            let orig = params.get(id).value.data()[j];
            params.get_mut(id).value.data_mut()[j] = orig + h;
            let up = eval(params)?;
            params.get_mut(id).value.data_mut()[j] = orig - h;
            let down = eval(params)?;
            params.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = params.get(id).id.clone();
                report.worst_index = j;
            }
        }
    }
    params.zero_grad();
    Ok(report)
}

/// [`gradient_check_with`] without tampering; returns the maximum relative error.
pub fn gradient_check<F>(params: &mut ParamSet, h: f64, loss: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    Ok(gradient_check_with(params, h, loss, |_| {})?.max_relative_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn polynomial_gradient_is_exact_enough() {
        let mut ps = ParamSet::new();
        let x = ps.insert("x", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let err = gradient_check(&mut ps, DEFAULT_STEP, |g, ps| {
            let n = g.param(ps, x);
            let sq = g.mul(n, n)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn tampering_is_detected() {
        let mut ps = ParamSet::new();
        let x = ps.insert("x", Tensor::new(&[2], vec![0.5, -1.0]).unwrap()).unwrap();
        let report = gradient_check_with(
            &mut ps,
            DEFAULT_STEP,
            |g, ps| {
                let n = g.param(ps, x);
                let s = g.sigmoid(n);
                Ok(g.sum(s))
            },
            |ps| ps.get_mut(x).grad.data_mut()[1] *= 1.5,
        )
        .unwrap();
        assert!(report.max_relative_error > 0.1);
        assert_eq!(report.worst_param, "x");
        assert_eq!(report.worst_index, 1);
    }
}
