//! Central finite-difference verification of [`Graph::derive`].

use crate::error::{GraphError, Result};
use crate::graph::{Bindings, Graph, NodeId, Op};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_relative_error: f64,
    /// (position in `wrt`, flat element index) of the worst coordinate.
    pub worst_coordinate: (usize, usize),
    pub step_size: f64,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares the derived gradient of `scalar_output` against central
/// differences `(f(x+h) - f(x-h)) / 2h` in every coordinate of every `wrt`
/// node. `wrt` nodes must be named inputs so they can be perturbed.
pub fn finite_difference_check(
    graph: &Graph,
    bindings: &Bindings,
    scalar_output: NodeId,
    wrt: &[NodeId],
    step: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(GraphError::Invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut names = Vec::with_capacity(wrt.len());
    for &w in wrt {
        match &graph.node(w)?.op {
            Op::Input(name) => names.push(name.clone()),
            _ => {
                return Err(GraphError::Invalid(format!(
                    "finite differences need input leaves, {} is not one",
                    graph.describe(w)
                )))
            }
        }
    }
    let mut extended = graph.clone();
    let grads = extended.derive(scalar_output, wrt)?;
    let analytic = extended.eval_nodes(bindings, &grads)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_coordinate: (0, 0),
        step_size: step,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = bindings.clone();
    for (wi, name) in names.iter().enumerate() {
        let base = bindings.get(name).ok_or_else(|| GraphError::Unbound(name.clone()))?.clone();
        for j in 0..base.len() {
            let x0 = base.data()[j];
            let mut eval_at = |v: f64| -> Result<f64> {
                probe.get_mut(name).expect("bound").data_mut()[j] = v;
                Ok(graph.eval_nodes(&probe, &[scalar_output])?[0].item())
            };
            let hi = eval_at(x0 + step)?;
            let lo = eval_at(x0 - step)?;
            eval_at(x0)?;
            let numeric = (hi - lo) / (2.0 * step);
            let a = analytic[wi].data()[j];
            let err = relative_error(a, numeric);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_coordinate = (wi, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
