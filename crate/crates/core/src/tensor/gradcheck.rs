//! Finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::{Error, Real, Result};

/// Floor of the relative-error denominator.
pub const REL_FLOOR: Real = 1e-8;

/// Compares reverse-mode gradients of a scalar function with central
/// differences and returns the worst relative error
/// `|a - n| / max(|a|, |n|, 1e-8)` over every element of every input.
///
/// `f` receives the inputs as tensors and must register each one it
/// differentiates through with [`Graph::param`].
pub fn gradcheck<F>(f: F, inputs: &[Tensor], step: Real) -> Result<Real>
where
    F: Fn(&Graph, &[Tensor]) -> Result<Var>,
{
    Ok(gradcheck_report(f, inputs, step, usize::MAX)?.max_rel_error)
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: Real,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Like [`gradcheck`], checking at most `max_per_input` evenly spaced
/// elements of each input.
pub fn gradcheck_report<F>(
    f: F,
    inputs: &[Tensor],
    step: Real,
    max_per_input: usize,
) -> Result<GradcheckReport>
where
    F: Fn(&Graph, &[Tensor]) -> Result<Var>,
{
    let graph = Graph::new();
    let loss = f(&graph, inputs)?;
    graph.backward(loss)?;
    let analytic: Vec<Option<Tensor>> = inputs.iter().map(|x| graph.grad_of(x)).collect();
    drop(graph);

    let eval = |xs: &[Tensor]| -> Result<Real> {
        let g = Graph::no_grad();
        let out = f(&g, xs)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let stride = n.div_ceil(max_per_input.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let mut plus = x.to_vec();
            plus[e] += step;
            work[k] = Tensor::new(x.shape().to_vec(), plus)?;
            let fp = eval(&work)?;
            let mut minus = x.to_vec();
            minus[e] -= step;
            work[k] = Tensor::new(x.shape().to_vec(), minus)?;
            let fm = eval(&work)?;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[k].as_ref().map_or(0.0, |g| g.data()[e]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if report.checked == 0 || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (k, e);
            }
            report.checked += 1;
        }
        work[k] = x.clone();
    }
    Ok(report)
}
