use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over all parameter entries of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// `(parameter index, flat element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub probes: usize,
}

/// Checks the gradient of a scalar function of `params` by central
/// differences with step `h`.
///
/// `f` builds the forward pass on a fresh graph, given one leaf per
/// parameter, and returns the scalar output.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check probe"));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        probes: 0,
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].dims()));
        for j in 0..params[pi].len() {
            let x0 = params[pi].data()[j];
            work[pi].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            report.probes += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, j);
            }
        }
    }
    Ok(report)
}
