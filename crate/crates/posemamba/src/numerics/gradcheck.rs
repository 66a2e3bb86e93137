use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{PoseError, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Checks a scalar function of one tensor. See [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let report = grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h)?;
    Ok(report.max_rel_err)
}

/// Checks a scalar-valued `f` of several tensors: every coordinate of every
/// input is perturbed by `±h` and the central difference
/// `(f(x+h) − f(x−h)) / 2h` is compared to the reverse-mode gradient.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(PoseError::Parameter(format!("step h must be positive, got {h}")));
    }
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(PoseError::Dimension(format!(
                "grad_check needs a scalar function, got shape {:?}",
                v.shape()
            )));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(PoseError::NonFinite("function evaluated to a non-finite value".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(PoseError::Dimension("grad_check needs a scalar function".into()));
    }
    let grads = g.backward(out)?;

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[ti].len()]);
        for ci in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[ci] = orig - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[ci], numeric);
            report.coordinates += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (ti, ci);
                report.analytic_at_worst = analytic[ci];
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
