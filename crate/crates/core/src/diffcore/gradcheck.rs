use super::graph::{Graph, Var};
use super::tensor::DiffTensor;
use crate::error::{Error, Result};

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn eval_scalar<F>(f: &F, theta: &DiffTensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(theta);
    let out = f(&mut g, x)?;
    if g.value(out).len() != 1 {
        return Err(Error::shape("finite_difference_check", "objective must be scalar"));
    }
    let v = g.scalar_value(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("finite_difference_check objective".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` at `theta` with central
/// differences of step `eps`.
pub fn finite_difference_check<F>(f: F, theta: &DiffTensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_difference_check_subset(f, theta, eps, None)
}

/// Like [`finite_difference_check`] but only probes the listed coordinates.
pub fn finite_difference_check_subset<F>(
    f: F,
    theta: &DiffTensor,
    eps: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite difference step must be positive, got {eps}"
        )));
    }
    let mut param = theta.clone();
    param.set_requires_grad(true);
    param.zero_grad();

    let mut g = Graph::new();
    let x = g.leaf(&param);
    let out = f(&mut g, x)?;
    if !g.scalar_value(out).is_finite() {
        return Err(Error::NonFinite("finite_difference_check objective".into()));
    }
    g.backward(out)?;
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; param.numel()]);

    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..param.numel()).collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: indices.len(),
    };
    let mut probe = param.clone();
    for &i in indices {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + eps;
        let plus = eval_scalar(&f, &probe)?;
        probe.values_mut()[i] = orig - eps;
        let minus = eval_scalar(&f, &probe)?;
        probe.values_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if rel > report.max_rel_error || report.max_rel_error == 0.0 && i == indices[0] {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}
