use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    /// Largest `|analytic - numeric| / max(1, |analytic|)` seen.
    pub max_rel_err: f64,
    /// `(leaf, element, analytic, numeric)` at the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// element of every leaf, using central differences with step `h`.
///
/// `f` receives a fresh graph and one `requires_grad` leaf per entry of
/// `leaves`, and must return a scalar node. It is called `1 + 2·numel`
/// times, so it has to be deterministic.
pub fn grad_check<F>(f: F, leaves: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        g.set_check_finite(false);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(leaves)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        passed: true,
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for ei in 0..leaf.numel() {
            let orig = leaf.data()[ei];
            work[li].data_mut()[ei] = orig + h;
            let up = eval(&work)?;
            work[li].data_mut()[ei] = orig - h;
            let down = eval(&work)?;
            work[li].data_mut()[ei] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[li].data()[ei];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if !(err <= report.max_rel_err) || report.worst.is_none() {
                report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some((li, ei, a, numeric));
            }
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}
