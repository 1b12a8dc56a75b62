use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::Result;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error seen for each input.
    pub max_rel_error: Vec<f64>,
    /// Elements compared for each input.
    pub checked: Vec<usize>,
    /// `(element, analytic, numeric)` at the largest error of each input.
    pub worst: Vec<(usize, f64, f64)>,
    pub tol: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks every element of every input. `f` must build a scalar from the
/// given leaves.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_subset(f, inputs, eps, tol, usize::MAX)
}

/// Like [`grad_check`] but compares at most `max_per_input` evenly spaced
/// elements of each input, for inputs too large to difference exhaustively.
pub fn grad_check_subset<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64, max_per_input: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, eps, tol, |_, n| {
        let step = if n > max_per_input { n.div_ceil(max_per_input) } else { 1 };
        (0..n).step_by(step.max(1)).collect()
    })
}

/// Like [`grad_check`] but compares only the `per_input` elements of each
/// input with the largest analytic gradient magnitude.
pub fn grad_check_largest<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64, per_input: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, eps, tol, |analytic, n| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()).then(a.cmp(&b)));
        idx.truncate(per_input);
        idx
    })
}

fn grad_check_with<F, S>(f: F, inputs: &[Tensor], eps: f64, tol: f64, select: S) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    S: Fn(&[f64], usize) -> Vec<usize>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let detached = g.detached_values().to_vec();

    // stopped gradients stay at their unperturbed values
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::replaying(detached.clone());
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut work = inputs.to_vec();
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    let mut checked = Vec::with_capacity(inputs.len());
    let mut worst_at = Vec::with_capacity(inputs.len());
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map_or_else(|| vec![0.0; inputs[k].numel()], <[f64]>::to_vec);
        let mut worst: f64 = 0.0;
        let mut at = (0, 0.0, 0.0);
        let elements = select(&analytic, inputs[k].numel());
        for &i in &elements {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[i], numeric);
            if err >= worst {
                worst = err;
                at = (i, analytic[i], numeric);
            }
        }
        max_rel_error.push(worst);
        checked.push(elements.len());
        worst_at.push(at);
    }
    let passed = max_rel_error.iter().all(|&e| e < tol);
    Ok(GradCheckReport { max_rel_error, checked, worst: worst_at, tol, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_passes_tightly() {
        // f(x) = xᵀ A x with A = [[2,1],[1,3]]
        let a = Tensor::new(vec![2, 2], vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let col = g.reshape(v[0], &[2, 1])?;
                let a = g.constant(a.clone());
                let ax = g.matmul(a, col)?;
                let p = g.mul(ax, col)?;
                Ok(g.sum(p))
            },
            &[Tensor::from_vec(vec![0.7, -1.3])],
            1e-6,
            1e-8,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        let report = grad_check(
            |g, v| {
                let x = g.value(v[0]).clone();
                let y = x.map(|v| v * v);
                let doubled = g.custom_op(
                    "bad_square",
                    y,
                    &[v[0]],
                    Box::new(|a| vec![Some(a.grad.iter().zip(a.inputs[0].data()).map(|(g, x)| 4.0 * x * g).collect())]),
                );
                Ok(g.sum(doubled))
            },
            &[Tensor::from_vec(vec![1.0, -2.0])],
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(!report.passed);
        assert!((report.max_rel_error[0] - 0.5).abs() < 1e-6);
    }
}
