//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Forwarded to [`Graph::inject_fault`] for the analytic pass.
    pub fault: Option<String>,
}

impl GradCheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        GradCheckOptions {
            step: FD_STEP,
            tol,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// Worst input of `max_i |g_ad - g_fd| / (max_i |g_fd| + 1e-8)`.
    pub max_rel_error: f64,
    /// Largest `|g_ad - g_fd| / (|g_fd| + 1e-8)` over single coordinates.
    pub max_coord_rel_error: f64,
    pub max_abs_error: f64,
    pub coords: usize,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<40} max_rel={:.3e} max_abs={:.3e} coords={} tol={:.0e} {}",
            self.name,
            self.max_rel_error,
            self.max_abs_error,
            self.coords,
            self.tol,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Checks the gradient of the scalar function `f` at `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_many(
        "f",
        std::slice::from_ref(x),
        |g, vars| f(g, vars[0]),
        &GradCheckOptions::with_tol(tol),
    )
}

/// Checks the gradient of `f` with respect to every tensor in `inputs`.
///
/// The error for one input is the largest coordinate deviation scaled by the
/// largest finite-difference gradient magnitude of that input; the report
/// carries the worst input.
pub fn check_many<F>(
    name: &str,
    inputs: &[Tensor],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    if let Some(op) = &opts.fault {
        g.inject_fault(op.as_str());
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut max_coord = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut coords = 0;
    for (i, input) in inputs.iter().enumerate() {
        let mut fd = vec![0.0; input.numel()];
        for (c, slot) in fd.iter_mut().enumerate() {
            let x0 = input.data()[c];
            work[i].data_mut()[c] = x0 + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[c] = x0 - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[c] = x0;
            *slot = (plus - minus) / (2.0 * opts.step);
        }
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut input_abs = 0.0f64;
        for (a, n) in analytic[i].data().iter().zip(&fd) {
            let diff = (a - n).abs();
            input_abs = input_abs.max(diff);
            max_coord = max_coord.max(diff / (n.abs() + 1e-8));
        }
        max_abs = max_abs.max(input_abs);
        max_rel = max_rel.max(input_abs / (scale + 1e-8));
        coords += fd.len();
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: max_rel,
        max_coord_rel_error: max_coord,
        max_abs_error: max_abs,
        coords,
        tol: opts.tol,
        passed: max_rel <= opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let report = finite_diff_check(|g, x| g.sum_squares(x), &x, 1e-7).unwrap();
        assert!(report.passed, "{report}");
        assert!(report.max_abs_error < 1e-7);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]);
        let report = finite_diff_check(
            |g, x| {
                let z = g.scale(x, 0.0)?;
                g.sum(z)
            },
            &x,
            1e-7,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.max_abs_error, 0.0);
    }

    #[test]
    fn injected_fault_is_detected() {
        let x = Tensor::from_vec(&[2, 2], vec![0.3, -0.2, 0.7, 1.1]);
        let opts = GradCheckOptions {
            fault: Some("gelu".into()),
            ..GradCheckOptions::with_tol(1e-4)
        };
        let report = check_many(
            "gelu",
            &[x],
            |g, v| {
                let y = g.gelu(v[0])?;
                g.sum(y)
            },
            &opts,
        )
        .unwrap();
        assert!(!report.passed, "{report}");
    }
}
