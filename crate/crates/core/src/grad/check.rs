use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub passed: bool,
    /// Set when a non-finite value was met; the check fails in that case.
    pub non_finite: Option<String>,
}

/// Magnitude below which errors are judged absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-4;

/// Compares the analytic gradient of the scalar built by `f` from `x`
/// against central differences with the given `step`.
pub fn grad_check<F>(mut f: F, x: &Tensor, step: f64, tol: f64) -> Result<CheckReport>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let analytic = {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = f(&mut g, v)?;
        let loss = g.value(out).item();
        if !loss.is_finite() {
            return Ok(non_finite(format!("loss = {loss} at the base point")));
        }
        g.backward(out)?.get(v).cloned().expect("input leaf has a gradient")
    };
    if let Some(i) = analytic.data().iter().position(|v| !v.is_finite()) {
        return Ok(non_finite(format!("analytic gradient entry {i} is non-finite")));
    }

    let mut eval = |point: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(point.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut worst_index = 0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Ok(non_finite(format!("loss non-finite when perturbing entry {i}")));
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if err > worst {
            worst = err;
            worst_index = i;
        }
    }
    Ok(CheckReport {
        max_rel_error: worst,
        worst_index,
        passed: worst <= tol,
        non_finite: None,
    })
}

fn non_finite(msg: String) -> CheckReport {
    CheckReport {
        max_rel_error: f64::INFINITY,
        worst_index: 0,
        passed: false,
        non_finite: Some(msg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let report = grad_check(
            |g, _x| Ok(g.constant(Tensor::scalar(3.0))),
            &x,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::vector(vec![-1.0]);
        let report = grad_check(
            |g, x| {
                let l = g.ln(x);
                g.sum(l, None)
            },
            &x,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.non_finite.is_some());
    }
}
