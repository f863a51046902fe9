use super::{Graph, Scalar, Tensor, Var};
use crate::error::{L2dError, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over coordinates of `|g_ad - g_fd| / (|g_fd| + 1e-12)`
    pub max_rel_error: f64,
    /// (parameter index, element index) where the maximum occurred
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// max over coordinates of `|g_ad - g_fd|`
    pub max_abs_error: f64,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` builds a scalar loss from leaf variables bound to `params` (in order).
/// The difference quotient uses the fourth-order central stencil
/// `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
pub fn finite_difference_check<F, L>(params: &[Tensor<F>], step: f64, mut f: L) -> Result<GradCheckReport>
where
    F: Scalar,
    L: FnMut(&mut Graph<F>, &[Var]) -> Result<Var>,
{
    let mut eval = |values: &[Tensor<F>], with_grad: bool| -> Result<(f64, Option<Vec<Vec<F>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone(), with_grad)).collect();
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(L2dError::NonFinite("gradient-check objective".into()));
        }
        if !with_grad {
            return Ok((value, None));
        }
        let grads = g.backward(loss)?;
        let out = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| {
                grads
                    .get(v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![F::zero(); t.len()])
            })
            .collect();
        Ok((value, Some(out)))
    };

    let (_, analytic) = eval(params, true)?;
    let analytic = analytic.expect("gradients requested");
    let mut work: Vec<Tensor<F>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
    };
    for p in 0..params.len() {
        for e in 0..params[p].len() {
            let orig = params[p].data()[e];
            let mut at = |delta: f64, work: &mut Vec<Tensor<F>>| -> Result<f64> {
                work[p].data_mut()[e] = orig + F::lit(delta);
                let v = eval(work, false)?.0;
                work[p].data_mut()[e] = orig;
                Ok(v)
            };
            let f1p = at(step, &mut work)?;
            let f1m = at(-step, &mut work)?;
            let f2p = at(2.0 * step, &mut work)?;
            let f2m = at(-2.0 * step, &mut work)?;
            let numeric = (8.0 * (f1p - f1m) - (f2p - f2m)) / (12.0 * step);
            let ad = analytic[p][e].as_f64();
            let rel = (ad - numeric).abs() / (numeric.abs() + 1e-12);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((ad - numeric).abs());
            if rel > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = rel;
                report.worst = (p, e);
                report.analytic = ad;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
