use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Largest relative error seen in each parameter tensor.
    pub per_param: Vec<f64>,
    pub max_error: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares `analytic` against central finite differences of `value`.
///
/// The error for one coordinate is `|analytic - fd| / max(1, |analytic|)`.
/// `max_coords` limits how many evenly spaced coordinates are probed per
/// parameter tensor; `None` checks all of them.
pub fn compare_with_finite_differences<F>(
    params: &[Vec<f64>],
    analytic: &[Vec<f64>],
    value: F,
    step: f64,
    tol: f64,
    max_coords: Option<usize>,
) -> Result<GradReport>
where
    F: Fn(&[Vec<f64>]) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Parameter(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::Contract(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    let mut work: Vec<Vec<f64>> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut checked = 0;
    for p in 0..params.len() {
        if params[p].len() != analytic[p].len() {
            return Err(Error::Dimension(format!(
                "parameter {p}: {} values but {} gradient entries",
                params[p].len(),
                analytic[p].len()
            )));
        }
        let n = params[p].len();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut worst: f64 = 0.0;
        for i in (0..n).step_by(stride) {
            let orig = work[p][i];
            work[p][i] = orig + step;
            let up = value(&work)?;
            work[p][i] = orig - step;
            let down = value(&work)?;
            work[p][i] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = analytic[p][i];
            let err = (a - fd).abs() / a.abs().max(1.0);
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
            checked += 1;
        }
        per_param.push(worst);
    }
    let max_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        per_param,
        max_error,
        checked,
        tol,
        passed: max_error < tol,
    })
}

/// Builds the graph `f` over leaf tensors made from `params`, back-propagates,
/// and checks every coordinate against central differences.
pub fn finite_diff_check<F>(
    f: F,
    params: &[(Vec<f64>, Vec<usize>)],
    step: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves = params
        .iter()
        .map(|(v, s)| Tensor::leaf(v.clone(), s.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();
    let values: Vec<Vec<f64>> = params.iter().map(|(v, _)| v.clone()).collect();
    let shapes: Vec<Vec<usize>> = params.iter().map(|(_, s)| s.clone()).collect();
    compare_with_finite_differences(
        &values,
        &analytic,
        |vals| {
            let consts = vals
                .iter()
                .zip(&shapes)
                .map(|(v, s)| Tensor::new(v.clone(), s.clone()))
                .collect::<Result<Vec<_>>>()?;
            f(&consts)?.item()
        },
        step,
        tol,
        None,
    )
}
