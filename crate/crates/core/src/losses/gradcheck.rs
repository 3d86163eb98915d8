//! Central finite-difference verification of the composed loss gradients.

use crate::linalg::Matrix;

use super::{compose_unchecked, validate_compose, LossConfig, LossError, LossVariant};

pub const FD_STEP: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Input (`"z1"`, `"z2"`, `"predictions"`), row and column of the worst entry.
    pub worst: (&'static str, usize, usize),
    pub entries_checked: usize,
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn finite_difference_gradient(x: &Matrix, step: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.as_slice().len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + step;
        let up = f(&probe);
        probe.as_mut_slice()[k] = orig - step;
        let down = f(&probe);
        probe.as_mut_slice()[k] = orig;
        grad.as_mut_slice()[k] = (up - down) / (2.0 * step);
    }
    grad
}

/// Relative error with a floor tied to the gradient's overall scale so that
/// entries at round-off level do not dominate.
fn compare(
    name: &'static str,
    analytic: &Matrix,
    numeric: &Matrix,
    scale: f64,
    report: &mut GradCheckReport,
) {
    let floor = (1e-3 * scale).max(1e-8);
    for (k, (&a, &n)) in analytic.as_slice().iter().zip(numeric.as_slice()).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        report.entries_checked += 1;
        if rel > report.max_relative_error || rel.is_nan() {
            report.max_relative_error = if rel.is_nan() { f64::INFINITY } else { rel };
            report.worst = (name, k / analytic.cols(), k % analytic.cols());
        }
    }
}

/// Compares the analytic gradients of [`super::compose_loss`] against central
/// finite differences with step [`FD_STEP`].
///
/// For BYOL the targets carry no gradient: their analytic gradient must be
/// exactly zero, and the check covers the predictions instead.
pub fn loss_gradient_check(
    cfg: &LossConfig,
    z1: &Matrix,
    z2: &Matrix,
    predictions: Option<&Matrix>,
) -> Result<GradCheckReport, LossError> {
    validate_compose(cfg, z1, z2, predictions)?;
    let out = compose_unchecked(cfg, z1, z2, predictions);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: ("z1", 0, 0),
        entries_checked: 0,
    };

    let scale = [Some(&out.grad1), Some(&out.grad2), out.grad_predictions.as_ref()]
        .into_iter()
        .flatten()
        .map(Matrix::max_abs)
        .fold(0.0, f64::max);

    let num1 = finite_difference_gradient(z1, FD_STEP, |z| compose_unchecked(cfg, z, z2, predictions).value);
    compare("z1", &out.grad1, &num1, scale, &mut report);

    if cfg.variant == LossVariant::Byol {
        // stop-gradient contract on the target batch
        if out.grad2.max_abs() != 0.0 {
            report.max_relative_error = f64::INFINITY;
            report.worst = ("z2", 0, 0);
        }
        let p = predictions.expect("validated");
        let analytic = out.grad_predictions.as_ref().expect("BYOL fills predictor gradient");
        let nump = finite_difference_gradient(p, FD_STEP, |p| compose_unchecked(cfg, z1, z2, Some(p)).value);
        compare("predictions", analytic, &nump, scale, &mut report);
    } else {
        let num2 = finite_difference_gradient(z2, FD_STEP, |z| compose_unchecked(cfg, z1, z, predictions).value);
        compare("z2", &out.grad2, &num2, scale, &mut report);
    }
    Ok(report)
}
