//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest number of coordinates probed when sampling a large tensor.
pub const MIN_SAMPLED_COORDS: usize = 64;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Probe at most this many coordinates (never fewer than
    /// [`MIN_SAMPLED_COORDS`]); `None` probes all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl GradcheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradcheckOptions { tolerance, ..Self::default() }
    }
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { step: 1e-5, tolerance: 1e-6, max_coords: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
    /// Coordinates left out because every step straddled a kink.
    pub coords_skipped: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare an analytic gradient against central differences of `eval`
/// around `point`.
pub fn check_gradient<F>(analytic: &Tensor<f64>, point: &Tensor<f64>, mut eval: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    analytic.expect_same_shape(point, "gradcheck")?;
    let n = point.numel();
    let coords: Vec<usize> = match opts.max_coords {
        Some(limit) if n > limit.max(MIN_SAMPLED_COORDS) => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked = sample(&mut rng, n, limit.max(MIN_SAMPLED_COORDS)).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..n).collect(),
    };
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: coords.len(),
        coords_skipped: 0,
        tolerance: opts.tolerance,
        passed: true,
    };
    let mut probe = point.clone();
    for &i in &coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + opts.step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - opts.step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.max_rel_error <= opts.tolerance;
    Ok(report)
}

/// Like [`check_gradient`] for functions built from ReLU and max pooling,
/// which are only piecewise smooth.
///
/// A central difference across a kink is meaningless, so each coordinate
/// also takes both one-sided differences, and the step is shrunk tenfold
/// (up to `refinements` times) until two consecutive steps give one-sided
/// differences that agree and central differences that agree. A coordinate
/// that never settles is skipped. Errors are measured relative
/// to `max(|a|, |n|, floor)`, which keeps exactly-zero gradients from being
/// judged on round-off alone.
pub fn check_gradient_piecewise<F>(
    analytic: &Tensor<f64>,
    point: &Tensor<f64>,
    mut eval: F,
    opts: &GradcheckOptions,
    refinements: usize,
    floor: f64,
) -> Result<GradcheckReport>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    analytic.expect_same_shape(point, "gradcheck")?;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
        coords_skipped: 0,
        tolerance: opts.tolerance,
        passed: true,
    };
    let mut probe = point.clone();
    let center = eval(&probe)?;
    let scaled = |x: f64, y: f64| opts.tolerance * x.abs().max(y.abs()).max(floor);
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        let mut step = opts.step;
        let mut numeric = None;
        let mut previous: Option<f64> = None;
        for _ in 0..=refinements {
            probe.data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe.data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe.data_mut()[i] = orig;
            let (fwd, bwd) = ((plus - center) / step, (center - minus) / step);
            let estimate = (plus - minus) / (2.0 * step);
            if (fwd - bwd).abs() > scaled(fwd, bwd) {
                previous = None;
            } else {
                // Kinks on both sides can cancel in the one-sided test, so
                // two step sizes must also agree.
                if previous.is_some_and(|p| (p - estimate).abs() <= 0.5 * scaled(p, estimate)) {
                    numeric = Some(estimate);
                    break;
                }
                previous = Some(estimate);
            }
            step /= 10.0;
        }
        let Some(numeric) = numeric else {
            report.coords_skipped += 1;
            continue;
        };
        report.coords_checked += 1;
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.max_rel_error <= opts.tolerance && report.coords_checked > 0;
    Ok(report)
}

/// Check the backward rules reached by `f` at `point`.
///
/// `f` receives a fresh tape and the point as a differentiable leaf and must
/// return a scalar.
pub fn finite_diff_gradcheck<F>(f: F, point: &Tensor<f64>, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(y).to_vec()));
    }
    let grads = tape.backward(y)?;
    let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));
    check_gradient(
        &analytic,
        point,
        |p| {
            let mut t = Tape::inference();
            let x = t.leaf(p.clone());
            let y = f(&mut t, x)?;
            Ok(t.value(y).item())
        },
        opts,
    )
}
