//! Central finite differences as an oracle for the analytic adjoints.

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub abs_floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            abs_floor: 1e-6,
        }
    }
}

impl FdConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdFailure {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub failures: Vec<FdFailure>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: FdReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.failures.extend(other.failures);
    }
}

/// Compares `analytic[i]` against `(f(p + h) - f(p - h)) / 2h` for every
/// scalar of every input. `f` must be deterministic: any sampling noise has
/// to be frozen across evaluations.
///
/// Inputs are perturbed in place and restored bit-exactly afterwards.
pub fn finite_difference_check<F>(
    inputs: &mut [Tensor],
    analytic: &[Tensor],
    mut f: F,
    cfg: &FdConfig,
) -> Result<FdReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut report = FdReport::default();
    for t in 0..inputs.len() {
        for idx in 0..inputs[t].len() {
            let orig = inputs[t].data()[idx];
            inputs[t].data_mut()[idx] = orig + cfg.step;
            let up = f(inputs);
            inputs[t].data_mut()[idx] = orig - cfg.step;
            let down = f(inputs);
            inputs[t].data_mut()[idx] = orig;
            let numeric = (up? - down?) / (2.0 * cfg.step);
            let a = analytic[t].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.checked += 1;
            if !(rel <= cfg.tolerance) {
                report.failures.push(FdFailure {
                    input: t,
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
            if rel.is_nan() {
                report.max_rel_error = f64::NAN;
            } else if !report.max_rel_error.is_nan() {
                report.max_rel_error = report.max_rel_error.max(rel);
            }
        }
    }
    Ok(report)
}

/// Gradient check of a scalar function built on a fresh tape from leaves
/// holding `inputs`.
pub fn check_gradient<B>(inputs: &[Tensor], build: B, cfg: &FdConfig) -> Result<FdReport>
where
    B: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &leaves)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut work = inputs.to_vec();
    finite_difference_check(
        &mut work,
        &analytic,
        |xs| {
            let mut tape = Tape::new();
            let leaves: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
            let root = build(&mut tape, &leaves)?;
            tape.value(root).item()
        },
        cfg,
    )
}
