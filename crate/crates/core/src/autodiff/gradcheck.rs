//! Central finite-difference checking of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One-sided slopes that disagree by more than this (relative to the slope
/// magnitude, floored at 1) mark a coordinate as sitting on a kink.
pub const KINK_TOLERANCE: f64 = 1e-3;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    /// `max |analytic - central| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    /// Coordinates that contributed to `max_rel_error`.
    pub checked: usize,
    /// `(input, coordinate)` pairs skipped because the function is not
    /// differentiable within `eps` of the point.
    pub excluded: Vec<(usize, usize)>,
    /// Location of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

impl GradCheck {
    pub fn excluded_fraction(&self) -> f64 {
        let total = self.checked + self.excluded.len();
        if total == 0 {
            0.0
        } else {
            self.excluded.len() as f64 / total as f64
        }
    }
}

/// Checks the analytic gradient of a scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Checks the analytic gradient of a scalar function of several tensors,
/// perturbing every coordinate of every input.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "finite difference eps must be > 0, got {eps}"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let f0 = tape.value(loss).item();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheck::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.len() {
            let orig = input.data()[ci];
            work[ti].data_mut()[ci] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[ci] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[ci] = orig;

            let forward = (plus - f0) / eps;
            let backward = (f0 - minus) / eps;
            let central = (plus - minus) / (2.0 * eps);
            let scale = forward.abs().max(backward.abs()).max(1.0);
            if (forward - backward).abs() > KINK_TOLERANCE * scale {
                report.excluded.push((ti, ci));
                continue;
            }
            let a = analytic[ti].data()[ci];
            let err = (a - central).abs() / a.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((ti, ci));
            }
        }
    }
    Ok(report)
}
