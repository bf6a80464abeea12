//! Central finite-difference checks of tape gradients at f64.

use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::Result;

/// Gradients smaller than this are compared in absolute rather than relative
/// terms, since their finite-difference estimate is dominated by rounding.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many evenly spaced elements per input.
    pub max_elements_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_elements_per_input: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub elements_checked: usize,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `build`'s tape gradients against central differences for every
/// input tensor that requires gradients.
///
/// `build` receives one leaf per input (in order) and must return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], options: GradCheckOptions, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        if !inputs[i].requires_grad() {
            continue;
        }
        let numel = inputs[i].numel();
        let analytic = tape
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| alloc::vec![0.0; numel]);
        let stride = match options.max_elements_per_input {
            Some(limit) if limit > 0 && numel > limit => numel.div_ceil(limit),
            _ => 1,
        };
        for j in (0..numel).step_by(stride) {
            let original = work[i].data()[j];
            work[i].data_mut()[j] = original + options.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = original - options.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * options.step);
            let err = relative_error(analytic[j], numeric);
            report.elements_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
