//! Central finite-difference gradient checks.

use super::{Graph, Tensor4, Var};
use crate::error::{invalid_arg, Result};

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as denominator,
/// so near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Checks at most this many evenly spaced elements per input; `None` checks all.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            max_elements: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckFailure {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error per input.
    pub max_rel_error_per_input: Vec<f64>,
    pub max_rel_error: f64,
    pub checked: usize,
    pub failures: Vec<GradCheckFailure>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(build: &F, inputs: &[Tensor4]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    let v = g.value(root);
    if !v.is_scalar() {
        return Err(invalid_arg!("gradient check needs a scalar output, got {:?}", v.dims()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of `build` against central differences,
/// perturbing each input element by `±step`. Every input is a trainable leaf.
pub fn check_gradients<F>(build: F, inputs: &[Tensor4], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error_per_input: vec![0.0; inputs.len()],
        max_rel_error: 0.0,
        checked: 0,
        failures: Vec::new(),
        tolerance: opts.tolerance,
    };
    let mut probe = inputs.to_vec();
    for (input, t) in inputs.iter().enumerate() {
        let n = t.len();
        let stride = opts.max_elements.map_or(1, |m| n.div_ceil(m.max(1)));
        for element in (0..n).step_by(stride) {
            let orig = t.data()[element];
            probe[input].data_mut()[element] = orig + opts.step;
            let plus = evaluate(&build, &probe)?;
            probe[input].data_mut()[element] = orig - opts.step;
            let minus = evaluate(&build, &probe)?;
            probe[input].data_mut()[element] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[input][element];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            let slot = &mut report.max_rel_error_per_input[input];
            *slot = slot.max(rel);
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel.is_nan() || rel >= opts.tolerance {
                report.failures.push(GradCheckFailure {
                    input,
                    element,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
