//! Central finite-difference oracle for reverse-mode gradients.
//!
//! Runs entirely in 64-bit and only ever evaluates the forward function on
//! perturbed inputs, so it shares no code path with [`crate::autodiff::grad`]
//! beyond the forward kernels themselves.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{grad, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `grad(f(inputs))` against central differences with step `step`
/// on up to `max_coords` coordinates sampled without replacement across all
/// inputs.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    step: f64,
    max_coords: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let vars: Vec<Var<f64>> = inputs.iter().cloned().map(Var::param).collect();
    let analytic = grad(&f(&vars)?, &vars)?;

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let coords: Vec<usize> = if max_coords >= total {
        (0..total).collect()
    } else {
        let mut v = sample(rng, total, max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let shifted: Vec<Var<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[coord] += delta;
                }
                Var::constant(t)
            })
            .collect();
        f(&shifted)?.value().item()
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for flat in coords {
        let (mut which, mut coord) = (0, flat);
        while coord >= inputs[which].numel() {
            coord -= inputs[which].numel();
            which += 1;
        }
        let numeric = (eval(which, coord, step)? - eval(which, coord, -step)?) / (2.0 * step);
        let a = analytic[which].data()[coord];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((which, coord, a, numeric));
        }
    }
    Ok(report)
}
