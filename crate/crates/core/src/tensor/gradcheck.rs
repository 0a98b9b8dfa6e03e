//! Central finite-difference verification of backward rules (64-bit).

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error. Central differences in f64
/// resolve gradients only to roughly `1e-16 / h`, so gradients smaller than
/// this are effectively compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates_checked: usize,
}

/// Max relative error between the analytic gradient of scalar-valued `f`
/// at `x` and central differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let report = grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h, None)?;
    Ok(report.max_rel_error)
}

/// Multi-input variant. With `max_coords_per_input`, an evenly strided
/// subset of each input's coordinates is checked.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    max_coords_per_input: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates_checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (input_idx, var) in vars.iter().enumerate() {
        let n = inputs[input_idx].numel();
        let zeros = Tensor::zeros(inputs[input_idx].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        let stride = match max_coords_per_input {
            Some(limit) if limit > 0 && n > limit => n.div_ceil(limit),
            _ => 1,
        };
        for coord in (0..n).step_by(stride) {
            let orig = work[input_idx].data()[coord];
            work[input_idx].data_mut()[coord] = orig + h;
            let plus = eval(&work)?;
            work[input_idx].data_mut()[coord] = orig - h;
            let minus = eval(&work)?;
            work[input_idx].data_mut()[coord] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[coord];
            let denom = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((input_idx, coord));
                }
            }
            report.coordinates_checked += 1;
        }
    }
    Ok(report)
}

fn scalar_of(g: &Graph<'_, f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
