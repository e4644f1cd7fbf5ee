//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
    /// with `floor = max(SCALE_FLOOR * max_j |analytic_j|, 1e-8)`
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) where the maximum occurred
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Coordinates whose gradient is this small relative to the largest one are
/// compared on the scale of the largest, since central differences cannot
/// resolve them below round-off.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Compares the tape gradient of `f` at `params` with central differences of
/// step `epsilon`. `f` must record a deterministic scalar computation of the
/// given leaves.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| grads.get(*v).expect("leaf gradient").data().to_vec())
        .collect();
    let largest = analytic.iter().flatten().fold(0.0f64, |m, a| m.max(a.abs()));
    let floor = (SCALE_FLOOR * largest).max(1e-8);
    let mut probe = params.to_vec();
    for (pi, analytic) in analytic.iter().enumerate() {
        for (ci, &a) in analytic.iter().enumerate() {
            let orig = probe[pi].data()[ci];
            probe[pi].data_mut()[ci] = orig + epsilon;
            let up = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig - epsilon;
            let down = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.coordinates += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (pi, ci);
            }
        }
    }
    Ok(report)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}
