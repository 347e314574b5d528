//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Magnitude below which gradient components are compared absolutely. Exact
/// zeros (e.g. key biases under softmax shift invariance) leave only
/// finite-difference roundoff, which is well under this scale.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (input index, flat component) of the worst entry.
    pub worst: (usize, usize),
}

/// Compare tape gradients of `f(inputs)` against central differences.
///
/// `f` must return a scalar. At most `max_per_input` components of each
/// input are perturbed, chosen at an even stride.
pub fn check<F>(inputs: &[Tensor], h: f64, max_per_input: usize, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradReport { max_rel_err: 0.0, checked: 0, worst: (0, 0) };
    let mut probe = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = n.div_ceil(max_per_input.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = input.data()[j];
            probe[ti].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[ti].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (ti, j);
            }
        }
    }
    Ok(report)
}
