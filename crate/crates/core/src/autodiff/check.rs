//! Finite-difference verification of hand-written adjoints.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound on the denominator of the relative error, so that entries
/// whose true gradient is near zero are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// `Σ w ⊙ y` with constant weights, a scalar loss that exercises every
/// output element.
pub fn weighted_sum_loss(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    Ok(tape.sum_all(prod))
}

fn eval(
    inputs: &[Tensor<f64>],
    f: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.dims().to_vec()));
    }
    Ok(v.data()[0])
}

/// Compares tape adjoints of `f` with central differences of step `h` for
/// every element of every input.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        for k in 0..inputs[i].numel() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + h;
            let up = eval(&probe, &f)?;
            probe[i].data_mut()[k] = orig - h;
            let down = eval(&probe, &f)?;
            probe[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(*v).map_or(0.0, |g| g.data()[k]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = (i, k);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
