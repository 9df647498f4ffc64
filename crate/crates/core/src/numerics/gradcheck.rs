//! Central-difference gradient oracle.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Absolute error below which an element passes regardless of relative error.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error among elements whose absolute error exceeds [`ABS_FLOOR`].
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, element index) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
    pub pass: bool,
}

/// Checks the tape gradient of scalar `f` at `x` against central differences.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, vs| f(t, vs[0]), std::slice::from_ref(x), step, tol)
}

/// Multi-input variant: every element of every input is perturbed.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(invalid(format!("finite-difference step {step} outside [1e-6, 1e-3]")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars = xs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    if eval(xs)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
        pass: true,
    };
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (i, (x, v)) in xs.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt(*v)?;
        for j in 0..x.len() {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[j] += step;
            minus[j] -= step;
            probe[i] = Tensor::new(x.shape(), plus)?;
            let fp = eval(&probe)?;
            probe[i] = Tensor::new(x.shape(), minus)?;
            let fm = eval(&probe)?;
            probe[i] = x.clone();

            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs > ABS_FLOOR {
                let rel = abs / a.abs().max(numeric.abs());
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = (i, j);
                }
            }
            report.checked += 1;
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}
