//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only ever runs forward passes, so it shares no code
//! with the backward rules it checks.

use super::{Tape, Tensor, Var};
use crate::error::TensorError;

/// Largest elementwise discrepancy found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// max |analytic - numeric| / max(|analytic|, |numeric|, floor)
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, element index) of the worst entry
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Denominator floor so entries whose true gradient is zero are judged absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares tape gradients of `build` against central differences with step `h`.
///
/// `build` receives a fresh tape and one `requires_grad` leaf per input and
/// must return a one-element loss. `probe` optionally limits which elements
/// are perturbed, as `(input, element)` pairs; `None` checks every element.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    probe: Option<&[(usize, usize)]>,
    build: F,
) -> Result<GradReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let all: Vec<(usize, usize)>;
    let points = match probe {
        Some(p) => p,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for &(i, j) in points {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let up = eval(&work)?;
        work[i].data_mut()[j] = orig - h;
        let down = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i][j];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (i, j);
        }
        report.max_abs_err = report.max_abs_err.max(abs);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tight_on_a_quadratic() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_gradients(&[x], 1e-5, None, |tape, v| {
            let s = tape.square(v[0])?;
            tape.mean(s)
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }
}
