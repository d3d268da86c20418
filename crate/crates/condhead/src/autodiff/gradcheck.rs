//! Finite-difference gradient verification.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference step.
pub const GRADCHECK_H: f64 = 1e-5;

/// Compare the reverse-mode gradient of a scalar-valued tensor function
/// against central finite differences with step `h = 1e-5`.
///
/// Returns the maximum per-coordinate relative error
/// `|a − n| / max(1, |a|, |n|)` over every coordinate of every input that
/// has `requires_grad` set.
pub fn gradcheck<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradcheck_with(f, inputs, false)
}

/// As [`gradcheck`], optionally with the sabotaged matmul rule enabled —
/// the mutation canary proving the checker detects a wrong gradient.
pub fn gradcheck_with<F>(f: F, inputs: &[Tensor], sabotage: bool) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !inputs.iter().any(|t| t.requires_grad()) {
        return Err(Error::Domain(
            "gradcheck needs at least one requires_grad input".into(),
        ));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    if sabotage {
        tape.sabotage_matmul_grad_for_tests();
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Domain("gradcheck function must be scalar-valued".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = vars
        .iter()
        .zip(inputs.iter())
        .map(|(&v, t)| {
            if t.requires_grad() {
                Some(tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            } else {
                None
            }
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut max_err = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for j in 0..inputs[idx].len() {
            let orig = work[idx].data()[j];
            work[idx].data_mut()[j] = orig + GRADCHECK_H;
            let plus = eval(&work)?;
            work[idx].data_mut()[j] = orig - GRADCHECK_H;
            let minus = eval(&work)?;
            work[idx].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * GRADCHECK_H);
            let a = grad[j];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
