//! Central finite-difference gradient checking in double precision.
//!
//! The numeric side only ever evaluates the forward pass, so it is independent of
//! every backward rule it checks.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::AutodiffError;

/// Comparison of analytic and numeric gradients for one input tensor.
#[derive(Clone, Debug)]
pub struct InputCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`; the absolute difference
    /// norm when both gradients are (numerically) zero.
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }
}

fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Checks `f`, which builds a scalar from leaves placed on a fresh tape, against
/// central differences with step `h` on every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut checks = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x0;
            numeric.push((plus - minus) / (2.0 * h));
        }
        let rel_error = relative_error(&analytic, &numeric);
        checks.push(InputCheck { analytic, numeric, rel_error });
    }
    Ok(GradCheckReport { inputs: checks })
}

/// Reduces any tensor to a scalar through a fixed random projection,
/// `sum(x ⊙ weights)`, so every output element contributes to the checked gradient.
pub fn project(tape: &mut Tape<f64>, x: Var, weights: &[f64]) -> Result<Var, AutodiffError> {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.constant(Tensor::new(shape, weights.to_vec())?);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}
