//! Central finite-difference gradient checking.

use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Worst per-tensor relative error `|a - n| / max(|a|, |n|, ABS_FLOOR)` (L2 norms).
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

/// Gradient norms below this are treated as zero: a truly zero gradient
/// measured by differences only carries rounding noise (1e-11 to 1e-10 at h = 1e-4).
pub const ABS_FLOOR: f64 = 1e-5;

/// Relative error between two gradient vectors, measured on L2 norms.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(ABS_FLOOR)
}

/// Compare the tape's gradients of `f` against central differences with
/// step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = match tape.grad(*var) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; inputs[k].len()],
        };
        let mut numeric = vec![0.0; inputs[k].len()];
        for (i, num) in numeric.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *num = (up - down) / (2.0 * h);
        }
        per_input.push(relative_error(&analytic, &numeric));
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradReport { max_rel_err, per_input })
}

/// Uniform `[-1, 1]` tensor.
pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Deterministic non-degenerate weights used to project an op output onto a
/// scalar.
pub fn fixed_weights(shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64 + 1.0) * 0.7).sin()).collect();
    Tensor::new(shape, data).expect("length matches shape")
}
