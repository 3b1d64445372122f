//! Central finite differences against reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_grad: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

/// Compares the analytic gradient of `Σ f(inputs) ⊙ R` (R a fixed random
/// projection) with central differences of step `eps` over every element of
/// every input.
///
/// Relative error per element is `|a − n| / max(|a|, |n|, 1e-3·max|a|)`; the
/// floor keeps components that are numerically zero from dominating.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    check_gradients_with(inputs, eps, (), |tape, _, v| f(tape, v))
}

/// [`check_gradients`] with a context (typically a parameter store) that
/// the function borrows for as long as the tape.
pub fn check_gradients_with<C, F>(inputs: &[Tensor<f64>], eps: f64, ctx: C, f: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape<f64>, &'t C, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &ctx, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let proj = Tensor::<f64>::uniform(out.shape(), 1.0, &mut rng);
    let grads = tape.backward_with(&out, proj.clone());
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    drop(grads);
    drop(out);
    drop(vars);

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::no_grad();
        let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &ctx, &vars);
        out.value()
            .data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let max_grad = analytic
        .iter()
        .map(|t| t.max_abs())
        .fold(0.0f64, f64::max);
    let floor = 1e-3 * max_grad + 1e-12;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        max_grad,
        checked: 0,
    };
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let an = a.data()[j];
            let abs = (an - numeric).abs();
            let rel = abs / an.abs().max(numeric.abs()).max(floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    report
}
