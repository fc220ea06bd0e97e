//! Central finite-difference verification of recorded gradients.

use super::{Tape, Tensor, Var};
use crate::error::{shape_err, Result};

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(shape_err!("grad_check: function returned shape {:?}", v.shape()));
    }
    Ok(v.data()[0])
}

/// Analytic gradients of `f` at `inputs`, one tensor per input.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input{i}")).collect();
    let vars: Vec<Var> = inputs.iter().zip(&names).map(|(t, n)| tape.param(n, t)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(shape_err!("grad_check: function returned shape {:?}", tape.shape(out)));
    }
    let mut grads = if tape.requires_grad(out) { tape.backward(out)? } else { Default::default() };
    Ok(inputs
        .iter()
        .zip(&names)
        .map(|(t, n)| grads.remove(n).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Largest `|g_ad - g_fd| / max(1, |g_fd|)` over all components of all inputs.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "eps must be positive");
    let analytic = analytic_grads(&f, inputs)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, g_ad) in analytic.iter().enumerate() {
        for i in 0..probe[which].len() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let plus = eval_scalar(&f, &probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let minus = eval_scalar(&f, &probe)?;
            probe[which].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let err = (g_ad.data()[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape: &mut Tape, v: &[Var]| f(tape, v[0]), std::slice::from_ref(x), eps)
}
