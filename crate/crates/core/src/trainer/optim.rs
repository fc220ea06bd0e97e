use crate::autodiff::{GradMap, Tensor};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// `base_lr * (1 - iter / max_iters)^power`.
pub fn poly_lr(iter: usize, max_iters: usize, base_lr: f64, power: f64) -> Result<f64> {
    if max_iters == 0 || iter > max_iters {
        return Err(Error::Domain(format!("poly_lr: iteration {iter} outside 0..={max_iters}")));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iters as f64).powf(power))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdHyper {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, created at zero on first use, and the step counter of
/// the current phase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub velocity: ParamStore,
    pub iter: usize,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// `g' = g + wd * theta; v = mu * v + g'; theta -= lr * v` for every name in
/// `active`. Parameters outside `active` are left untouched.
pub fn sgd_step<'a>(
    params: &mut ParamStore,
    grads: &GradMap,
    state: &mut OptimizerState,
    active: impl IntoIterator<Item = &'a str>,
    lr: f64,
    hyper: SgdHyper,
) -> Result<()> {
    let active: Vec<&str> = active.into_iter().collect();
    for &name in &active {
        let g = grads.get(name).ok_or_else(|| Error::MissingParam(format!("{name} (no gradient this step)")))?;
        let p = params.get(name)?;
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!("sgd: gradient {:?} for {name} {:?}", g.shape(), p.shape())));
        }
        if let Ok(v) = state.velocity.get(name) {
            if v.shape() != p.shape() {
                return Err(Error::Shape(format!("sgd: velocity {:?} for {name} {:?}", v.shape(), p.shape())));
            }
        }
    }
    for name in active {
        let g = &grads[name];
        if !state.velocity.contains(name) {
            state.velocity.insert(name, Tensor::zeros(g.shape()));
        }
        let v = state.velocity.get_mut(name)?;
        let theta = params.get_mut(name)?;
        for ((t, vv), gv) in theta.data_mut().iter_mut().zip(v.data_mut().iter_mut()).zip(g.data()) {
            *vv = hyper.momentum * *vv + (gv + hyper.weight_decay * *t);
            *t -= lr * *vv;
        }
    }
    state.iter += 1;
    Ok(())
}
