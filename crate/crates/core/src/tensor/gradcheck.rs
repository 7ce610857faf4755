//! Central finite-difference verification of autodiff gradients.

use super::{backward, no_grad, ParamStore, Result, Tensor, TensorError};

/// Relative error used throughout the gradient checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the autodiff gradient of the scalar `f(inputs)` against central
/// differences `(f(x+h) − f(x−h)) / 2h` for every entry of every input, and
/// returns the largest relative error.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.detach().requires_grad()).collect();
    let loss = f(&tracked)?;
    if loss.numel() != 1 {
        return Err(TensorError::Contract("gradient check needs a scalar function".into()));
    }
    let grads = backward(&loss)?;
    drop(loss);

    let mut worst = 0.0f64;
    for (which, input) in tracked.iter().enumerate() {
        let analytic = grads.wrt(input);
        for k in 0..input.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let shifted: Vec<Tensor> = tracked
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j != which {
                            return Ok(t.detach());
                        }
                        let mut v = t.to_vec();
                        v[k] += delta;
                        Tensor::new(t.dims(), v)
                    })
                    .collect::<Result<_>>()?;
                no_grad(|| f(&shifted)).map(|t| t.item())
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Same comparison as [`finite_diff_check`], over every value of every
/// parameter in `store`.
pub fn check_params<F>(store: &ParamStore, f: F, h: f64) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<Tensor>,
{
    let loss = f(store)?;
    let grads = backward(&loss)?;
    drop(loss);
    let mut worst = 0.0f64;
    for id in store.ids() {
        let param = store.get(id);
        let analytic = grads.wrt(param);
        let name = store.name(id).to_string();
        let dims = param.dims().to_vec();
        let base = param.to_vec();
        for k in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut shifted = store.clone();
                let mut v = base.clone();
                v[k] += delta;
                shifted.set(&name, &dims, &v)?;
                no_grad(|| f(&shifted)).map(|t| t.item())
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
    }
    Ok(worst)
}
