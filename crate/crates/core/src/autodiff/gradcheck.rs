//! Central finite-difference oracle for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Step used by the gradient checks throughout the crate.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Loss builder: records a scalar loss on `tape` from parameter handles.
pub trait ScalarFn: Fn(&mut Tape, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape, &[Var]) -> Result<Var>> ScalarFn for F {}

fn evaluate(f: &impl ScalarFn, params: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    Ok(v.item())
}

/// Value and tape gradient of `f` at `params`.
pub fn analytic_gradient(f: &impl ScalarFn, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|v| grads.wrt(*v)).collect()))
}

/// Central differences `(f(p + h) - f(p - h)) / 2h`, one coordinate at a time.
pub fn numeric_gradient(f: &impl ScalarFn, params: &[Tensor], step: f64) -> Result<Vec<Tensor>> {
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].shape().to_vec());
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let plus = evaluate(f, &work)?;
            work[pi].data_mut()[j] = orig - step;
            let minus = evaluate(f, &work)?;
            work[pi].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Max over all coordinates of `|a - n| / max(1e-12, |a| + |n|)`.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Compares tape gradients of `f` against central differences and returns
/// the max relative error.
pub fn finite_diff_check(f: &impl ScalarFn, params: &[Tensor], step: f64) -> Result<f64> {
    let (_, analytic) = analytic_gradient(f, params)?;
    let numeric = numeric_gradient(f, params, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}
