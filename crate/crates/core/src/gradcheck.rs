//! Central-difference gradient verification.
//!
//! The numeric side only ever reads forward values, so it stays
//! independent of the backward rules it checks.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// max over coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    /// `(param index, flat coordinate)` where the maximum occurred
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

/// Compares backward gradients of the scalar built by `f` against central
/// differences with step `eps` for every coordinate of every param.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!(
            "eps must lie in (0, 1e-2], got {eps}"
        )));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let value = g.scalar_value(loss)?;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("f returned {value}")));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for pi in 0..params.len() {
        let mut num = vec![0.0; params[pi].len()];
        for ci in 0..params[pi].len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[ci] = orig;

            let n = (plus - minus) / (2.0 * eps);
            let rel = (analytic[pi][ci] - n).abs() / n.abs().max(1.0);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = (pi, ci);
            }
            num[ci] = n;
        }
        numeric.push(num);
    }
    Ok(GradCheck {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.scalar_value(out)?;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("f returned {v}")));
    }
    Ok(v)
}
