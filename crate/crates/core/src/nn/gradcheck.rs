//! Central finite-difference checks against the reverse pass.

use super::graph::{Graph, Var};
use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::Result;

/// Relative error with an absolute floor so near-zero gradients do not
/// blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn eval<F>(params: &ParameterSet, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    Ok(g.value(out).item())
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every scalar of every parameter in `groups`.
pub fn check_param_grads<F>(params: &ParameterSet, groups: &[&str], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    let back = g.backward(out)?;
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (id, p) in params.iter() {
        if !groups.contains(&p.group.as_str()) {
            continue;
        }
        let analytic = back.grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value.numel()]);
        for i in 0..p.value.numel() {
            let orig = p.value.data[i];
            probe.value_mut(id).data[i] = orig + h;
            let up = eval(&probe, &f)?;
            probe.value_mut(id).data[i] = orig - h;
            let down = eval(&probe, &f)?;
            probe.value_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}

/// Same check for the gradient with respect to a single input tensor.
pub fn check_input_grad<F>(x: &Tensor, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let run = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xi = g.input(t.clone());
        let out = f(&mut g, xi)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let out = f(&mut g, xi)?;
    let analytic = g.backward(out)?.wrt(&g, xi);
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        probe.data[i] = x.data[i] + h;
        let up = run(&probe)?;
        probe.data[i] = x.data[i] - h;
        let down = run(&probe)?;
        probe.data[i] = x.data[i];
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}
