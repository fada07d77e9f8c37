//! Finite-difference verification of graph gradients.

use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{ensure, Result};
use crate::rng::Rng;

/// Relative difference `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn eval_scalar(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    ensure!(g.value(out).len() == 1, Shape, "checked function must return a scalar");
    Ok(g.value(out).item())
}

/// Per-input relative error between the analytic gradient of the scalar
/// `f(inputs)` and central differences with step `h`.
pub fn gradient_check(inputs: &[Tensor], h: f64, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    ensure!(g.value(out).len() == 1, Shape, "checked function must return a scalar");
    let grads = g.backward(out)?;
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|t| t.data.clone()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut probe = inputs.to_vec();
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data[j];
            probe[i].data[j] = x0 + h;
            let up = eval_scalar(&probe, &f)?;
            probe[i].data[j] = x0 - h;
            let down = eval_scalar(&probe, &f)?;
            probe[i].data[j] = x0;
            numeric[j] = (up - down) / (2.0 * h);
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Compares the analytic directional derivative of a parameterized scalar
/// loss along a random unit direction with a central difference.
/// Returns `(analytic, numeric)`.
pub fn directional_check(
    store: &ParamStore,
    h: f64,
    rng: &mut Rng,
    loss: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let grads = g.backward(out)?.param_grads(store);
    let flat_grad: Vec<f64> = grads.iter().flat_map(|t| t.data.iter().copied()).collect();
    let mut dir: Vec<f64> = (0..flat_grad.len()).map(|_| StandardNormal.sample(rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);
    let analytic: f64 = flat_grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
    let base = store.flatten();
    let at = |sign: f64| -> Result<f64> {
        let mut s = store.clone();
        let shifted: Vec<f64> = base.iter().zip(&dir).map(|(x, d)| x + sign * h * d).collect();
        s.load_flat(&shifted)?;
        let mut g = Graph::new();
        let out = loss(&mut g, &s)?;
        Ok(g.value(out).item())
    };
    let numeric = (at(1.0)? - at(-1.0)?) / (2.0 * h);
    Ok((analytic, numeric))
}
