use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { cfg, t: 0, m: zeros(), v: zeros() }
    }

    /// One bias-corrected update. Fails without touching the parameters if a
    /// gradient or an updated value is not finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        ensure!(grads.len() == store.len(), Shape, "{} gradients for {} parameters", grads.len(), store.len());
        for (p, g) in store.iter().zip(grads) {
            ensure!(p.value.shape == g.shape, Shape, "{}: gradient shape {:?}", p.name, g.shape);
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let t = self.t + 1;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        let mut next = Vec::with_capacity(store.len());
        let mut m_next = self.m.clone();
        let mut v_next = self.v.clone();
        for (i, (p, g)) in store.iter().zip(grads).enumerate() {
            let mut vals = p.value.data.clone();
            for j in 0..vals.len() {
                let gj = g.data[j];
                m_next[i][j] = beta1 * m_next[i][j] + (1.0 - beta1) * gj;
                v_next[i][j] = beta2 * v_next[i][j] + (1.0 - beta2) * gj * gj;
                let mh = m_next[i][j] / bc1;
                let vh = v_next[i][j] / bc2;
                vals[j] -= lr * mh / (vh.sqrt() + eps);
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {} after update", p.name)));
            }
            next.push(vals);
        }
        for (p, vals) in store.iter_mut().zip(next) {
            p.value.data = vals;
        }
        self.m = m_next;
        self.v = v_next;
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::Init;
    use crate::rng::seeded;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", &[1], Init::Zeros, &mut seeded(0));
        s.get_mut(id).value.data[0] = w;
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(0.7);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.step(&mut s, &[Tensor::zeros(&[1])]).unwrap();
        assert_eq!(s.flatten(), vec![0.7]);
    }

    #[test]
    fn quadratic_descends() {
        let mut s = scalar_store(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        let g = 2.0 * s.flatten()[0];
        opt.step(&mut s, &[Tensor::new(&[1], vec![g]).unwrap()]).unwrap();
        assert!(s.flatten()[0].abs() < 1.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut s = scalar_store(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        assert!(opt.step(&mut s, &[Tensor::new(&[1], vec![f64::NAN]).unwrap()]).is_err());
        assert_eq!(s.flatten(), vec![1.0]);
        assert_eq!(opt.t, 0);
    }
}
