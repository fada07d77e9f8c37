//! Lomb–Scargle power as a graph operation.

use super::graph::{CustomOp, Graph, Unary, Var};
use super::tensor::Tensor;
use crate::error::{ensure, Result};
use crate::grid::FrequencyGrid;
use crate::lombscargle::{periodogram_raw, periodogram_vjp_raw, FeatureOptions};
use crate::types::Mask;

/// `values [B, K, L] → power [B, K, J]` over the entries of `mask`.
pub struct LombScargleOp {
    pub timestamps: Vec<f64>,
    pub mask: Mask,
    pub grid: FrequencyGrid,
    pub center: bool,
}

impl CustomOp for LombScargleOp {
    fn name(&self) -> &str {
        "lomb_scargle"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let d = self.mask.dims();
        ensure!(x.shape == [d.samples, d.channels, d.steps], Shape, "lomb_scargle input {:?}", x.shape);
        let p = periodogram_raw(&x.data, &self.timestamps, &self.mask, &self.grid, self.center)?;
        Tensor::new(&[d.samples, d.channels, self.grid.len()], p.power)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let gx = periodogram_vjp_raw(&x.data, &self.timestamps, &self.mask, &self.grid, self.center, &grad.data)?;
        Ok(vec![Some(Tensor::new(&x.shape, gx)?)])
    }
}

impl Graph {
    pub fn lomb_scargle(&mut self, values: Var, op: LombScargleOp) -> Result<Var> {
        self.custom(&[values], Box::new(op))
    }

    /// Standardized, FAP-weighted log power: the spectral conditioning feature.
    pub fn spectral_feature(&mut self, power: Var, opts: FeatureOptions) -> Var {
        let j = self.value(power).last_dim();
        let f = self.unary(power, Unary::FapLog { j_eff: opts.j_eff_for(j), opts });
        self.standardize_last(f)
    }
}
