use paragan_autograd::Tensor;

use crate::error::{Error, Result};
use crate::nn::ParamSet;

pub const RHO: f64 = 0.9;
pub const EPS: f64 = 1e-8;

/// RMSprop: `s <- rho s + (1 - rho) g^2`, `p <- p - lr g / sqrt(s + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    acc: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        RmsProp {
            lr,
            rho: RHO,
            eps: EPS,
            acc: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn accumulators(&self) -> &[Tensor] {
        &self.acc
    }

    pub fn set_accumulators(&mut self, acc: Vec<Tensor>) -> Result<()> {
        if acc.len() != self.acc.len() || acc.iter().zip(&self.acc).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::invalid("optimizer accumulators do not match the parameters"));
        }
        self.acc = acc;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.acc.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.acc.len()
            )));
        }
        for ((id, g), s) in params
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(grads)
            .zip(&mut self.acc)
        {
            let p = params.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::invalid("gradient shape does not match its parameter"));
            }
            for ((pv, &gv), sv) in p.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
                *sv = self.rho * *sv + (1.0 - self.rho) * gv * gv;
                *pv -= self.lr * gv / (*sv + self.eps).sqrt();
            }
        }
        Ok(())
    }
}
