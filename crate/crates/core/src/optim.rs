//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Result, RmlError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: one pair of moment buffers per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// One update `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
    ///
    /// `names` is only used for diagnostics. A non-finite gradient aborts the
    /// step before any parameter is touched.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        names: &[String],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(RmlError::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(RmlError::shape("adam_step", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                let name = names.get(i).map_or("?", String::as_str);
                return Err(RmlError::NonFinite(format!(
                    "gradient of parameter '{name}' at step {}",
                    self.t + 1
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(RmlError::Contract(
                "parameter layout changed between Adam steps".into(),
            ));
        }
        self.t += 1;
        let b1 = T::lit(self.cfg.beta1);
        let b2 = T::lit(self.cfg.beta2);
        let lr = T::lit(self.cfg.lr);
        let eps = T::lit(self.cfg.eps);
        let c1 = T::one() - T::lit(self.cfg.beta1.powi(self.t as i32));
        let c2 = T::one() - T::lit(self.cfg.beta2.powi(self.t as i32));
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
