//! Bidirectional InfoNCE alignment between two perturbed fused batches.
//!
//! Row `i` of `Z_N` and row `i` of `Z_M` form the positive pair. Each anchor
//! is contrasted against the `2(n-1)` rows of both batches that belong to
//! other samples:
//!
//! ```text
//! L = -(1/n) sum_i log softmax_{c != anchor}(cos(z_i^N, c) / tau)[z_i^M]
//!     -(1/n) sum_i log softmax_{c != anchor}(cos(z_i^M, c) / tau)[z_i^N]
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, Tape, Tensor, Var};
use crate::error::{Result, RmlError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    /// Added to every row norm before normalizing. Zero rejects zero-norm
    /// rows instead.
    pub norm_eps: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            norm_eps: 0.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn with_tau(tau: f64) -> Self {
        Self {
            tau,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(RmlError::Config(format!(
                "temperature tau = {} must be positive",
                self.tau
            )));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(RmlError::Config("norm epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

/// `a . b / (|a| |b|)`; zero-norm vectors are rejected.
pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(RmlError::shape("cosine_sim", &[a.len()], &[b.len()]));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na <= T::zero() || nb <= T::zero() {
        return Err(RmlError::Degenerate(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Records the loss on the tape; `z_noise` and `z_unusable` are `n x d`.
pub fn rml_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    z_noise: Var,
    z_unusable: Var,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (sa, sb) = (tape.value(z_noise).shape(), tape.value(z_unusable).shape());
    if sa != sb || sa.len() != 2 {
        return Err(RmlError::shape("rml_loss", sa, sb));
    }
    let n = sa[0];
    let eps = T::lit(cfg.norm_eps);
    let un = tape.l2_normalize_rows(z_noise, eps)?;
    let um = tape.l2_normalize_rows(z_unusable, eps)?;
    let all = tape.concat_rows(un, um)?;
    let all_t = tape.transpose(all)?;
    let sims = tape.matmul(all, all_t)?;
    let logits = tape.scale(sims, T::lit(1.0 / cfg.tau));
    let targets: Vec<usize> = (0..2 * n).map(|r| if r < n { r + n } else { r - n }).collect();
    let total = tape.nll_logits(logits, &targets, true)?;
    Ok(tape.scale(total, T::one() / T::from_usize_lossy(n)))
}

/// Loss value for two fused matrices.
pub fn rml_loss<T: Scalar>(
    z_noise: &Tensor<T>,
    z_unusable: &Tensor<T>,
    cfg: &ContrastiveConfig,
) -> Result<T> {
    let mut tape = Tape::new();
    let a = tape.constant(z_noise.clone());
    let b = tape.constant(z_unusable.clone());
    let l = rml_loss_on_tape(&mut tape, a, b, cfg)?;
    Ok(tape.value(l).data()[0])
}
