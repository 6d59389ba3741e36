//! Simulated perturbations of multi-view batches.
//!
//! * Noise: every (sample, view) cell independently receives additive
//!   Gaussian noise `N(0, sigma^2)` (coordinatewise) with probability `p`.
//! * Unusable: exactly `round(r * n)` samples lose a non-empty proper subset
//!   of their views, which are replaced by zero vectors. At least one view of
//!   every sample always survives.
//!
//! A draw is sampled first and applied second, so the same realization can
//! be replayed (gradient checks) or applied on a tape (regularizer inputs).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Result, RmlError};
use crate::rng::RngStream;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Probability that a (sample, view) cell is noised.
    pub p: f64,
    /// Noise standard deviation.
    pub sigma: f64,
    /// Fraction of samples with unusable views.
    pub r: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            p: 0.25,
            sigma: 0.4,
            r: 0.25,
        }
    }
}

impl PerturbationConfig {
    pub fn new(p: f64, sigma: f64, r: f64) -> Result<Self> {
        let cfg = Self { p, sigma, r };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(RmlError::Config(format!(
                "noise ratio p = {} must lie in [0,1]",
                self.p
            )));
        }
        if !(0.0..=1.0).contains(&self.r) {
            return Err(RmlError::Config(format!(
                "unusable ratio r = {} must lie in [0,1]",
                self.r
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(RmlError::Config(format!(
                "noise scale sigma = {} must be positive",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Number of samples that lose views in a batch of `n`.
    pub fn unusable_count(&self, n: usize) -> usize {
        (self.r * n as f64).round() as usize
    }
}

/// Gaussian noise realized for one (sample, view) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCell<T> {
    pub sample: usize,
    pub view: usize,
    pub noise: Vec<T>,
}

/// One realized perturbation of an `n`-sample, `V`-view batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationDraw<T> {
    pub n: usize,
    pub views: usize,
    /// Uniform draws per cell (`n x V`, row-major); empty if no noise was drawn.
    pub delta: Vec<f64>,
    /// Noise vectors for the cells with `delta < p` only.
    pub epsilon: Vec<NoiseCell<T>>,
    /// Availability matrix `B` (`n x V`, row-major): false marks a zeroed view.
    pub mask: Vec<bool>,
}

impl<T: Scalar> PerturbationDraw<T> {
    /// The draw that changes nothing.
    pub fn identity(n: usize, views: usize) -> Self {
        Self {
            n,
            views,
            delta: Vec::new(),
            epsilon: Vec::new(),
            mask: vec![true; n * views],
        }
    }

    pub fn available(&self, sample: usize, view: usize) -> bool {
        self.mask[sample * self.views + view]
    }

    /// Samples that lost at least one view.
    pub fn unusable_samples(&self) -> usize {
        self.mask
            .chunks(self.views)
            .filter(|row| row.iter().any(|&a| !a))
            .count()
    }

    pub fn is_identity(&self) -> bool {
        self.epsilon.is_empty() && self.mask.iter().all(|&a| a)
    }

    fn check(&self, shapes: &[&[usize]]) -> Result<()> {
        if shapes.len() != self.views || shapes.iter().any(|s| s[0] != self.n) {
            return Err(RmlError::Contract(format!(
                "draw for {} samples x {} views applied to a batch of {} views",
                self.n,
                self.views,
                shapes.len()
            )));
        }
        for cell in &self.epsilon {
            let cols = shapes[cell.view][1..].iter().product::<usize>();
            if cell.noise.len() != cols {
                return Err(RmlError::ViewShape {
                    view: cell.view,
                    expected: cell.noise.len(),
                    got: cols,
                });
            }
        }
        Ok(())
    }

    /// Applies noise, then the availability mask. The input is not modified.
    pub fn apply(&self, batch: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let shapes: Vec<&[usize]> = batch.iter().map(|t| t.shape()).collect();
        self.check(&shapes)?;
        let mut out: Vec<Tensor<T>> = batch.to_vec();
        for cell in &self.epsilon {
            let t = &mut out[cell.view];
            let c = t.cols();
            let row = &mut t.data_mut()[cell.sample * c..(cell.sample + 1) * c];
            for (x, &e) in row.iter_mut().zip(&cell.noise) {
                *x = *x + e;
            }
        }
        for (m, t) in out.iter_mut().enumerate() {
            let c = t.cols();
            for i in 0..self.n {
                if !self.available(i, m) {
                    t.data_mut()[i * c..(i + 1) * c].fill(T::zero());
                }
            }
        }
        Ok(out)
    }

    /// Applies the draw to tape values so gradients flow back to the inputs.
    pub fn apply_on_tape(&self, tape: &mut Tape<T>, views: &[Var]) -> Result<Vec<Var>> {
        let shapes: Vec<Vec<usize>> = views.iter().map(|&v| tape.value(v).shape().to_vec()).collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        self.check(&shape_refs)?;
        let mut out = Vec::with_capacity(views.len());
        for (m, (&x, shape)) in views.iter().zip(&shapes).enumerate() {
            let c = shape[1..].iter().product::<usize>();
            let mut y = x;
            let cells: Vec<&NoiseCell<T>> = self.epsilon.iter().filter(|e| e.view == m).collect();
            if !cells.is_empty() {
                let mut noise = Tensor::zeros(shape);
                for cell in cells {
                    noise.data_mut()[cell.sample * c..(cell.sample + 1) * c]
                        .copy_from_slice(&cell.noise);
                }
                let nv = tape.constant(noise);
                y = tape.add(y, nv)?;
            }
            if (0..self.n).any(|i| !self.available(i, m)) {
                let mut keep = Tensor::ones(shape);
                for i in (0..self.n).filter(|&i| !self.available(i, m)) {
                    keep.data_mut()[i * c..(i + 1) * c].fill(T::zero());
                }
                let kv = tape.constant(keep);
                y = tape.mul(y, kv)?;
            }
            out.push(y);
        }
        Ok(out)
    }
}

/// Samples the noise part of a draw for a batch of `n` rows with the given
/// per-view widths.
pub fn draw_noise<T: Scalar>(
    cfg: &PerturbationConfig,
    rng: &mut RngStream,
    n: usize,
    dims: &[usize],
) -> Result<PerturbationDraw<T>> {
    cfg.validate()?;
    let views = dims.len();
    let mut draw = PerturbationDraw::identity(n, views);
    draw.delta = Vec::with_capacity(n * views);
    for i in 0..n {
        for (m, &dm) in dims.iter().enumerate() {
            let delta = rng.uniform();
            draw.delta.push(delta);
            if delta < cfg.p {
                let noise = (0..dm).map(|_| T::lit(cfg.sigma * rng.normal())).collect();
                draw.epsilon.push(NoiseCell {
                    sample: i,
                    view: m,
                    noise,
                });
            }
        }
    }
    Ok(draw)
}

/// Samples the availability mask of a draw.
pub fn draw_unusable<T: Scalar>(
    cfg: &PerturbationConfig,
    rng: &mut RngStream,
    n: usize,
    views: usize,
) -> Result<PerturbationDraw<T>> {
    cfg.validate()?;
    if cfg.r > 0.0 && views < 2 {
        return Err(RmlError::Infeasible(format!(
            "r = {} needs at least 2 views: every sample must keep one available view \
             while a fraction r of samples loses at least one",
            cfg.r
        )));
    }
    let mut draw = PerturbationDraw::identity(n, views);
    let count = cfg.unusable_count(n).min(n);
    for i in rng.sample_indices(n, count) {
        let k = rng.range_inclusive(1, views - 1);
        for m in rng.sample_indices(views, k) {
            draw.mask[i * views + m] = false;
        }
    }
    Ok(draw)
}

/// Fresh draw with both noise and availability parts.
pub fn resample<T: Scalar>(
    cfg: &PerturbationConfig,
    rng: &mut RngStream,
    n: usize,
    dims: &[usize],
) -> Result<PerturbationDraw<T>> {
    let mut draw = draw_noise(cfg, rng, n, dims)?;
    draw.mask = draw_unusable::<T>(cfg, rng, n, dims.len())?.mask;
    Ok(draw)
}

fn batch_dims<T: Scalar>(batch: &[Tensor<T>]) -> Result<(usize, Vec<usize>)> {
    let n = batch
        .first()
        .map(Tensor::rows)
        .ok_or_else(|| RmlError::Contract("empty batch".into()))?;
    if let Some(m) = batch.iter().position(|t| t.rows() != n) {
        return Err(RmlError::Data(format!(
            "view {m} has {} rows, view 0 has {n}",
            batch[m].rows()
        )));
    }
    Ok((n, batch.iter().map(Tensor::cols).collect()))
}

/// Noise perturbation `S^N_{p,sigma}`.
pub fn noise_perturb<T: Scalar>(
    batch: &[Tensor<T>],
    cfg: &PerturbationConfig,
    rng: &mut RngStream,
) -> Result<(Vec<Tensor<T>>, PerturbationDraw<T>)> {
    let (n, dims) = batch_dims(batch)?;
    let draw = draw_noise(cfg, rng, n, &dims)?;
    Ok((draw.apply(batch)?, draw))
}

/// Unusable perturbation `S^M_r`.
pub fn unusable_perturb<T: Scalar>(
    batch: &[Tensor<T>],
    cfg: &PerturbationConfig,
    rng: &mut RngStream,
) -> Result<(Vec<Tensor<T>>, PerturbationDraw<T>)> {
    let (n, _) = batch_dims(batch)?;
    let draw = draw_unusable(cfg, rng, n, batch.len())?;
    Ok((draw.apply(batch)?, draw))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize) -> Vec<Tensor<f64>> {
        let a: Vec<f64> = (0..n * 3).map(|i| i as f64 + 0.5).collect();
        let b: Vec<f64> = (0..n * 2).map(|i| -(i as f64) - 0.25).collect();
        vec![
            Tensor::new(&[n, 3], a).unwrap(),
            Tensor::new(&[n, 2], b).unwrap(),
        ]
    }

    #[test]
    fn config_bounds() {
        assert!(PerturbationConfig::new(1.5, 0.4, 0.2).is_err());
        assert!(PerturbationConfig::new(0.2, 0.0, 0.2).is_err());
        assert!(PerturbationConfig::new(0.2, 0.4, -0.1).is_err());
        assert!(PerturbationConfig::new(1.0, 0.4, 1.0).is_ok());
    }

    #[test]
    fn zero_ratios_are_identity() {
        let x = batch(8);
        let cfg = PerturbationConfig::new(0.0, 0.4, 0.0).unwrap();
        let mut rng = RngStream::new(1);
        let (n, d) = noise_perturb(&x, &cfg, &mut rng).unwrap();
        assert_eq!(n, x);
        assert!(d.is_identity());
        let (m, d) = unusable_perturb(&x, &cfg, &mut rng).unwrap();
        assert_eq!(m, x);
        assert!(d.is_identity());
        let draw = resample::<f64>(&cfg, &mut rng, 8, &[3, 2]).unwrap();
        assert!(draw.is_identity());
    }

    #[test]
    fn single_view_with_positive_r_is_infeasible() {
        let x = vec![Tensor::<f64>::ones(&[4, 3])];
        let cfg = PerturbationConfig::new(0.0, 0.4, 0.25).unwrap();
        let err = unusable_perturb(&x, &cfg, &mut RngStream::new(0)).unwrap_err();
        assert!(matches!(err, RmlError::Infeasible(_)));
        let cfg = PerturbationConfig::new(0.0, 0.4, 0.0).unwrap();
        assert!(unusable_perturb(&x, &cfg, &mut RngStream::new(0)).is_ok());
    }

    #[test]
    fn two_views_full_ratio_drops_exactly_one_view() {
        let x = batch(100);
        let cfg = PerturbationConfig::new(0.0, 0.4, 1.0).unwrap();
        let (_, d) = unusable_perturb(&x, &cfg, &mut RngStream::new(3)).unwrap();
        for row in d.mask.chunks(2) {
            assert_eq!(row.iter().filter(|&&a| a).count(), 1);
        }
    }

    #[test]
    fn zeroed_views_are_zero_and_others_untouched() {
        let x = batch(20);
        let cfg = PerturbationConfig::new(0.0, 0.4, 0.5).unwrap();
        let (m, d) = unusable_perturb(&x, &cfg, &mut RngStream::new(4)).unwrap();
        assert_eq!(d.unusable_samples(), 10);
        for v in 0..2 {
            for i in 0..20 {
                if d.available(i, v) {
                    assert_eq!(m[v].row(i), x[v].row(i));
                } else {
                    assert!(m[v].row(i).iter().all(|&e| e == 0.0));
                }
            }
        }
    }

    #[test]
    fn tape_application_matches_direct_application() {
        let x = batch(6);
        let cfg = PerturbationConfig::new(0.5, 0.4, 0.5).unwrap();
        let draw = resample::<f64>(&cfg, &mut RngStream::new(8), 6, &[3, 2]).unwrap();
        let direct = draw.apply(&x).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = x.iter().map(|t| tape.param(t.clone())).collect();
        let out = draw.apply_on_tape(&mut tape, &vars).unwrap();
        for (o, d) in out.iter().zip(&direct) {
            assert_eq!(tape.value(*o), d);
        }
    }

    #[test]
    fn same_rng_state_gives_identical_draw() {
        let cfg = PerturbationConfig::default();
        let rng = RngStream::new(11);
        let a = resample::<f64>(&cfg, &mut rng.clone(), 16, &[3, 2]).unwrap();
        let b = resample::<f64>(&cfg, &mut rng.clone(), 16, &[3, 2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn advanced_rng_gives_different_draw() {
        let cfg = PerturbationConfig::default();
        let mut rng = RngStream::new(12);
        let a = resample::<f64>(&cfg, &mut rng, 32, &[3, 2]).unwrap();
        let b = resample::<f64>(&cfg, &mut rng, 32, &[3, 2]).unwrap();
        assert_ne!(a.delta, b.delta);
        assert_ne!(a, b);
    }
}
