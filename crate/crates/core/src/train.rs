//! Self-supervised training of the fusion network and clean inference.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{DropoutMode, Tape, Tensor, Var};
use crate::contrastive::{rml_loss_on_tape, ContrastiveConfig};
use crate::data::MultiViewDataset;
use crate::error::{Result, RmlError};
use crate::fusion::{FusedBatch, FusionConfig, FusionModel, Provenance};
use crate::optim::{Adam, AdamConfig};
use crate::perturb::{draw_noise, draw_unusable, PerturbationConfig, PerturbationDraw};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// Labels of the independent random streams derived from the master seed.
pub(crate) mod streams {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const PERTURB: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const REG_PERTURB: u64 = 4;
    pub const REG_DROPOUT: u64 = 5;
    pub const HEAD_INIT: u64 = 6;
    pub const LABELS: u64 = 7;
    pub const HOST_INIT: u64 = 8;
    pub const REG_INIT: u64 = 9;
}

/// Recommended trade-off weights for the alignment term.
pub mod lambda_presets {
    pub const GENERAL: f64 = 1.0;
    /// Classification under heavy label noise.
    pub const HIGH_LABEL_NOISE: f64 = 1e3;
    /// Cross-modal retrieval hosts.
    pub const RETRIEVAL: f64 = 1e-1;
}

/// Which perturbed branches are active. A disabled branch feeds the clean
/// batch to the network instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub noise: bool,
    pub unusable: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            noise: true,
            unusable: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Mini-batch size; `None` means `min(256, N)`.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub tau: f64,
    pub lambda: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: None,
            epochs: 200,
            tau: 0.5,
            lambda: lambda_presets::GENERAL,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(RmlError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == Some(0) {
            return Err(RmlError::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(RmlError::Config("epochs must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(RmlError::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        self.contrastive().validate()
    }

    pub fn batch_for(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(256).min(n).max(1)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig::with_tau(self.tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub rml: f64,
    pub task: Option<f64>,
}

/// Per-step loss values recorded during training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The value being minimized at each step: the alignment loss, or the
    /// task loss plus the weighted alignment loss when a task is present.
    pub fn totals(&self, lambda: f64) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.task.map_or(r.rml, |t| t + lambda * r.rml))
            .collect()
    }

    pub fn rml_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.rml).collect()
    }

    /// Trailing moving average with the given window.
    pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
        let w = window.max(1);
        (0..values.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    /// Mean alignment loss of each epoch, in order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.records {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.rml;
            out[r.epoch].1 += 1;
        }
        out.into_iter().map(|(s, c)| s / c.max(1) as f64).collect()
    }

    /// Two-column `step loss` text file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| RmlError::io(path, e))?;
        for r in &self.records {
            writeln!(f, "{} {}", r.step, r.rml).map_err(|e| RmlError::io(path, e))?;
        }
        Ok(())
    }
}

/// Sample order of each epoch.
pub(crate) fn epoch_batches(n: usize, batch: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Draws for the two perturbed branches of one mini-batch.
pub(crate) fn branch_draws<T: Scalar>(
    perturb: &PerturbationConfig,
    ablation: Ablation,
    rng: &mut RngStream,
    n: usize,
    dims: &[usize],
) -> Result<(PerturbationDraw<T>, PerturbationDraw<T>)> {
    let noise = if ablation.noise {
        draw_noise(perturb, rng, n, dims)?
    } else {
        PerturbationDraw::identity(n, dims.len())
    };
    let unusable = if ablation.unusable {
        draw_unusable(perturb, rng, n, dims.len())?
    } else {
        PerturbationDraw::identity(n, dims.len())
    };
    Ok((noise, unusable))
}

/// Fuses both perturbed branches of `inputs` on the tape and returns
/// `(Z^N, Z^M)`.
pub(crate) fn perturbed_pair<T: Scalar>(
    model: &FusionModel<T>,
    tape: &mut Tape<T>,
    vars: &crate::fusion::FusionVars,
    inputs: &[Var],
    draws: &(PerturbationDraw<T>, PerturbationDraw<T>),
    mode: &mut DropoutMode<'_>,
) -> Result<(Var, Var)> {
    let noisy = draws.0.apply_on_tape(tape, inputs)?;
    let zn = model.forward_on_tape(tape, vars, &noisy, mode)?.z;
    let masked = draws.1.apply_on_tape(tape, inputs)?;
    let zm = model.forward_on_tape(tape, vars, &masked, mode)?.z;
    Ok((zn, zm))
}

pub(crate) fn model_grads<T: Scalar>(tape: &Tape<T>, vars: &[Var]) -> Vec<Tensor<T>> {
    vars.iter().map(|&v| tape.grad_tensor(v)).collect()
}

pub(crate) fn param_names<T: Scalar>(model: &FusionModel<T>) -> Vec<String> {
    model.params().into_iter().map(|(n, _)| n).collect()
}

/// Trains the fusion network by aligning noise-perturbed and
/// unusable-perturbed fused batches. Every mini-batch gets fresh
/// perturbation and dropout draws.
pub fn train_self_supervised<T: Scalar>(
    dataset: &MultiViewDataset,
    fusion_cfg: &FusionConfig,
    perturb_cfg: &PerturbationConfig,
    train_cfg: &TrainConfig,
) -> Result<(FusionModel<T>, LossTrace)> {
    train_cfg.validate()?;
    perturb_cfg.validate()?;
    if fusion_cfg.view_dims != dataset.dims() {
        return Err(RmlError::Config(format!(
            "model expects view widths {:?}, dataset has {:?}",
            fusion_cfg.view_dims,
            dataset.dims()
        )));
    }
    let master = RngStream::new(train_cfg.seed);
    let mut model = FusionModel::<T>::init(fusion_cfg.clone(), &mut master.fork(streams::INIT))?;
    let mut shuffle = master.fork(streams::SHUFFLE);
    let mut perturb_rng = master.fork(streams::PERTURB);
    let mut dropout_rng = master.fork(streams::DROPOUT);
    let mut adam = Adam::new(train_cfg.adam());
    let names = param_names(&model);
    let contrastive = train_cfg.contrastive();
    let dims = dataset.dims();
    let batch = train_cfg.batch_for(dataset.len());

    let mut trace = LossTrace::default();
    for epoch in 0..train_cfg.epochs {
        for (b, idx) in epoch_batches(dataset.len(), batch, &mut shuffle).into_iter().enumerate() {
            let xs = dataset.batch::<T>(&idx);
            let draws = branch_draws(perturb_cfg, train_cfg.ablation, &mut perturb_rng, idx.len(), &dims)?;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let inputs: Vec<Var> = xs.into_iter().map(|x| tape.constant(x)).collect();
            let mut mode = DropoutMode::Live(&mut dropout_rng);
            let (zn, zm) = perturbed_pair(&model, &mut tape, &vars, &inputs, &draws, &mut mode)?;
            let loss = rml_loss_on_tape(&mut tape, zn, zm, &contrastive)?;
            let value = tape.value(loss).data()[0].to_f64_lossy();
            if !value.is_finite() {
                return Err(RmlError::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {b}"
                )));
            }
            tape.backward(loss)?;
            let grads = model_grads(&tape, &vars.all());
            adam.step(&mut model.params_mut(), &grads, &names)?;
            trace.records.push(LossRecord {
                step: trace.records.len(),
                epoch,
                rml: value,
                task: None,
            });
        }
    }
    Ok((model, trace))
}

/// Clean fused representations of a whole dataset, computed in chunks of
/// `batch` rows (all rows at once when `None`). Dropout is disabled and no
/// random state is consumed; the result does not depend on the chunking.
pub fn infer<T: Scalar>(
    model: &FusionModel<T>,
    dataset: &MultiViewDataset,
    batch: Option<usize>,
) -> Result<FusedBatch<T>> {
    let n = dataset.len();
    let chunk = batch.unwrap_or(n).clamp(1, n.max(1));
    let d = model.config().fused_dim;
    let mut z = Vec::with_capacity(n * d);
    let idx: Vec<usize> = (0..n).collect();
    for part in idx.chunks(chunk) {
        let fused = model.forward(&dataset.batch::<T>(part), &mut DropoutMode::Off, Provenance::Clean)?;
        z.extend_from_slice(fused.z.data());
    }
    Ok(FusedBatch {
        z: Tensor::new(&[n, d], z)?,
        provenance: Provenance::Clean,
    })
}
