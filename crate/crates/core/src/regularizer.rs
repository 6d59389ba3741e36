//! The alignment objective as a plug-in regularizer for host models.
//!
//! A host splits into a representation module (parameters `theta_l`) that
//! produces per-view hidden matrices `H^1..H^V` and a task module
//! (`theta_t`). The regularizer perturbs the `H^m`, fuses both perturbed
//! versions with its own fusion network (`theta_f`) and returns the
//! alignment loss. Training minimizes `L_task + lambda * L_rml`, so
//! `theta_t` only ever sees the task gradient, `theta_f` only the
//! alignment gradient and `theta_l` both.

use crate::autodiff::{DropoutMode, Tape, Tensor, Var};
use crate::contrastive::{rml_loss_on_tape, ContrastiveConfig};
use crate::data::MultiViewDataset;
use crate::error::{Result, RmlError};
use crate::fusion::{FusionConfig, FusionModel, FusionVars};
use crate::optim::Adam;
use crate::perturb::{PerturbationConfig, PerturbationDraw};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::train::{
    branch_draws, epoch_batches, model_grads, param_names, perturbed_pair, streams, Ablation,
    LossRecord, LossTrace, TrainConfig,
};

fn check_hidden<T: Scalar>(tape: &Tape<T>, hidden: &[Var], model: &FusionModel<T>) -> Result<usize> {
    let shapes: Vec<&[usize]> = hidden.iter().map(|&h| tape.value(h).shape()).collect();
    model.check_batch(&shapes)
}

/// Alignment loss of the hidden representations under a fixed pair of
/// draws `(noise, unusable)`.
#[allow(clippy::too_many_arguments)]
pub fn regularizer_loss_with_draws<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: &[Var],
    reg_model: &FusionModel<T>,
    reg_vars: &FusionVars,
    draws: &(PerturbationDraw<T>, PerturbationDraw<T>),
    contrastive: &ContrastiveConfig,
    mode: &mut DropoutMode<'_>,
) -> Result<Var> {
    check_hidden(tape, hidden, reg_model)?;
    let (zn, zm) = perturbed_pair(reg_model, tape, reg_vars, hidden, draws, mode)?;
    rml_loss_on_tape(tape, zn, zm, contrastive)
}

/// Alignment loss of the hidden representations with fresh draws from
/// `perturb_rng`.
#[allow(clippy::too_many_arguments)]
pub fn regularizer_loss<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: &[Var],
    reg_model: &FusionModel<T>,
    reg_vars: &FusionVars,
    perturb_cfg: &PerturbationConfig,
    contrastive: &ContrastiveConfig,
    perturb_rng: &mut RngStream,
    mode: &mut DropoutMode<'_>,
) -> Result<Var> {
    let n = check_hidden(tape, hidden, reg_model)?;
    let draws = branch_draws(
        perturb_cfg,
        Ablation::default(),
        perturb_rng,
        n,
        &reg_model.config().view_dims,
    )?;
    regularizer_loss_with_draws(tape, hidden, reg_model, reg_vars, &draws, contrastive, mode)
}

/// Regularizer state: its fusion network, optimizer and private random
/// streams.
#[derive(Debug, Clone)]
pub struct RmlRegularizer<T> {
    pub model: FusionModel<T>,
    perturb: PerturbationConfig,
    contrastive: ContrastiveConfig,
    perturb_rng: RngStream,
    dropout_rng: RngStream,
    adam: Adam<T>,
    names: Vec<String>,
}

impl<T: Scalar> RmlRegularizer<T> {
    /// Random streams are derived from `seed` and never shared with the host.
    pub fn new(
        fusion_cfg: FusionConfig,
        perturb: PerturbationConfig,
        train_cfg: &TrainConfig,
    ) -> Result<Self> {
        perturb.validate()?;
        let master = RngStream::new(train_cfg.seed);
        let model = FusionModel::init(fusion_cfg, &mut master.fork(streams::REG_INIT))?;
        let names = param_names(&model);
        Ok(Self {
            model,
            perturb,
            contrastive: train_cfg.contrastive(),
            perturb_rng: master.fork(streams::REG_PERTURB),
            dropout_rng: master.fork(streams::REG_DROPOUT),
            adam: Adam::new(train_cfg.adam()),
            names,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> FusionVars {
        self.model.bind(tape)
    }

    pub fn loss_on_tape(&mut self, tape: &mut Tape<T>, vars: &FusionVars, hidden: &[Var]) -> Result<Var> {
        let mut mode = DropoutMode::Live(&mut self.dropout_rng);
        regularizer_loss(
            tape,
            hidden,
            &self.model,
            vars,
            &self.perturb,
            &self.contrastive,
            &mut self.perturb_rng,
            &mut mode,
        )
    }

    /// Applies the accumulated gradients of `vars` to the fusion network.
    pub fn step(&mut self, tape: &Tape<T>, vars: &FusionVars) -> Result<()> {
        let grads = model_grads(tape, &vars.all());
        self.adam.step(&mut self.model.params_mut(), &grads, &self.names)
    }
}

/// Toy host: one linear encoder per view (`theta_l`) producing `H^m`, and a
/// linear decoder per view (`theta_t`) reconstructing the input. The task
/// loss is the mean squared reconstruction error averaged over views.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAutoencoderHost<T> {
    pub encoders: Vec<Tensor<T>>,
    pub decoders: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct HostVars {
    pub encoders: Vec<Var>,
    pub decoders: Vec<Var>,
}

impl<T: Scalar> LinearAutoencoderHost<T> {
    pub fn init(view_dims: &[usize], hidden: usize, rng: &mut RngStream) -> Result<Self> {
        if hidden == 0 || view_dims.is_empty() || view_dims.contains(&0) {
            return Err(RmlError::Config("host widths must be positive".into()));
        }
        let mut mat = |r: usize, c: usize| {
            let b = 1.0 / (r as f64).sqrt();
            let data = (0..r * c).map(|_| T::lit((2.0 * rng.uniform() - 1.0) * b)).collect();
            Tensor::new(&[r, c], data)
        };
        let encoders = view_dims.iter().map(|&d| mat(d, hidden)).collect::<Result<_>>()?;
        let decoders = view_dims.iter().map(|&d| mat(hidden, d)).collect::<Result<_>>()?;
        Ok(Self { encoders, decoders })
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.encoders.iter().map(|e| e.shape()[1]).collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> HostVars {
        HostVars {
            encoders: self.encoders.iter().map(|e| tape.param(e.clone())).collect(),
            decoders: self.decoders.iter().map(|d| tape.param(d.clone())).collect(),
        }
    }

    /// `H^m = X^m W_enc^m`.
    pub fn hidden_on_tape(&self, tape: &mut Tape<T>, vars: &HostVars, inputs: &[Var]) -> Result<Vec<Var>> {
        inputs
            .iter()
            .zip(&vars.encoders)
            .map(|(&x, &w)| tape.matmul(x, w))
            .collect()
    }

    pub fn task_loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &HostVars,
        hidden: &[Var],
        inputs: &[Var],
    ) -> Result<Var> {
        let mut total: Option<Var> = None;
        for ((&h, &w), &x) in hidden.iter().zip(&vars.decoders).zip(inputs) {
            let rec = tape.matmul(h, w)?;
            let diff = tape.sub(rec, x)?;
            let sq = tape.mul(diff, diff)?;
            let err = tape.mean(sq);
            total = Some(match total {
                Some(t) => tape.add(t, err)?,
                None => err,
            });
        }
        let total = total.ok_or_else(|| RmlError::Contract("host has no views".into()))?;
        Ok(tape.scale(total, T::one() / T::from_usize_lossy(hidden.len())))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.encoders.iter_mut().chain(self.decoders.iter_mut()).collect()
    }

    fn names(&self) -> Vec<String> {
        (0..self.encoders.len())
            .map(|m| format!("host.enc{m}"))
            .chain((0..self.decoders.len()).map(|m| format!("host.dec{m}")))
            .collect()
    }
}

/// Host trained jointly with an optional regularizer.
#[derive(Debug, Clone)]
pub struct JointTrainer<T> {
    pub host: LinearAutoencoderHost<T>,
    pub regularizer: Option<RmlRegularizer<T>>,
    lambda: f64,
    adam: Adam<T>,
}

/// Losses of one joint step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointStep {
    pub task: f64,
    pub rml: Option<f64>,
}

impl<T: Scalar> JointTrainer<T> {
    /// Host parameters come from the host stream of `train_cfg.seed`; the
    /// regularizer (if any) uses its own streams.
    pub fn new(
        view_dims: &[usize],
        hidden: usize,
        regularizer: Option<(FusionConfig, PerturbationConfig)>,
        train_cfg: &TrainConfig,
    ) -> Result<Self> {
        train_cfg.validate()?;
        let master = RngStream::new(train_cfg.seed);
        let host = LinearAutoencoderHost::init(view_dims, hidden, &mut master.fork(streams::HOST_INIT))?;
        let regularizer = regularizer
            .map(|(fc, pc)| {
                if fc.view_dims != host.hidden_dims() {
                    return Err(RmlError::Config(format!(
                        "regularizer expects widths {:?}, host produces {:?}",
                        fc.view_dims,
                        host.hidden_dims()
                    )));
                }
                RmlRegularizer::new(fc, pc, train_cfg)
            })
            .transpose()?;
        Ok(Self {
            host,
            regularizer,
            lambda: train_cfg.lambda,
            adam: Adam::new(train_cfg.adam()),
        })
    }

    /// One update on a mini-batch.
    pub fn step(&mut self, batch: &[Tensor<T>]) -> Result<JointStep> {
        let mut tape = Tape::new();
        let hv = self.host.bind(&mut tape);
        let inputs: Vec<Var> = batch.iter().map(|x| tape.constant(x.clone())).collect();
        let hidden = self.host.hidden_on_tape(&mut tape, &hv, &inputs)?;
        let task = self.host.task_loss_on_tape(&mut tape, &hv, &hidden, &inputs)?;
        let mut rml = None;
        let mut reg_vars = None;
        let total = match &mut self.regularizer {
            Some(reg) => {
                let rv = reg.bind(&mut tape);
                let r = reg.loss_on_tape(&mut tape, &rv, &hidden)?;
                rml = Some(tape.value(r).data()[0].to_f64_lossy());
                reg_vars = Some(rv);
                let weighted = tape.scale(r, T::lit(self.lambda));
                tape.add(task, weighted)?
            }
            None => task,
        };
        let task_value = tape.value(task).data()[0].to_f64_lossy();
        if !tape.value(total).data()[0].is_finite() {
            return Err(RmlError::NonFinite("joint training loss".into()));
        }
        tape.backward(total)?;
        let host_vars: Vec<Var> = hv.encoders.iter().chain(&hv.decoders).copied().collect();
        let grads = model_grads(&tape, &host_vars);
        let names = self.host.names();
        self.adam.step(&mut self.host.params_mut(), &grads, &names)?;
        if let (Some(reg), Some(rv)) = (&mut self.regularizer, &reg_vars) {
            reg.step(&tape, rv)?;
        }
        Ok(JointStep {
            task: task_value,
            rml,
        })
    }

    /// Runs `epochs` over the dataset with its own shuffle stream.
    pub fn fit(&mut self, dataset: &MultiViewDataset, train_cfg: &TrainConfig) -> Result<LossTrace> {
        let mut shuffle = RngStream::new(train_cfg.seed).fork(streams::SHUFFLE);
        let batch = train_cfg.batch_for(dataset.len());
        let mut trace = LossTrace::default();
        for epoch in 0..train_cfg.epochs {
            for idx in epoch_batches(dataset.len(), batch, &mut shuffle) {
                let s = self.step(&dataset.batch::<T>(&idx))?;
                trace.records.push(LossRecord {
                    step: trace.records.len(),
                    epoch,
                    rml: s.rml.unwrap_or(0.0),
                    task: Some(s.task),
                });
            }
        }
        Ok(trace)
    }
}
