//! Finite-difference checks of the full training objectives.
//!
//! Every case draws a random model, batch and labels, freezes the
//! perturbation and dropout draws, and compares the analytic gradient with
//! respect to every parameter against central differences.

use crate::autodiff::{grad_check, DropoutMode, FrozenMasks, GradCheckReport, Objective, Tape, Tensor, Var};
use crate::contrastive::{rml_loss_on_tape, ContrastiveConfig};
use crate::error::Result;
use crate::fusion::{FusionConfig, FusionModel};
use crate::perturb::{draw_noise, draw_unusable, PerturbationConfig, PerturbationDraw};
use crate::rng::RngStream;
use crate::tasks::classify::{classifier_loss_on_tape, ClassifierHead, LossKind, ObjectiveInputs};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub view_dims: Vec<usize>,
    pub token_dim: usize,
    pub fused_dim: usize,
    pub batch: usize,
    pub classes: usize,
    pub lambda: f64,
    pub step: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            view_dims: vec![5, 7, 4],
            token_dim: 8,
            fused_dim: 8,
            batch: 4,
            classes: 3,
            lambda: 1.0,
            step: 1e-5,
            tol: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type Draws = (PerturbationDraw<f64>, PerturbationDraw<f64>);

struct FullObjective {
    model: FusionModel<f64>,
    head: ClassifierHead<f64>,
    batch: Vec<Tensor<f64>>,
    labels: Vec<usize>,
    draws: Draws,
    masks: FrozenMasks,
    /// `None` checks the alignment loss alone.
    task: Option<LossKind>,
    lambda: f64,
    contrastive: ContrastiveConfig,
}

impl FullObjective {
    fn eval(&mut self, params: &[Tensor<f64>], want_grad: bool) -> Result<(f64, Vec<Tensor<f64>>)> {
        let n_model = self.model.params().len();
        self.model.set_params(&params[..n_model])?;
        if self.task.is_some() {
            self.head.weight = params[n_model].clone();
            self.head.bias = params[n_model + 1].clone();
        }
        let mut tape = Tape::new();
        let fv = self.model.bind(&mut tape);
        let hv = self.head.bind(&mut tape);
        let views: Vec<Var> = self.batch.iter().map(|x| tape.constant(x.clone())).collect();
        self.masks.rewind();
        let mut mode = DropoutMode::Frozen(&mut self.masks);
        let loss = match self.task {
            None => {
                let noisy = self.draws.0.apply_on_tape(&mut tape, &views)?;
                let zn = self.model.forward_on_tape(&mut tape, &fv, &noisy, &mut mode)?.z;
                let masked = self.draws.1.apply_on_tape(&mut tape, &views)?;
                let zm = self.model.forward_on_tape(&mut tape, &fv, &masked, &mut mode)?.z;
                rml_loss_on_tape(&mut tape, zn, zm, &self.contrastive)?
            }
            Some(kind) => {
                let inputs = ObjectiveInputs {
                    views: &views,
                    labels: &self.labels,
                    draws: Some(&self.draws),
                    kind,
                    lambda: self.lambda,
                    contrastive: &self.contrastive,
                };
                classifier_loss_on_tape(&mut tape, &self.model, &fv, &self.head, &hv, &inputs, &mut mode)?.total
            }
        };
        let value = tape.value(loss).data()[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        let mut vars = fv.all();
        if self.task.is_some() {
            vars.extend([hv.weight, hv.bias]);
        }
        Ok((value, vars.iter().map(|&v| tape.grad_tensor(v)).collect()))
    }

    fn params(&self) -> Vec<Tensor<f64>> {
        let mut p = self.model.param_tensors();
        if self.task.is_some() {
            p.extend([self.head.weight.clone(), self.head.bias.clone()]);
        }
        p
    }
}

impl Objective<f64> for FullObjective {
    fn loss(&mut self, params: &[Tensor<f64>]) -> Result<f64> {
        Ok(self.eval(params, false)?.0)
    }

    fn loss_and_grad(&mut self, params: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)> {
        self.eval(params, true)
    }
}

/// Checks the alignment loss, CE plus weighted alignment, and MCE plus
/// weighted alignment, in that order.
pub fn gradient_suite(cfg: &SuiteConfig) -> Result<Vec<SuiteCase>> {
    let master = RngStream::new(cfg.seed);
    let fusion = FusionConfig::new(cfg.view_dims.clone()).with_dims(cfg.token_dim, cfg.fused_dim);
    let model = FusionModel::<f64>::init(fusion, &mut master.fork(0))?;
    let head = ClassifierHead::<f64>::init(cfg.fused_dim, cfg.classes, &mut master.fork(1))?;
    let mut data_rng = master.fork(2);
    let batch: Vec<Tensor<f64>> = cfg
        .view_dims
        .iter()
        .map(|&d| {
            let values: Vec<f64> = (0..cfg.batch * d).map(|_| data_rng.normal()).collect();
            Tensor::new(&[cfg.batch, d], values)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = (0..cfg.batch).map(|_| data_rng.below(cfg.classes)).collect();
    let perturb = PerturbationConfig::new(0.5, 0.4, 0.5)?;
    let mut prng = master.fork(3);
    let draws: Draws = (
        draw_noise(&perturb, &mut prng, cfg.batch, &cfg.view_dims)?,
        draw_unusable(&perturb, &mut prng, cfg.batch, cfg.view_dims.len())?,
    );
    let cases = [
        ("rml", None),
        ("ce+rml", Some(LossKind::Ce)),
        ("mce+rml", Some(LossKind::Mce)),
    ];
    let mut out = Vec::new();
    for (i, (name, task)) in cases.into_iter().enumerate() {
        let mut obj = FullObjective {
            model: model.clone(),
            head: head.clone(),
            batch: batch.clone(),
            labels: labels.clone(),
            draws: draws.clone(),
            masks: FrozenMasks::new(master.fork(10 + i as u64)),
            task,
            lambda: cfg.lambda,
            contrastive: ContrastiveConfig::default(),
        };
        let params = obj.params();
        let report = grad_check(&mut obj, &params, cfg.step, cfg.tol)?;
        out.push(SuiteCase { name, report });
    }
    Ok(out)
}
