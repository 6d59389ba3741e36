//! Classification under noisy labels with a linear softmax head on the
//! fused representation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{DropoutMode, Tape, Tensor, Var};
use crate::contrastive::{rml_loss_on_tape, ContrastiveConfig};
use crate::data::MultiViewDataset;
use crate::error::{Result, RmlError};
use crate::fusion::{FusionConfig, FusionModel, FusionVars};
use crate::optim::Adam;
use crate::perturb::{PerturbationConfig, PerturbationDraw};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tasks::labels::{make_symmetric_noise, stratified_split, NoisyLabelSet};
use crate::tasks::metrics::{classification_metrics, ClassificationReport};
use crate::train::{
    branch_draws, epoch_batches, infer, model_grads, param_names, streams, LossRecord, LossTrace,
    TrainConfig,
};

/// Probabilities are clipped from below inside the logarithm only.
pub const PROB_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// Cross-entropy on the clean prediction.
    Ce,
    /// Sum of the cross-entropies on the clean, noise-perturbed and
    /// unusable-perturbed predictions.
    Mce,
}

impl FromStr for LossKind {
    type Err = RmlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(Self::Ce),
            "mce" => Ok(Self::Mce),
            other => Err(RmlError::Config(format!("unknown loss '{other}' (expected ce or mce)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ce => "ce",
            Self::Mce => "mce",
        })
    }
}

/// Linear map `d -> C` followed by a row softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn init(dim: usize, classes: usize, rng: &mut RngStream) -> Result<Self> {
        if dim == 0 || classes < 2 {
            return Err(RmlError::Config(format!(
                "head needs positive width and at least 2 classes (got {dim}, {classes})"
            )));
        }
        let b = 1.0 / (dim as f64).sqrt();
        let data = (0..dim * classes)
            .map(|_| T::lit((2.0 * rng.uniform() - 1.0) * b))
            .collect();
        Ok(Self {
            weight: Tensor::new(&[dim, classes], data)?,
            bias: Tensor::zeros(&[1, classes]),
        })
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> HeadVars {
        HeadVars {
            weight: tape.param(self.weight.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }

    pub fn probs_on_tape(&self, tape: &mut Tape<T>, vars: &HeadVars, z: Var) -> Result<Var> {
        let logits = tape.matmul(z, vars.weight)?;
        let logits = tape.add_row(logits, vars.bias)?;
        tape.softmax_rows(logits)
    }

    pub fn probs(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let zv = tape.constant(z.clone());
        let q = self.probs_on_tape(&mut tape, &HeadVars { weight: w, bias: b }, zv)?;
        Ok(tape.value(q).clone())
    }

    /// Arg-max class of every row (lowest index on ties).
    pub fn predict(&self, z: &Tensor<T>) -> Result<Vec<usize>> {
        let q = self.probs(z)?;
        Ok((0..q.rows())
            .map(|i| {
                q.row(i)
                    .iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (c, &p)| if p > best.1 { (c, p) } else { best })
                    .0
            })
            .collect())
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Mean negative log-likelihood of the true class.
pub fn ce_loss<T: Scalar>(q: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let loss = tape.nll_probs(qv, labels, T::lit(PROB_FLOOR))?;
    Ok(tape.value(loss).data()[0])
}

/// Handles to the pieces of a classification objective.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierLoss {
    pub total: Var,
    pub task: Var,
    pub rml: Option<Var>,
}

/// Everything the classification objective reads besides parameters.
pub struct ObjectiveInputs<'a, T> {
    pub views: &'a [Var],
    pub labels: &'a [usize],
    /// Required for MCE or a positive `lambda`.
    pub draws: Option<&'a (PerturbationDraw<T>, PerturbationDraw<T>)>,
    pub kind: LossKind,
    pub lambda: f64,
    pub contrastive: &'a ContrastiveConfig,
}

/// Builds `task + lambda * L_rml` on the tape, where `task` is the CE or
/// MCE loss. Forward passes run clean, noise-perturbed, unusable-perturbed.
pub fn classifier_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &FusionModel<T>,
    fv: &FusionVars,
    head: &ClassifierHead<T>,
    hv: &HeadVars,
    inputs: &ObjectiveInputs<'_, T>,
    mode: &mut DropoutMode<'_>,
) -> Result<ClassifierLoss> {
    let floor = T::lit(PROB_FLOOR);
    let z = model.forward_on_tape(tape, fv, inputs.views, mode)?.z;
    let q = head.probs_on_tape(tape, hv, z)?;
    let mut task = tape.nll_probs(q, inputs.labels, floor)?;
    let needs_pair = inputs.kind == LossKind::Mce || inputs.lambda > 0.0;
    if !needs_pair {
        return Ok(ClassifierLoss {
            total: task,
            task,
            rml: None,
        });
    }
    let draws = inputs.draws.ok_or_else(|| {
        RmlError::Contract("perturbation draws required for MCE or a positive lambda".into())
    })?;
    let noisy = draws.0.apply_on_tape(tape, inputs.views)?;
    let zn = model.forward_on_tape(tape, fv, &noisy, mode)?.z;
    let masked = draws.1.apply_on_tape(tape, inputs.views)?;
    let zm = model.forward_on_tape(tape, fv, &masked, mode)?.z;
    if inputs.kind == LossKind::Mce {
        let qn = head.probs_on_tape(tape, hv, zn)?;
        let qm = head.probs_on_tape(tape, hv, zm)?;
        let ln = tape.nll_probs(qn, inputs.labels, floor)?;
        let lm = tape.nll_probs(qm, inputs.labels, floor)?;
        task = tape.add(task, ln)?;
        task = tape.add(task, lm)?;
    }
    if inputs.lambda > 0.0 {
        let rml = rml_loss_on_tape(tape, zn, zm, inputs.contrastive)?;
        let weighted = tape.scale(rml, T::lit(inputs.lambda));
        let total = tape.add(task, weighted)?;
        Ok(ClassifierLoss {
            total,
            task,
            rml: Some(rml),
        })
    } else {
        Ok(ClassifierLoss {
            total: task,
            task,
            rml: None,
        })
    }
}

/// `CE(q) + CE(q^N) + CE(q^M)` with fresh perturbation draws from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn mce_loss<T: Scalar>(
    model: &FusionModel<T>,
    head: &ClassifierHead<T>,
    batch: &[Tensor<T>],
    labels: &[usize],
    perturb_cfg: &PerturbationConfig,
    rng: &mut RngStream,
    mode: &mut DropoutMode<'_>,
) -> Result<T> {
    let shapes: Vec<&[usize]> = batch.iter().map(|x| x.shape()).collect();
    let n = model.check_batch(&shapes)?;
    let draws = branch_draws(perturb_cfg, Default::default(), rng, n, &model.config().view_dims)?;
    let mut tape = Tape::new();
    let fv = model.bind_frozen(&mut tape);
    let hv = HeadVars {
        weight: tape.constant(head.weight.clone()),
        bias: tape.constant(head.bias.clone()),
    };
    let views: Vec<Var> = batch.iter().map(|x| tape.constant(x.clone())).collect();
    let contrastive = ContrastiveConfig::default();
    let inputs = ObjectiveInputs {
        views: &views,
        labels,
        draws: Some(&draws),
        kind: LossKind::Mce,
        lambda: 0.0,
        contrastive: &contrastive,
    };
    let loss = classifier_loss_on_tape(&mut tape, model, &fv, head, &hv, &inputs, mode)?;
    Ok(tape.value(loss.total).data()[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    /// Fraction of every class used for training.
    pub split: f64,
    pub noise_rate: f64,
    pub loss: LossKind,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            split: 0.7,
            noise_rate: 0.0,
            loss: LossKind::Ce,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassificationRun<T> {
    pub report: ClassificationReport,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    /// Training labels, before and after corruption.
    pub labels: NoisyLabelSet,
    pub model: FusionModel<T>,
    pub head: ClassifierHead<T>,
    pub trace: LossTrace,
}

/// Splits, corrupts the training labels, trains the fusion network and head
/// jointly and scores the clean test labels.
pub fn train_classifier<T: Scalar>(
    dataset: &MultiViewDataset,
    cls_cfg: &ClassifyConfig,
    fusion_cfg: &FusionConfig,
    perturb_cfg: &PerturbationConfig,
    train_cfg: &TrainConfig,
) -> Result<ClassificationRun<T>> {
    train_cfg.validate()?;
    perturb_cfg.validate()?;
    let truth = dataset
        .labels()
        .ok_or_else(|| RmlError::Data("classification needs labels".into()))?;
    let classes = dataset
        .classes()
        .ok_or_else(|| RmlError::Data("classification needs a class count".into()))?;
    if fusion_cfg.view_dims != dataset.dims() {
        return Err(RmlError::Config(format!(
            "model expects view widths {:?}, dataset has {:?}",
            fusion_cfg.view_dims,
            dataset.dims()
        )));
    }
    let master = RngStream::new(train_cfg.seed);
    let mut label_rng = master.fork(streams::LABELS);
    let (train_idx, test_idx) = stratified_split(truth, classes, cls_cfg.split, &mut label_rng)?;
    let train_truth: Vec<usize> = train_idx.iter().map(|&i| truth[i]).collect();
    let labels = make_symmetric_noise(&train_truth, cls_cfg.noise_rate, classes, &mut label_rng)?;
    let train_set = dataset.subset(&train_idx);
    let test_set = dataset.subset(&test_idx);

    let mut model = FusionModel::<T>::init(fusion_cfg.clone(), &mut master.fork(streams::INIT))?;
    let mut head = ClassifierHead::<T>::init(fusion_cfg.fused_dim, classes, &mut master.fork(streams::HEAD_INIT))?;
    let mut shuffle = master.fork(streams::SHUFFLE);
    let mut perturb_rng = master.fork(streams::PERTURB);
    let mut dropout_rng = master.fork(streams::DROPOUT);
    let mut adam = Adam::new(train_cfg.adam());
    let mut names = param_names(&model);
    names.extend(["head.weight".to_string(), "head.bias".to_string()]);
    let contrastive = train_cfg.contrastive();
    let dims = dataset.dims();
    let needs_pair = cls_cfg.loss == LossKind::Mce || train_cfg.lambda > 0.0;

    let mut trace = LossTrace::default();
    for epoch in 0..train_cfg.epochs {
        for idx in epoch_batches(train_set.len(), train_cfg.batch_for(train_set.len()), &mut shuffle) {
            let xs = train_set.batch::<T>(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels.noisy[i]).collect();
            let draws = if needs_pair {
                Some(branch_draws(perturb_cfg, train_cfg.ablation, &mut perturb_rng, idx.len(), &dims)?)
            } else {
                None
            };
            let mut tape = Tape::new();
            let fv = model.bind(&mut tape);
            let hv = head.bind(&mut tape);
            let views: Vec<Var> = xs.into_iter().map(|x| tape.constant(x)).collect();
            let inputs = ObjectiveInputs {
                views: &views,
                labels: &y,
                draws: draws.as_ref(),
                kind: cls_cfg.loss,
                lambda: train_cfg.lambda,
                contrastive: &contrastive,
            };
            let mut mode = DropoutMode::Live(&mut dropout_rng);
            let loss = classifier_loss_on_tape(&mut tape, &model, &fv, &head, &hv, &inputs, &mut mode)?;
            let total = tape.value(loss.total).data()[0];
            if !total.is_finite() {
                return Err(RmlError::NonFinite(format!("classification loss at epoch {epoch}")));
            }
            tape.backward(loss.total)?;
            let mut vars = fv.all();
            vars.extend([hv.weight, hv.bias]);
            let grads = model_grads(&tape, &vars);
            let mut params = model.params_mut();
            params.extend(head.params_mut());
            adam.step(&mut params, &grads, &names)?;
            trace.records.push(LossRecord {
                step: trace.records.len(),
                epoch,
                rml: loss.rml.map_or(0.0, |r| tape.value(r).data()[0].to_f64_lossy()),
                task: Some(tape.value(loss.task).data()[0].to_f64_lossy()),
            });
        }
    }

    let z = infer(&model, &test_set, None)?.z;
    let pred = head.predict(&z)?;
    let test_truth: Vec<usize> = test_idx.iter().map(|&i| truth[i]).collect();
    let report = classification_metrics(&pred, &test_truth, classes)?;
    Ok(ClassificationRun {
        report,
        train_idx,
        test_idx,
        labels,
        model,
        head,
        trace,
    })
}
