//! Multi-view transformer fusion network.
//!
//! Each sample's `V` views are embedded by per-view perceptrons into tokens
//! of width `d_e`. One single-head attention block mixes the `V` tokens of
//! that sample only, followed by a feed-forward layer, both with residual
//! connections and no normalization. The encoded tokens are summed and
//! projected by one linear layer to the fused vector `z` of width `d`.
//!
//! Internally the tokens of a batch are laid out as an `(n*V) x d_e` matrix
//! with row `i*V + m` holding view `m` of sample `i`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{DropoutMode, Tape, Tensor, Var};
use crate::error::{Result, RmlError};
use crate::rng::RngStream;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Input width `D_m` of every view; its length is the view count `V`.
    pub view_dims: Vec<usize>,
    /// Token width `d_e`.
    pub token_dim: usize,
    /// Fused representation width `d`.
    pub fused_dim: usize,
    pub dropout: f64,
    /// Hidden width of the feed-forward layer.
    pub ffn_hidden: usize,
    /// When false, attention is replaced by identity pass-through of the
    /// tokens (ablation).
    pub attention: bool,
}

impl FusionConfig {
    pub const DEFAULT_DIM: usize = 256;
    pub const DEFAULT_DROPOUT: f64 = 0.2;

    pub fn new(view_dims: Vec<usize>) -> Self {
        Self {
            view_dims,
            token_dim: Self::DEFAULT_DIM,
            fused_dim: Self::DEFAULT_DIM,
            dropout: Self::DEFAULT_DROPOUT,
            ffn_hidden: Self::DEFAULT_DIM,
            attention: true,
        }
    }

    /// Sets `d_e`, `d` and the feed-forward width together.
    pub fn with_dims(mut self, token_dim: usize, fused_dim: usize) -> Self {
        self.token_dim = token_dim;
        self.fused_dim = fused_dim;
        self.ffn_hidden = token_dim;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn views(&self) -> usize {
        self.view_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_dims.is_empty() {
            return Err(RmlError::Config("at least one view is required".into()));
        }
        if let Some(m) = self.view_dims.iter().position(|&d| d == 0) {
            return Err(RmlError::Config(format!("view {m} has zero input dimension")));
        }
        if self.token_dim == 0 || self.fused_dim == 0 || self.ffn_hidden == 0 {
            return Err(RmlError::Config("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(RmlError::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Number of scalar parameters of a model built from this config.
    pub fn parameter_count(&self) -> usize {
        let (de, h, d) = (self.token_dim, self.ffn_hidden, self.fused_dim);
        let embed: usize = self
            .view_dims
            .iter()
            .map(|&dm| dm * dm + dm + dm * de + de)
            .sum();
        embed + 3 * de * de + (de * h + h + h * de + de) + (de * d + d)
    }
}

/// Affine map `x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn init(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        Self {
            weight: uniform_fan_in(fan_in, fan_out, rng),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

fn uniform_fan_in<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit((2.0 * rng.uniform() - 1.0) * bound))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("positive extents")
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add_row(xw, self.bias)
    }
}

/// Per-view embedder: `Fc(D_m) - GELU - dropout - Fc(D_m -> d_e) - dropout`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder<T> {
    pub hidden: Linear<T>,
    pub proj: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel<T> {
    cfg: FusionConfig,
    pub embedders: Vec<Embedder<T>>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub head: Linear<T>,
}

/// Tape handles for every parameter of a [`FusionModel`].
#[derive(Debug, Clone)]
pub struct FusionVars {
    pub embedders: Vec<(LinearVars, LinearVars)>,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub ffn_in: LinearVars,
    pub ffn_out: LinearVars,
    pub head: LinearVars,
}

impl FusionVars {
    /// All handles, in the order of [`FusionModel::params`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (h, p) in &self.embedders {
            out.extend([h.weight, h.bias, p.weight, p.bias]);
        }
        out.extend([self.w_q, self.w_k, self.w_v]);
        for l in [&self.ffn_in, &self.ffn_out, &self.head] {
            out.extend([l.weight, l.bias]);
        }
        out
    }
}

/// Handles to the intermediate values of one fusion pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub tokens: Var,
    /// `(Q, K, V, A)`; absent when attention is ablated.
    pub attention: Option<(Var, Var, Var, Var)>,
    pub mixed: Var,
    pub residual: Var,
    pub encoded: Var,
    pub z: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Clean,
    NoisePerturbed,
    UnusablePerturbed,
}

/// Fused representations of a batch, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBatch<T> {
    pub z: Tensor<T>,
    pub provenance: Provenance,
}

impl<T: Scalar> FusedBatch<T> {
    pub fn rows(&self) -> usize {
        self.z.rows()
    }
}

/// Per-sample view of the attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace<T> {
    /// `V x d_e` tokens `E_i`.
    pub tokens: Tensor<T>,
    pub queries: Option<Tensor<T>>,
    pub keys: Option<Tensor<T>>,
    pub values: Option<Tensor<T>>,
    /// `V x V` row-stochastic attention scores.
    pub scores: Option<Tensor<T>>,
    pub mixed: Tensor<T>,
    pub residual: Tensor<T>,
    pub encoded: Tensor<T>,
}

impl<T: Scalar> FusionModel<T> {
    pub fn init(cfg: FusionConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let de = cfg.token_dim;
        let embedders = cfg
            .view_dims
            .iter()
            .map(|&dm| Embedder {
                hidden: Linear::init(dm, dm, rng),
                proj: Linear::init(dm, de, rng),
            })
            .collect();
        let w_q = uniform_fan_in(de, de, rng);
        let w_k = uniform_fan_in(de, de, rng);
        let w_v = uniform_fan_in(de, de, rng);
        let ffn_in = Linear::init(de, cfg.ffn_hidden, rng);
        let ffn_out = Linear::init(cfg.ffn_hidden, de, rng);
        let head = Linear::init(de, cfg.fused_dim, rng);
        Ok(Self {
            cfg,
            embedders,
            w_q,
            w_k,
            w_v,
            ffn_in,
            ffn_out,
            head,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    /// Toggles the attention ablation without touching any weight.
    pub fn set_attention(&mut self, enabled: bool) {
        self.cfg.attention = enabled;
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (m, e) in self.embedders.iter().enumerate() {
            out.push((format!("embed{m}.hidden.weight"), &e.hidden.weight));
            out.push((format!("embed{m}.hidden.bias"), &e.hidden.bias));
            out.push((format!("embed{m}.proj.weight"), &e.proj.weight));
            out.push((format!("embed{m}.proj.bias"), &e.proj.bias));
        }
        out.push(("attn.w_q".into(), &self.w_q));
        out.push(("attn.w_k".into(), &self.w_k));
        out.push(("attn.w_v".into(), &self.w_v));
        for (name, l) in [
            ("ffn.in", &self.ffn_in),
            ("ffn.out", &self.ffn_out),
            ("head", &self.head),
        ] {
            out.push((format!("{name}.weight"), &l.weight));
            out.push((format!("{name}.bias"), &l.bias));
        }
        out
    }

    /// Mutable parameters, same order as [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for e in &mut self.embedders {
            out.extend([
                &mut e.hidden.weight,
                &mut e.hidden.bias,
                &mut e.proj.weight,
                &mut e.proj.bias,
            ]);
        }
        out.extend([&mut self.w_q, &mut self.w_k, &mut self.w_v]);
        for l in [&mut self.ffn_in, &mut self.ffn_out, &mut self.head] {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out
    }

    pub fn param_tensors(&self) -> Vec<Tensor<T>> {
        self.params().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Replaces every parameter; shapes must match exactly.
    pub fn set_params(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(RmlError::Contract(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(RmlError::shape("set_params", slot.shape(), v.shape()));
            }
        }
        for (slot, v) in slots.into_iter().zip(values) {
            *slot = v.clone();
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.all_finite())
    }

    /// Records every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> FusionVars {
        self.bind_with(tape, true)
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> FusionVars {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape<T>, trainable: bool) -> FusionVars {
        let leaf = |tape: &mut Tape<T>, t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let lin = |tape: &mut Tape<T>, l: &Linear<T>| LinearVars {
            weight: leaf(tape, &l.weight),
            bias: leaf(tape, &l.bias),
        };
        let embedders = self
            .embedders
            .iter()
            .map(|e| (lin(tape, &e.hidden), lin(tape, &e.proj)))
            .collect();
        FusionVars {
            embedders,
            w_q: leaf(tape, &self.w_q),
            w_k: leaf(tape, &self.w_k),
            w_v: leaf(tape, &self.w_v),
            ffn_in: lin(tape, &self.ffn_in),
            ffn_out: lin(tape, &self.ffn_out),
            head: lin(tape, &self.head),
        }
    }

    /// Checks that `views` has one `n x D_m` matrix per configured view.
    pub fn check_batch(&self, shapes: &[&[usize]]) -> Result<usize> {
        if shapes.len() != self.cfg.views() {
            return Err(RmlError::Contract(format!(
                "expected {} views, got {}",
                self.cfg.views(),
                shapes.len()
            )));
        }
        let n = shapes[0].first().copied().unwrap_or(0);
        for (m, (shape, &dm)) in shapes.iter().zip(&self.cfg.view_dims).enumerate() {
            let cols = if shape.len() == 2 { shape[1] } else { 0 };
            if cols != dm {
                return Err(RmlError::ViewShape {
                    view: m,
                    expected: dm,
                    got: cols,
                });
            }
            if shape[0] != n {
                return Err(RmlError::Data(format!(
                    "view {m} has {} rows, view 0 has {n}",
                    shape[0]
                )));
            }
        }
        Ok(n)
    }

    /// Embeds each view and interleaves the tokens into `(n*V) x d_e`.
    pub fn embed_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &FusionVars,
        views: &[Var],
        mode: &mut DropoutMode<'_>,
    ) -> Result<Var> {
        let shapes: Vec<&[usize]> = views.iter().map(|&v| tape.value(v).shape()).collect();
        self.check_batch(&shapes)?;
        let rate = self.cfg.dropout;
        let mut tokens = Vec::with_capacity(views.len());
        for (&x, (hidden, proj)) in views.iter().zip(&vars.embedders) {
            let h = hidden.apply(tape, x)?;
            let h = tape.gelu(h);
            let h = tape.dropout(h, rate, mode)?;
            let e = proj.apply(tape, h)?;
            tokens.push(tape.dropout(e, rate, mode)?);
        }
        tape.interleave_rows(&tokens)
    }

    /// Attention, feed-forward and sum-fusion head on interleaved tokens.
    pub fn fuse_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &FusionVars,
        tokens: Var,
    ) -> Result<ForwardVars> {
        let v = self.cfg.views();
        let de = self.cfg.token_dim;
        let shape = tape.value(tokens).shape();
        if shape.len() != 2 || shape[1] != de || shape[0] % v != 0 {
            return Err(RmlError::shape("fuse", shape, &[v, de]));
        }
        let (attention, mixed) = if self.cfg.attention {
            let q = tape.matmul(tokens, vars.w_q)?;
            let k = tape.matmul(tokens, vars.w_k)?;
            let val = tape.matmul(tokens, vars.w_v)?;
            let logits = tape.block_scores(q, k, v, T::one() / T::from_usize_lossy(de).sqrt())?;
            let a = tape.softmax_rows(logits)?;
            let mixed = tape.block_mix(a, val, v)?;
            (Some((q, k, val, a)), mixed)
        } else {
            (None, tokens)
        };
        let residual = tape.add(mixed, tokens)?;
        let hidden = vars.ffn_in.apply(tape, residual)?;
        let hidden = tape.gelu(hidden);
        let ffn = vars.ffn_out.apply(tape, hidden)?;
        let encoded = tape.add(residual, ffn)?;
        let summed = tape.block_sum(encoded, v)?;
        let z = vars.head.apply(tape, summed)?;
        Ok(ForwardVars {
            tokens,
            attention,
            mixed,
            residual,
            encoded,
            z,
        })
    }

    /// Full forward pass on tape inputs; returns the `n x d` fused matrix.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &FusionVars,
        views: &[Var],
        mode: &mut DropoutMode<'_>,
    ) -> Result<ForwardVars> {
        let tokens = self.embed_on_tape(tape, vars, views, mode)?;
        self.fuse_on_tape(tape, vars, tokens)
    }

    /// Per-view tokens as an `n x V x d_e` tensor.
    pub fn embed_views(&self, batch: &[Tensor<T>], mode: &mut DropoutMode<'_>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let views: Vec<Var> = batch.iter().map(|x| tape.constant(x.clone())).collect();
        let tokens = self.embed_on_tape(&mut tape, &vars, &views, mode)?;
        let n = tape.value(tokens).rows() / self.cfg.views();
        tape.value(tokens)
            .clone()
            .reshape(&[n, self.cfg.views(), self.cfg.token_dim])
    }

    /// Attention and fusion on `n x V x d_e` tokens, optionally returning the
    /// per-sample trace of every intermediate.
    pub fn attend_and_fuse(
        &self,
        tokens: &Tensor<T>,
        provenance: Provenance,
        want_trace: bool,
    ) -> Result<(FusedBatch<T>, Option<Vec<AttentionTrace<T>>>)> {
        let (v, de) = (self.cfg.views(), self.cfg.token_dim);
        if tokens.shape().len() != 3 || tokens.shape()[1] != v || tokens.shape()[2] != de {
            return Err(RmlError::shape("attend_and_fuse", tokens.shape(), &[0, v, de]));
        }
        let n = tokens.shape()[0];
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let tok = tape.constant(tokens.clone().reshape(&[n * v, de])?);
        let fv = self.fuse_on_tape(&mut tape, &vars, tok)?;
        let trace = want_trace.then(|| {
            let block = |var: Var, i: usize| {
                let t = tape.value(var);
                let c = t.cols();
                Tensor::new(&[v, c], t.data()[i * v * c..(i + 1) * v * c].to_vec())
                    .expect("block extents")
            };
            (0..n)
                .map(|i| AttentionTrace {
                    tokens: block(fv.tokens, i),
                    queries: fv.attention.map(|a| block(a.0, i)),
                    keys: fv.attention.map(|a| block(a.1, i)),
                    values: fv.attention.map(|a| block(a.2, i)),
                    scores: fv.attention.map(|a| block(a.3, i)),
                    mixed: block(fv.mixed, i),
                    residual: block(fv.residual, i),
                    encoded: block(fv.encoded, i),
                })
                .collect()
        });
        let z = tape.value(fv.z).clone();
        Ok((FusedBatch { z, provenance }, trace))
    }

    /// `Z = F(X^1, ..., X^V)`.
    pub fn forward(
        &self,
        batch: &[Tensor<T>],
        mode: &mut DropoutMode<'_>,
        provenance: Provenance,
    ) -> Result<FusedBatch<T>> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let views: Vec<Var> = batch.iter().map(|x| tape.constant(x.clone())).collect();
        let fv = self.forward_on_tape(&mut tape, &vars, &views, mode)?;
        Ok(FusedBatch {
            z: tape.value(fv.z).clone(),
            provenance,
        })
    }
}
