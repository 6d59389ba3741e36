//! Reverse-mode computation tape.
//!
//! Every operation appends a node holding its output value and enough of
//! its inputs to replay the adjoint. [`Tape::backward`] walks the nodes in
//! exact reverse order and accumulates gradients on leaves that were created
//! with `requires_grad`.

use crate::autodiff::dropout::DropoutMode;
use crate::autodiff::tensor::Tensor;
use crate::error::{Result, RmlError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Dropout(Var, Vec<T>),
    SoftmaxRows(Var),
    L2NormalizeRows(Var, Vec<T>),
    ConcatRows(Var, Var),
    Interleave(Vec<Var>),
    BlockScores {
        q: Var,
        k: Var,
        block: usize,
        scale: T,
    },
    BlockMix {
        weights: Var,
        values: Var,
        block: usize,
    },
    BlockSum(Var, usize),
    NllLogits {
        logits: Var,
        targets: Vec<usize>,
        exclude_diagonal: bool,
        probs: Vec<T>,
    },
    NllProbs {
        probs: Var,
        targets: Vec<usize>,
        floor: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn check_mat<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if !t.is_matrix() {
        return Err(RmlError::shape(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Exact GELU: `x * Phi(x)` with the erf-based Gaussian CDF.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant leaf (no gradient is tracked).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Accumulated gradient as a tensor shaped like the leaf (zeros if unreached).
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.nodes[v.0].value.shape();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shaped like value"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_mat("matmul", self.value(a))?;
        let (k2, n) = check_mat("matmul", self.value(b))?;
        if k != k2 {
            return Err(RmlError::shape(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = check_mat("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(RmlError::shape(op, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`k` bias row to every row of an `m x k` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, k) = check_mat("add_row", self.value(x))?;
        if self.value(bias).len() != k {
            return Err(RmlError::shape(
                "add_row",
                self.value(x).shape(),
                self.value(bias).shape(),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            add_into(row, b);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(&[m, k], out)?, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / T::from_usize_lossy(v.len());
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Inverted dropout: dropped elements become zero, survivors are scaled
    /// by `1 / (1 - rate)`. Identity when the mode is [`DropoutMode::Off`].
    pub fn dropout(&mut self, x: Var, rate: f64, mode: &mut DropoutMode<'_>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(RmlError::Config(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let Some(keep) = mode.keep_mask(self.value(x).len(), rate) else {
            return Ok(x);
        };
        let survive = T::lit(1.0 / (1.0 - rate));
        let factors: Vec<T> = keep
            .iter()
            .map(|&k| if k { survive } else { T::zero() })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&factors).map(|(&a, &f)| a * f).collect();
        let out = Tensor::new(v.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout(x, factors), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, k) = check_mat("softmax_rows", self.value(x))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[m, k], out)?, Op::SoftmaxRows(x), rg))
    }

    /// Scales each row to unit Euclidean norm. A zero row is an error unless
    /// `eps > 0`, in which case `eps` is added to every norm.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let (m, k) = check_mat("l2_normalize_rows", self.value(x))?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for (i, row) in out.chunks_mut(k).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt() + eps;
            if norm <= T::zero() || !norm.is_finite() {
                return Err(RmlError::Degenerate(format!(
                    "row {i} has zero or non-finite norm"
                )));
            }
            row.iter_mut().for_each(|v| *v = *v / norm);
            norms.push(norm);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[m, k], out)?,
            Op::L2NormalizeRows(x, norms),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, ka) = check_mat("concat_rows", self.value(a))?;
        let (mb, kb) = check_mat("concat_rows", self.value(b))?;
        if ka != kb {
            return Err(RmlError::shape(
                "concat_rows",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[ma + mb, ka], out)?, Op::ConcatRows(a, b), rg))
    }

    /// Stacks `V` matrices of shape `n x d` into `(n*V) x d`, with row
    /// `i*V + m` taken from row `i` of input `m`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(RmlError::Contract("interleave of zero inputs".into()));
        };
        let (n, d) = check_mat("interleave_rows", self.value(first))?;
        for &p in parts {
            if self.value(p).shape() != [n, d] {
                return Err(RmlError::shape(
                    "interleave_rows",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let v = parts.len();
        let mut out = vec![T::zero(); n * v * d];
        for (m, &p) in parts.iter().enumerate() {
            let src = self.value(p).data();
            for i in 0..n {
                out[(i * v + m) * d..(i * v + m + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&[n * v, d], out)?,
            Op::Interleave(parts.to_vec()),
            rg,
        ))
    }

    /// Per-block scaled dot products: for rows grouped in blocks of `block`,
    /// `out[(i,a), b] = scale * q[(i,a)] . k[(i,b)]`.
    pub fn block_scores(&mut self, q: Var, k: Var, block: usize, scale: T) -> Result<Var> {
        let (rows, d) = check_mat("block_scores", self.value(q))?;
        if self.value(k).shape() != self.value(q).shape() || block == 0 || rows % block != 0 {
            return Err(RmlError::shape(
                "block_scores",
                self.value(q).shape(),
                self.value(k).shape(),
            ));
        }
        let (qv, kv) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![T::zero(); rows * block];
        for r in 0..rows {
            let base = (r / block) * block;
            let qr = &qv[r * d..(r + 1) * d];
            for b in 0..block {
                let kr = &kv[(base + b) * d..(base + b + 1) * d];
                out[r * block + b] = scale * dot(qr, kr);
            }
        }
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(
            Tensor::new(&[rows, block], out)?,
            Op::BlockScores { q, k, block, scale },
            rg,
        ))
    }

    /// Per-block mixing: `out[(i,a)] = sum_b weights[(i,a), b] * values[(i,b)]`.
    pub fn block_mix(&mut self, weights: Var, values: Var, block: usize) -> Result<Var> {
        let (rows, bw) = check_mat("block_mix", self.value(weights))?;
        let (rows2, d) = check_mat("block_mix", self.value(values))?;
        if bw != block || rows != rows2 || rows % block != 0 {
            return Err(RmlError::shape(
                "block_mix",
                self.value(weights).shape(),
                self.value(values).shape(),
            ));
        }
        let (w, v) = (self.value(weights).data(), self.value(values).data());
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let base = (r / block) * block;
            let dst = &mut out[r * d..(r + 1) * d];
            for b in 0..block {
                let a = w[r * block + b];
                let src = &v[(base + b) * d..(base + b + 1) * d];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o = *o + a * s;
                }
            }
        }
        let rg = self.rg(weights) || self.rg(values);
        Ok(self.push(
            Tensor::new(&[rows, d], out)?,
            Op::BlockMix {
                weights,
                values,
                block,
            },
            rg,
        ))
    }

    /// Sums each block of `block` consecutive rows: `(n*block) x d -> n x d`.
    pub fn block_sum(&mut self, x: Var, block: usize) -> Result<Var> {
        let (rows, d) = check_mat("block_sum", self.value(x))?;
        if block == 0 || rows % block != 0 {
            return Err(RmlError::shape("block_sum", self.value(x).shape(), &[block]));
        }
        let n = rows / block;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * d];
        for r in 0..rows {
            add_into(&mut out[(r / block) * d..(r / block + 1) * d], &src[r * d..(r + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, d], out)?, Op::BlockSum(x, block), rg))
    }

    /// Sum over rows of `-log softmax(row)[target]`. With `exclude_diagonal`
    /// the row's own column is left out of the normalization (and may not be
    /// a target).
    pub fn nll_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
        exclude_diagonal: bool,
    ) -> Result<Var> {
        let (m, k) = check_mat("nll_logits", self.value(logits))?;
        if targets.len() != m || (exclude_diagonal && m > k) {
            return Err(RmlError::shape("nll_logits", &[m, k], &[targets.len()]));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); m * k];
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            if t >= k || (exclude_diagonal && t == i) {
                return Err(RmlError::Contract(format!(
                    "target {t} invalid for row {i} of {k} columns"
                )));
            }
            let row = &src[i * k..(i + 1) * k];
            let skip = |j: usize| exclude_diagonal && j == i;
            let max = (0..k)
                .filter(|&j| !skip(j))
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in (0..k).filter(|&j| !skip(j)) {
                let e = (row[j] - max).exp();
                probs[i * k + j] = e;
                z = z + e;
            }
            for j in (0..k).filter(|&j| !skip(j)) {
                probs[i * k + j] = probs[i * k + j] / z;
            }
            total = total - (row[t] - max - z.ln());
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::NllLogits {
                logits,
                targets: targets.to_vec(),
                exclude_diagonal,
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `-log(max(q[target], floor))` for probability rows.
    pub fn nll_probs(&mut self, probs: Var, targets: &[usize], floor: T) -> Result<Var> {
        let (m, k) = check_mat("nll_probs", self.value(probs))?;
        if targets.len() != m {
            return Err(RmlError::shape("nll_probs", &[m, k], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(RmlError::Data(format!("label {bad} out of range [0, {k})")));
        }
        let q = self.value(probs).data();
        let total: T = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -q[i * k + t].max(floor).ln())
            .sum();
        let loss = total / T::from_usize_lossy(m);
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::NllProbs {
                probs,
                targets: targets.to_vec(),
                floor,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(RmlError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                match &mut self.grads[id] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if let Some(da) = slot(nodes, adj, *a) {
                    // dA += dC * B^T
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, vb.data(), 1, n as isize, T::one(), da, k as isize, 1);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    // dB += A^T * dC
                    T::gemm(k, m, n, T::one(), va.data(), 1, k as isize, g, n as isize, 1, T::one(), db, n as isize, 1);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                if let Some(da) = slot(nodes, adj, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            da[j * m + i] = da[j * m + i] + g[i * n + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = slot(nodes, adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    for (d, &x) in db.iter_mut().zip(g) {
                        *d = *d - x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(da) = slot(nodes, adj, *a) {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(vb) {
                        *d = *d + x * y;
                    }
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(va) {
                        *d = *d + x * y;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let k = nodes[bias.0].value.len();
                if let Some(dx) = slot(nodes, adj, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = slot(nodes, adj, *bias) {
                    for row in g.chunks(k) {
                        add_into(db, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    for (d, &v) in dx.iter_mut().zip(g) {
                        *d = *d + v * *c;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    dx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::from_usize_lossy(nodes[x.0].value.len());
                if let Some(dx) = slot(nodes, adj, *x) {
                    dx.iter_mut().for_each(|d| *d = *d + g[0] / n);
                }
            }
            Op::Gelu(x) => {
                let vx = nodes[x.0].value.data();
                if let Some(dx) = slot(nodes, adj, *x) {
                    for ((d, &v), &xi) in dx.iter_mut().zip(g).zip(vx) {
                        *d = *d + v * gelu_grad(xi);
                    }
                }
            }
            Op::Dropout(x, factors) => {
                if let Some(dx) = slot(nodes, adj, *x) {
                    for ((d, &v), &f) in dx.iter_mut().zip(g).zip(factors) {
                        *d = *d + v * f;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let k = node.value.shape()[1];
                let y = node.value.data();
                if let Some(dx) = slot(nodes, adj, *x) {
                    for ((dr, gr), yr) in dx.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                        let inner = dot(gr, yr);
                        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + yv * (gv - inner);
                        }
                    }
                }
            }
            Op::L2NormalizeRows(x, norms) => {
                let k = node.value.shape()[1];
                let y = node.value.data();
                if let Some(dx) = slot(nodes, adj, *x) {
                    for (i, ((dr, gr), yr)) in
                        dx.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)).enumerate()
                    {
                        let inner = dot(gr, yr);
                        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + (gv - yv * inner) / norms[i];
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let split = nodes[a.0].value.len();
                if let Some(da) = slot(nodes, adj, *a) {
                    add_into(da, &g[..split]);
                }
                if let Some(db) = slot(nodes, adj, *b) {
                    add_into(db, &g[split..]);
                }
            }
            Op::Interleave(parts) => {
                let v = parts.len();
                let d = node.value.shape()[1];
                let n = node.value.shape()[0] / v;
                for (m, &p) in parts.iter().enumerate() {
                    if let Some(dp) = slot(nodes, adj, p) {
                        for i in 0..n {
                            add_into(&mut dp[i * d..(i + 1) * d], &g[(i * v + m) * d..(i * v + m + 1) * d]);
                        }
                    }
                }
            }
            Op::BlockScores { q, k, block, scale } => {
                let (qv, kv) = (nodes[q.0].value.data(), nodes[k.0].value.data());
                let rows = nodes[q.0].value.shape()[0];
                let d = nodes[q.0].value.shape()[1];
                let block = *block;
                if let Some(dq) = slot(nodes, adj, *q) {
                    for r in 0..rows {
                        let base = (r / block) * block;
                        for b in 0..block {
                            let c = g[r * block + b] * *scale;
                            let kr = &kv[(base + b) * d..(base + b + 1) * d];
                            for (o, &kk) in dq[r * d..(r + 1) * d].iter_mut().zip(kr) {
                                *o = *o + c * kk;
                            }
                        }
                    }
                }
                if let Some(dk) = slot(nodes, adj, *k) {
                    for r in 0..rows {
                        let base = (r / block) * block;
                        let qr = &qv[r * d..(r + 1) * d];
                        for b in 0..block {
                            let c = g[r * block + b] * *scale;
                            for (o, &qq) in dk[(base + b) * d..(base + b + 1) * d].iter_mut().zip(qr) {
                                *o = *o + c * qq;
                            }
                        }
                    }
                }
            }
            Op::BlockMix {
                weights,
                values,
                block,
            } => {
                let (w, v) = (nodes[weights.0].value.data(), nodes[values.0].value.data());
                let rows = node.value.shape()[0];
                let d = node.value.shape()[1];
                let block = *block;
                if let Some(dw) = slot(nodes, adj, *weights) {
                    for r in 0..rows {
                        let base = (r / block) * block;
                        let gr = &g[r * d..(r + 1) * d];
                        for b in 0..block {
                            let vr = &v[(base + b) * d..(base + b + 1) * d];
                            dw[r * block + b] = dw[r * block + b] + dot(gr, vr);
                        }
                    }
                }
                if let Some(dv) = slot(nodes, adj, *values) {
                    for r in 0..rows {
                        let base = (r / block) * block;
                        let gr = &g[r * d..(r + 1) * d];
                        for b in 0..block {
                            let a = w[r * block + b];
                            for (o, &gg) in dv[(base + b) * d..(base + b + 1) * d].iter_mut().zip(gr) {
                                *o = *o + a * gg;
                            }
                        }
                    }
                }
            }
            Op::BlockSum(x, block) => {
                let d = node.value.shape()[1];
                let rows = nodes[x.0].value.shape()[0];
                if let Some(dx) = slot(nodes, adj, *x) {
                    for r in 0..rows {
                        let i = r / block;
                        add_into(&mut dx[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::NllLogits {
                logits,
                targets,
                exclude_diagonal,
                probs,
            } => {
                let k = nodes[logits.0].value.shape()[1];
                if let Some(dl) = slot(nodes, adj, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            if *exclude_diagonal && j == i {
                                continue;
                            }
                            let ind = if j == t { T::one() } else { T::zero() };
                            dl[i * k + j] = dl[i * k + j] + g[0] * (probs[i * k + j] - ind);
                        }
                    }
                }
            }
            Op::NllProbs {
                probs,
                targets,
                floor,
            } => {
                let q = nodes[probs.0].value.data();
                let k = nodes[probs.0].value.shape()[1];
                let m = T::from_usize_lossy(targets.len());
                if let Some(dq) = slot(nodes, adj, *probs) {
                    for (i, &t) in targets.iter().enumerate() {
                        let p = q[i * k + t];
                        if p > *floor {
                            dq[i * k + t] = dq[i * k + t] - g[0] / (m * p);
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    adj: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z = z + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / z);
}
