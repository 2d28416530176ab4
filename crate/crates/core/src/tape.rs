//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every op appends a node to the [`Tape`]; node `k` only references nodes
//! with index `< k`, so a single reverse sweep visits operands after their
//! consumers. Gradients of leaves that fan out into several consumers are
//! summed.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};

/// Variance floor added inside batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Added to each norm product in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined op: `(upstream, operand values) -> operand gradients`.
pub type CustomBackward<S> = Box<dyn Fn(&Tensor<S>, &[&Tensor<S>]) -> Vec<Tensor<S>> + Send>;

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sum(Var),
    Scale(Var, S),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        /// Train mode: statistics depend on `x`.
        batch_stats: bool,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<S>,
        labels: Vec<usize>,
    },
    Grl(Var, S),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    CosineMean {
        a: Var,
        b: Var,
        dots: Vec<S>,
        norm_a: Vec<S>,
        norm_b: Vec<S>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Per-feature batch statistics produced by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// Exponentially averaged moments used by eval-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMoments<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> RunningMoments<S> {
    pub fn new(width: usize) -> Self {
        RunningMoments {
            mean: vec![S::zero(); width],
            var: vec![S::one(); width],
        }
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update(&mut self, batch: &BatchMoments<S>, momentum: S) {
        let keep = S::one() - momentum;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + momentum * b;
        }
    }
}

/// Batch-norm normalization source.
pub enum BnMode<'a, S> {
    Train,
    Eval(&'a RunningMoments<S>),
}

/// Recorded computation.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    /// Leaf that always receives a gradient.
    pub fn param(&mut self, tensor: Tensor<S>) -> Var {
        self.push(tensor.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2().ok_or_else(|| Error::Shape {
            op,
            lhs: self.value(v).shape().to_vec(),
            rhs: vec![0, 0],
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `x·w + bias`, bias broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (m, k) = self.matrix("affine", x)?;
        let (k2, n) = self.matrix("affine", w)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "affine",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        if self.value(bias).shape() != [n] {
            return Err(Error::Shape {
                op: "affine",
                lhs: vec![k2, n],
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let mut out = matmul_raw(self.value(x).data(), self.value(w).data(), m, k, n);
        let bd = self.value(bias).data();
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bd) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, w, bias]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Affine(x, w, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Sum of all elements into a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    /// Batch normalization over the rows of `x[b×d]`.
    ///
    /// In train mode the returned moments are the biased batch statistics the
    /// caller should fold into its running moments.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, S>,
    ) -> Result<(Var, Option<BatchMoments<S>>)> {
        let (b, d) = self.matrix("batch_norm", x)?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return Err(Error::Shape {
                    op: "batch_norm",
                    lhs: vec![b, d],
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let eps = S::of(BN_EPS);
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match mode {
            BnMode::Train => {
                if b < 2 {
                    return Err(Error::BatchSize {
                        op: "batch_norm",
                        batch: b,
                        min: 2,
                    });
                }
                let bs = S::of_usize(b);
                let mut mean = vec![S::zero(); d];
                for row in xv.chunks(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= bs);
                let mut var = vec![S::zero(); d];
                for row in xv.chunks(d) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= bs);
                (mean, var, true)
            }
            BnMode::Eval(running) => {
                if running.mean.len() != d {
                    return Err(Error::Shape {
                        op: "batch_norm",
                        lhs: vec![b, d],
                        rhs: vec![running.mean.len()],
                    });
                }
                (running.mean.clone(), running.var.clone(), false)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let sh = self.value(beta).data();
        let mut xhat = Vec::with_capacity(b * d);
        let mut out = Vec::with_capacity(b * d);
        for row in xv.chunks(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + sh[j]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let var_out = self.push(
            Tensor::from_parts(vec![b, d], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        let moments = batch_stats.then_some(BatchMoments { mean, var });
        Ok((var_out, moments))
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.matrix("softmax_cross_entropy", logits)?;
        if labels.len() != b {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: vec![b, k],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label, classes: k });
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * k);
        let mut total = S::zero();
        for (row, &y) in lv.chunks(k).zip(labels) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&l| (l - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[y];
            probs.extend(row.iter().map(|&l| (l - m).exp() / z));
        }
        let loss = total / S::of_usize(b);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Gradient reversal: identity forward, `−coeff × upstream` backward.
    pub fn grl(&mut self, x: Var, coeff: S) -> Var {
        let t = self.value(x).clone().with_requires_grad(false);
        let rg = self.rg(&[x]);
        self.push(t, Op::Grl(x, coeff), rg)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows needs at least one input"))?;
        let (_, c) = self.matrix("concat_rows", first)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c2) = self.matrix("concat_rows", p)?;
            if c2 != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![r, c2],
                });
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vec![r, c],
                rhs: vec![start, start + len],
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![len, c], data), Op::SliceRows { x, start }, rg))
    }

    /// Mean over rows of `⟨a_i, b_i⟩ / (|a_i|·|b_i| + ε)`.
    pub fn cosine_similarity_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.matrix("cosine_similarity_mean", a)?;
        if self.value(b).shape() != [n, d] {
            return Err(Error::Shape {
                op: "cosine_similarity_mean",
                lhs: vec![n, d],
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let eps = S::of(COSINE_EPS);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut dots = Vec::with_capacity(n);
        let mut norm_a = Vec::with_capacity(n);
        let mut norm_b = Vec::with_capacity(n);
        let mut total = S::zero();
        for (ra, rb) in av.chunks(d).zip(bv.chunks(d)) {
            let dot: S = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            let na = ra.iter().map(|&x| x * x).sum::<S>().sqrt();
            let nb = rb.iter().map(|&x| x * x).sum::<S>().sqrt();
            total += dot / (na * nb + eps);
            dots.push(dot);
            norm_a.push(na);
            norm_b.push(nb);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::scalar(total / S::of_usize(n)),
            Op::CosineMean {
                a,
                b,
                dots,
                norm_a,
                norm_b,
            },
            rg,
        ))
    }

    /// Records an op with a caller-supplied forward value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<S>, backward: CustomBackward<S>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads,
                shapes: self.shapes(),
            });
        }
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.shapes(),
        })
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        self.nodes.iter().map(|n| n.value.shape().to_vec()).collect()
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let mut acc = |v: Var, contrib: Vec<S>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                if self.nodes[a.0].requires_grad {
                    acc(*a, matmul_nt(g, self.value(*b).data(), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, matmul_tn(self.value(*a).data(), g, m, k, n));
                }
            }
            Op::Affine(x, w, bias) => {
                let (m, k) = self.value(*x).dims2().unwrap();
                let n = self.value(*w).dims2().unwrap().1;
                if self.nodes[x.0].requires_grad {
                    acc(*x, matmul_nt(g, self.value(*w).data(), m, n, k));
                }
                if self.nodes[w.0].requires_grad {
                    acc(*w, matmul_tn(self.value(*x).data(), g, m, k, n));
                }
                if self.nodes[bias.0].requires_grad {
                    let mut db = vec![S::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0]; n]);
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|&v| v * *c).collect()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > S::zero() { gv } else { S::zero() })
                        .collect(),
                );
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (b, d) = self.value(*x).dims2().unwrap();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                let mut sum_dxhat = vec![S::zero(); d];
                let mut sum_dxhat_xhat = vec![S::zero(); d];
                for i in 0..b {
                    for j in 0..d {
                        let gv = g[i * d + j];
                        let h = xhat[i * d + j];
                        dbeta[j] += gv;
                        dgamma[j] += gv * h;
                        let dh = gv * gam[j];
                        sum_dxhat[j] += dh;
                        sum_dxhat_xhat[j] += dh * h;
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![S::zero(); b * d];
                    let bs = S::of_usize(b);
                    for i in 0..b {
                        for j in 0..d {
                            let dh = g[i * d + j] * gam[j];
                            dx[i * d + j] = if *batch_stats {
                                inv_std[j] / bs * (bs * dh - sum_dxhat[j] - xhat[i * d + j] * sum_dxhat_xhat[j])
                            } else {
                                dh * inv_std[j]
                            };
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::SoftmaxXent { logits, probs, labels } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / S::of_usize(labels.len());
                let mut d: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= scale;
                }
                acc(*logits, d);
            }
            Op::Grl(x, c) => {
                let c = *c;
                acc(*x, g.iter().map(|&v| -(c * v)).collect());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.dims2().unwrap().1;
                let mut d = vec![S::zero(); xv.numel()];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                acc(*x, d);
            }
            Op::CosineMean {
                a,
                b,
                dots,
                norm_a,
                norm_b,
            } => {
                let (n, d) = self.value(*a).dims2().unwrap();
                let eps = S::of(COSINE_EPS);
                let scale = g[0] / S::of_usize(n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![S::zero(); n * d];
                let mut db = vec![S::zero(); n * d];
                for i in 0..n {
                    let (na, nb, dot) = (norm_a[i], norm_b[i], dots[i]);
                    let den = na * nb + eps;
                    let ra = &av[i * d..(i + 1) * d];
                    let rb = &bv[i * d..(i + 1) * d];
                    // ∂(dot/den)/∂a = b/den − dot·nb·(a/na)/den²
                    let ca = if na > S::zero() {
                        dot * nb / (na * den * den)
                    } else {
                        S::zero()
                    };
                    let cb = if nb > S::zero() {
                        dot * na / (nb * den * den)
                    } else {
                        S::zero()
                    };
                    for j in 0..d {
                        da[i * d + j] = scale * (rb[j] / den - ca * ra[j]);
                        db[i * d + j] = scale * (ra[j] / den - cb * rb[j]);
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Custom { inputs, backward } => {
                let upstream = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let vals: Vec<&Tensor<S>> = inputs.iter().map(|v| self.value(*v)).collect();
                let outs = backward(&upstream, &vals);
                for (v, t) in inputs.iter().zip(outs) {
                    acc(*v, t.into_data());
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, zero-filled when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn has(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}
