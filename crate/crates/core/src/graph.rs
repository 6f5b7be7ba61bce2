//! Reverse-mode automatic differentiation over recorded tensor operations.
//!
//! A [`Graph`] records every differentiable operation of one forward pass in
//! execution order. [`Graph::backward`] then visits the record exactly once
//! in reverse, accumulating gradients into each node; a second sweep without
//! a new forward pass is rejected. The operation set is intentionally narrow:
//! it covers the window encoder and the contrastive objective, nothing more.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Handle to a node inside one [`Graph`]. Ids from different graphs must not
/// be mixed; they are plain indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Forward-pass mode for operations with batch-dependent statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-feature batch statistics produced by a train-mode batch norm, used by
/// the caller to update running statistics.
#[derive(Debug, Clone)]
pub struct BatchNormStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

enum Op<S> {
    Leaf,
    Conv1d {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        dilation: usize,
    },
    Relu {
        input: NodeId,
    },
    Dense {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        epsilon: S,
        /// Statistics used for normalization: batch statistics in train
        /// mode, a copy of the running statistics in eval mode.
        mean: Vec<S>,
        var: Vec<S>,
        train: bool,
    },
    LastStep {
        input: NodeId,
    },
    SliceRows {
        input: NodeId,
        start: usize,
        rows: usize,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Mul {
        lhs: NodeId,
        rhs: NodeId,
    },
    Scale {
        input: NodeId,
        factor: S,
    },
    Sum {
        input: NodeId,
    },
    CosineMatrix {
        history: NodeId,
        future: NodeId,
        h_norms: Vec<S>,
        f_norms: Vec<S>,
    },
    InfoNce {
        sim: NodeId,
        tau: S,
        /// Row-wise softmax of sim/tau, saved for the backward pass.
        softmax: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    swept: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            swept: false,
        }
    }

    /// Insert an input tensor. Gradients are accumulated for it when its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, mut tensor: Tensor<S>) -> NodeId {
        tensor.zero_grad();
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward sweep's loss w.r.t. this node, if the
    /// node participates in differentiation.
    pub fn gradient(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].value.grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn val(&self, id: NodeId) -> &[S] {
        self.nodes[id.0].value.data()
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Causal dilated 1-d convolution.
    ///
    /// `input` is `[B, T, Cin]`, `weights` is `[k, Cin, Cout]`, `bias` is
    /// `[Cout]`. The input is implicitly zero-padded on the left so the
    /// output keeps length `T`; position `t` of the output only depends on
    /// input positions `t - j*dilation <= t`.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        dilation: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(input);
        let ws = self.shape(weights);
        let bs = self.shape(bias);
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 {
            return Err(Error::invalid(format!(
                "conv1d expects input [B,T,Cin], weights [k,Cin,Cout], bias [Cout]; \
                 got {:?}, {:?}, {:?}",
                xs, ws, bs
            )));
        }
        if dilation == 0 {
            return Err(Error::invalid("conv1d dilation must be >= 1"));
        }
        if ws[0] == 0 {
            return Err(Error::invalid("conv1d kernel size must be >= 1"));
        }
        if xs[2] != ws[1] {
            return Err(Error::invalid(format!(
                "conv1d channel mismatch: input has {} channels, weights expect {}",
                xs[2], ws[1]
            )));
        }
        if bs[0] != ws[2] {
            return Err(Error::invalid(format!(
                "conv1d bias length {} does not match {} output channels",
                bs[0], ws[2]
            )));
        }
        let (batch, tlen, cin) = (xs[0], xs[1], xs[2]);
        let (k, cout) = (ws[0], ws[2]);
        let out = conv1d_forward(
            self.val(input),
            self.val(weights),
            self.val(bias),
            batch,
            tlen,
            cin,
            k,
            cout,
            dilation,
        );
        let needs = self.needs(input) || self.needs(weights) || self.needs(bias);
        let value = Tensor::new(vec![batch, tlen, cout], out).expect("conv1d output shape");
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                weights,
                bias,
                dilation,
            },
            needs,
        ))
    }

    /// Elementwise max(x, 0). The subgradient at exactly 0 is 0.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out: Vec<S> = self
            .val(input)
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input);
        let value = Tensor::new(shape, out).expect("relu output shape");
        self.push(value, Op::Relu { input }, needs)
    }

    /// Affine map `x W + b` over a `[B, Fin]` input.
    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(input);
        let ws = self.shape(weights);
        let bs = self.shape(bias);
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::invalid(format!(
                "dense expects input [B,Fin], weights [Fin,Fout], bias [Fout]; got {:?}, {:?}, {:?}",
                xs, ws, bs
            )));
        }
        if xs[1] != ws[0] || bs[0] != ws[1] {
            return Err(Error::invalid(format!(
                "dense shape mismatch: input [?,{}], weights {:?}, bias [{}]",
                xs[1], ws, bs[0]
            )));
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[1]);
        let out = dense_forward(self.val(input), self.val(weights), self.val(bias), batch, fin, fout);
        let needs = self.needs(input) || self.needs(weights) || self.needs(bias);
        let value = Tensor::new(vec![batch, fout], out).expect("dense output shape");
        Ok(self.push(value, Op::Dense { input, weights, bias }, needs))
    }

    /// Batch normalization over a `[B, F]` input.
    ///
    /// Train mode normalizes by the batch statistics (biased variance) and
    /// returns them so the caller can update running statistics; it requires
    /// `B >= 2`. Eval mode normalizes by the supplied running statistics.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        epsilon: S,
        mode: Mode,
        running: Option<(&[S], &[S])>,
    ) -> Result<(NodeId, Option<BatchNormStats<S>>)> {
        let xs = self.shape(input);
        if xs.len() != 2 {
            return Err(Error::invalid(format!(
                "batch_norm expects input [B,F], got {:?}",
                xs
            )));
        }
        let (batch, feat) = (xs[0], xs[1]);
        if self.shape(gamma) != [feat] || self.shape(beta) != [feat] {
            return Err(Error::invalid(
                "batch_norm gamma/beta must have one entry per feature",
            ));
        }
        let (mean, var, train) = match mode {
            Mode::Train => {
                if batch < 2 {
                    return Err(Error::invalid(format!(
                        "batch_norm in train mode needs a batch of at least 2, got {}",
                        batch
                    )));
                }
                let (m, v) = batch_stats(self.val(input), batch, feat);
                (m, v, true)
            }
            Mode::Eval => {
                let (rm, rv) = running.ok_or_else(|| {
                    Error::invalid("batch_norm in eval mode needs running statistics")
                })?;
                if rm.len() != feat || rv.len() != feat {
                    return Err(Error::invalid(
                        "batch_norm running statistics length mismatch",
                    ));
                }
                (rm.to_vec(), rv.to_vec(), false)
            }
        };
        let out = bn_forward(
            self.val(input),
            self.val(gamma),
            self.val(beta),
            &mean,
            &var,
            epsilon,
            batch,
            feat,
        );
        let stats = if train {
            Some(BatchNormStats {
                mean: mean.clone(),
                var: var.clone(),
            })
        } else {
            None
        };
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::new(vec![batch, feat], out).expect("batch_norm output shape");
        let id = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                epsilon,
                mean,
                var,
                train,
            },
            needs,
        );
        Ok((id, stats))
    }

    /// Select the final time step of a `[B, T, C]` tensor, yielding `[B, C]`.
    pub fn last_step(&mut self, input: NodeId) -> Result<NodeId> {
        let xs = self.shape(input);
        if xs.len() != 3 || xs[1] == 0 {
            return Err(Error::invalid(format!(
                "last_step expects input [B,T>=1,C], got {:?}",
                xs
            )));
        }
        let (batch, tlen, ch) = (xs[0], xs[1], xs[2]);
        let x = self.val(input);
        let mut out = Vec::with_capacity(batch * ch);
        for b in 0..batch {
            let row = &x[(b * tlen + tlen - 1) * ch..][..ch];
            out.extend_from_slice(row);
        }
        let needs = self.needs(input);
        let value = Tensor::new(vec![batch, ch], out).expect("last_step output shape");
        Ok(self.push(value, Op::LastStep { input }, needs))
    }

    /// Select `rows` consecutive rows starting at `start` along dimension 0.
    pub fn slice_rows(&mut self, input: NodeId, start: usize, rows: usize) -> Result<NodeId> {
        let xs = self.shape(input);
        if xs.is_empty() {
            return Err(Error::invalid("slice_rows needs at least rank 1"));
        }
        if start + rows > xs[0] {
            return Err(Error::invalid(format!(
                "slice_rows {}..{} out of bounds for {} rows",
                start,
                start + rows,
                xs[0]
            )));
        }
        let row_size: usize = xs[1..].iter().product();
        let out = self.val(input)[start * row_size..(start + rows) * row_size].to_vec();
        let mut shape = xs.to_vec();
        shape[0] = rows;
        let needs = self.needs(input);
        let value = Tensor::new(shape, out).expect("slice_rows output shape");
        Ok(self.push(value, Op::SliceRows { input, start, rows }, needs))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::invalid(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(lhs),
                self.shape(rhs)
            )));
        }
        let out: Vec<S> = self
            .val(lhs)
            .iter()
            .zip(self.val(rhs))
            .map(|(&a, &b)| a + b)
            .collect();
        let shape = self.shape(lhs).to_vec();
        let needs = self.needs(lhs) || self.needs(rhs);
        let value = Tensor::new(shape, out).expect("add output shape");
        Ok(self.push(value, Op::Add { lhs, rhs }, needs))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::invalid(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.shape(lhs),
                self.shape(rhs)
            )));
        }
        let out: Vec<S> = self
            .val(lhs)
            .iter()
            .zip(self.val(rhs))
            .map(|(&a, &b)| a * b)
            .collect();
        let shape = self.shape(lhs).to_vec();
        let needs = self.needs(lhs) || self.needs(rhs);
        let value = Tensor::new(shape, out).expect("mul output shape");
        Ok(self.push(value, Op::Mul { lhs, rhs }, needs))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, input: NodeId, factor: S) -> NodeId {
        let out: Vec<S> = self.val(input).iter().map(|&v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input);
        let value = Tensor::new(shape, out).expect("scale output shape");
        self.push(value, Op::Scale { input, factor }, needs)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total: S = self.val(input).iter().copied().sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(total), Op::Sum { input }, needs)
    }

    /// Matrix of cosine similarities between the rows of two `[K, c]`
    /// tensors: entry `(i, j)` compares history row `i` with future row `j`.
    /// Norms are floored at a tiny constant so degenerate rows do not
    /// produce non-finite values.
    pub fn cosine_matrix(&mut self, history: NodeId, future: NodeId) -> Result<NodeId> {
        let hs = self.shape(history);
        let fs = self.shape(future);
        if hs.len() != 2 || fs.len() != 2 || hs != fs {
            return Err(Error::invalid(format!(
                "cosine_matrix expects two [K,c] tensors of equal shape, got {:?} and {:?}",
                hs, fs
            )));
        }
        let (k, c) = (hs[0], hs[1]);
        let h = self.val(history);
        let f = self.val(future);
        if !h.iter().chain(f.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("cosine_matrix saw non-finite embeddings"));
        }
        let h_norms = row_norms(h, k, c);
        let f_norms = row_norms(f, k, c);
        let mut out = vec![S::zero(); k * k];
        for i in 0..k {
            let hrow = &h[i * c..(i + 1) * c];
            for j in 0..k {
                let frow = &f[j * c..(j + 1) * c];
                let mut dot = S::zero();
                for (a, b) in hrow.iter().zip(frow) {
                    dot += *a * *b;
                }
                out[i * k + j] = dot / (h_norms[i] * f_norms[j]);
            }
        }
        let needs = self.needs(history) || self.needs(future);
        let value = Tensor::new(vec![k, k], out).expect("cosine_matrix output shape");
        Ok(self.push(
            value,
            Op::CosineMatrix {
                history,
                future,
                h_norms,
                f_norms,
            },
            needs,
        ))
    }

    /// Contrastive loss over a `[K, K]` similarity matrix at temperature
    /// `tau`: the positive-pair probability of row `i` is the scaled softmax
    /// of its diagonal entry, and the loss is the sum of their negative
    /// logs. Returns the loss node and the per-row positive probabilities.
    pub fn info_nce(&mut self, sim: NodeId, tau: S) -> Result<(NodeId, Vec<S>)> {
        let ss = self.shape(sim);
        if ss.len() != 2 || ss[0] != ss[1] {
            return Err(Error::invalid(format!(
                "info_nce expects a square similarity matrix, got {:?}",
                ss
            )));
        }
        let k = ss[0];
        if k < 2 {
            return Err(Error::invalid(
                "info_nce needs at least 2 pairs (one negative per positive)",
            ));
        }
        if !(tau > S::zero()) {
            return Err(Error::invalid("info_nce temperature must be positive"));
        }
        let simv = self.val(sim);
        if !simv.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("info_nce saw non-finite similarities"));
        }
        let mut softmax = vec![S::zero(); k * k];
        let mut rho = vec![S::zero(); k];
        let mut loss = S::zero();
        for i in 0..k {
            let row = &simv[i * k..(i + 1) * k];
            let mut maxv = row[0];
            for &v in row {
                if v > maxv {
                    maxv = v;
                }
            }
            let mut denom = S::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = ((v - maxv) / tau).exp();
                softmax[i * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                softmax[i * k + j] /= denom;
            }
            let p = softmax[i * k + i];
            rho[i] = p;
            loss -= p.ln();
        }
        let needs = self.needs(sim);
        let id = self.push(Tensor::scalar(loss), Op::InfoNce { sim, tau, softmax }, needs);
        Ok((id, rho))
    }

    /// Reverse sweep from a scalar loss node. Visits the recorded operations
    /// in exact reverse execution order; gradient accumulators start at zero.
    /// Forward values are left untouched, and a second sweep without a new
    /// forward recording is rejected.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.swept {
            return Err(Error::invalid(
                "backward already ran on this graph; record a new forward pass first",
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.swept = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        let mut done: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.accumulate_inputs(i, &gout, &mut grads);
            done[i] = Some(gout);
        }
        for (i, g) in done.into_iter().enumerate() {
            if let Some(g) = g {
                self.nodes[i].value.install_grad(g);
            }
        }
        Ok(())
    }

    /// Route `gout` of node `i` into the gradient accumulators of its inputs.
    fn accumulate_inputs(&self, i: usize, gout: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let ensure = |grads: &mut [Option<Vec<S>>], id: NodeId, len: usize| {
            grads[id.0].get_or_insert_with(|| vec![S::zero(); len]);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weights,
                bias,
                dilation,
            } => {
                let xs = self.shape(*input);
                let ws = self.shape(*weights);
                let (batch, tlen, cin) = (xs[0], xs[1], xs[2]);
                let (k, cout) = (ws[0], ws[2]);
                let x = self.val(*input);
                let w = self.val(*weights);
                if self.needs(*input) {
                    ensure(grads, *input, x.len());
                    conv1d_backward_input(
                        gout,
                        w,
                        grads[input.0].as_mut().unwrap(),
                        batch,
                        tlen,
                        cin,
                        k,
                        cout,
                        *dilation,
                    );
                }
                if self.needs(*weights) {
                    ensure(grads, *weights, w.len());
                    conv1d_backward_weights(
                        gout,
                        x,
                        grads[weights.0].as_mut().unwrap(),
                        batch,
                        tlen,
                        cin,
                        k,
                        cout,
                        *dilation,
                    );
                }
                if self.needs(*bias) {
                    ensure(grads, *bias, cout);
                    let gb = grads[bias.0].as_mut().unwrap();
                    for bt in 0..batch * tlen {
                        let row = &gout[bt * cout..(bt + 1) * cout];
                        for (g, &v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
            }
            Op::Relu { input } => {
                if self.needs(*input) {
                    let x = self.val(*input);
                    ensure(grads, *input, x.len());
                    let gx = grads[input.0].as_mut().unwrap();
                    for ((g, &v), &go) in gx.iter_mut().zip(x).zip(gout) {
                        if v > S::zero() {
                            *g += go;
                        }
                    }
                }
            }
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let xs = self.shape(*input);
                let ws = self.shape(*weights);
                let (batch, fin, fout) = (xs[0], xs[1], ws[1]);
                let x = self.val(*input);
                let w = self.val(*weights);
                if self.needs(*input) {
                    ensure(grads, *input, x.len());
                    let gx = grads[input.0].as_mut().unwrap();
                    for b in 0..batch {
                        let grow = &gout[b * fout..(b + 1) * fout];
                        let xrow = &mut gx[b * fin..(b + 1) * fin];
                        for fi in 0..fin {
                            let wrow = &w[fi * fout..(fi + 1) * fout];
                            let mut acc = S::zero();
                            for (wv, gv) in wrow.iter().zip(grow) {
                                acc += *wv * *gv;
                            }
                            xrow[fi] += acc;
                        }
                    }
                }
                if self.needs(*weights) {
                    ensure(grads, *weights, w.len());
                    let gw = grads[weights.0].as_mut().unwrap();
                    for b in 0..batch {
                        let grow = &gout[b * fout..(b + 1) * fout];
                        let xrow = &x[b * fin..(b + 1) * fin];
                        for (fi, &xv) in xrow.iter().enumerate() {
                            let wrow = &mut gw[fi * fout..(fi + 1) * fout];
                            for (g, &gv) in wrow.iter_mut().zip(grow) {
                                *g += xv * gv;
                            }
                        }
                    }
                }
                if self.needs(*bias) {
                    ensure(grads, *bias, fout);
                    let gb = grads[bias.0].as_mut().unwrap();
                    for b in 0..batch {
                        let grow = &gout[b * fout..(b + 1) * fout];
                        for (g, &gv) in gb.iter_mut().zip(grow) {
                            *g += gv;
                        }
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                epsilon,
                mean,
                var,
                train,
            } => {
                let xs = self.shape(*input);
                let (batch, feat) = (xs[0], xs[1]);
                let x = self.val(*input);
                let gam = self.val(*gamma);
                let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + *epsilon).sqrt()).collect();
                // xhat is recomputed; it is cheap relative to storing it.
                let xhat = |b: usize, f: usize| (x[b * feat + f] - mean[f]) * inv_std[f];
                if self.needs(*beta) {
                    ensure(grads, *beta, feat);
                    let gb = grads[beta.0].as_mut().unwrap();
                    for b in 0..batch {
                        for f in 0..feat {
                            gb[f] += gout[b * feat + f];
                        }
                    }
                }
                if self.needs(*gamma) {
                    ensure(grads, *gamma, feat);
                    let gg = grads[gamma.0].as_mut().unwrap();
                    for b in 0..batch {
                        for f in 0..feat {
                            gg[f] += gout[b * feat + f] * xhat(b, f);
                        }
                    }
                }
                if self.needs(*input) {
                    ensure(grads, *input, x.len());
                    let gx = grads[input.0].as_mut().unwrap();
                    if *train {
                        // d/dx of normalization by the batch's own statistics.
                        let bn = s::<S>(batch as f64);
                        for f in 0..feat {
                            let mut sum_dxhat = S::zero();
                            let mut sum_dxhat_xhat = S::zero();
                            for b in 0..batch {
                                let dxhat = gout[b * feat + f] * gam[f];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat(b, f);
                            }
                            for b in 0..batch {
                                let dxhat = gout[b * feat + f] * gam[f];
                                gx[b * feat + f] += inv_std[f]
                                    * (dxhat - sum_dxhat / bn - xhat(b, f) * sum_dxhat_xhat / bn);
                            }
                        }
                    } else {
                        for b in 0..batch {
                            for f in 0..feat {
                                gx[b * feat + f] += gout[b * feat + f] * gam[f] * inv_std[f];
                            }
                        }
                    }
                }
            }
            Op::LastStep { input } => {
                if self.needs(*input) {
                    let xs = self.shape(*input);
                    let (batch, tlen, ch) = (xs[0], xs[1], xs[2]);
                    ensure(grads, *input, batch * tlen * ch);
                    let gx = grads[input.0].as_mut().unwrap();
                    for b in 0..batch {
                        let dst = &mut gx[(b * tlen + tlen - 1) * ch..][..ch];
                        let src = &gout[b * ch..(b + 1) * ch];
                        for (g, &v) in dst.iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                }
            }
            Op::SliceRows { input, start, rows } => {
                if self.needs(*input) {
                    let xs = self.shape(*input);
                    let row_size: usize = xs[1..].iter().product();
                    ensure(grads, *input, xs[0] * row_size);
                    let gx = grads[input.0].as_mut().unwrap();
                    let dst = &mut gx[start * row_size..(start + rows) * row_size];
                    for (g, &v) in dst.iter_mut().zip(gout) {
                        *g += v;
                    }
                }
            }
            Op::Add { lhs, rhs } => {
                for id in [lhs, rhs] {
                    if self.needs(*id) {
                        ensure(grads, *id, gout.len());
                        let g = grads[id.0].as_mut().unwrap();
                        for (gi, &v) in g.iter_mut().zip(gout) {
                            *gi += v;
                        }
                    }
                }
            }
            Op::Mul { lhs, rhs } => {
                if self.needs(*lhs) {
                    let rv = self.val(*rhs);
                    ensure(grads, *lhs, gout.len());
                    let g = grads[lhs.0].as_mut().unwrap();
                    for ((gi, &v), &other) in g.iter_mut().zip(gout).zip(rv) {
                        *gi += v * other;
                    }
                }
                if self.needs(*rhs) {
                    let lv = self.val(*lhs);
                    ensure(grads, *rhs, gout.len());
                    let g = grads[rhs.0].as_mut().unwrap();
                    for ((gi, &v), &other) in g.iter_mut().zip(gout).zip(lv) {
                        *gi += v * other;
                    }
                }
            }
            Op::Scale { input, factor } => {
                if self.needs(*input) {
                    ensure(grads, *input, gout.len());
                    let g = grads[input.0].as_mut().unwrap();
                    for (gi, &v) in g.iter_mut().zip(gout) {
                        *gi += v * *factor;
                    }
                }
            }
            Op::Sum { input } => {
                if self.needs(*input) {
                    let len = self.val(*input).len();
                    ensure(grads, *input, len);
                    let g = grads[input.0].as_mut().unwrap();
                    let go = gout[0];
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                }
            }
            Op::CosineMatrix {
                history,
                future,
                h_norms,
                f_norms,
            } => {
                let hs = self.shape(*history);
                let (k, c) = (hs[0], hs[1]);
                let h = self.val(*history);
                let f = self.val(*future);
                let sim = node.value.data();
                // Unit rows: u_i = h_i/|h_i|, v_j = f_j/|f_j|.
                // d sim_ij / d h_i = (v_j - sim_ij * u_i) / |h_i|
                // d sim_ij / d f_j = (u_i - sim_ij * v_j) / |f_j|
                if self.needs(*history) {
                    ensure(grads, *history, h.len());
                    let gh = grads[history.0].as_mut().unwrap();
                    for i in 0..k {
                        let hrow = &h[i * c..(i + 1) * c];
                        let ghrow = &mut gh[i * c..(i + 1) * c];
                        for j in 0..k {
                            let go = gout[i * k + j];
                            if go == S::zero() {
                                continue;
                            }
                            let frow = &f[j * c..(j + 1) * c];
                            let sij = sim[i * k + j];
                            let scale = go / h_norms[i];
                            for t in 0..c {
                                let v = frow[t] / f_norms[j];
                                let u = hrow[t] / h_norms[i];
                                ghrow[t] += scale * (v - sij * u);
                            }
                        }
                    }
                }
                if self.needs(*future) {
                    ensure(grads, *future, f.len());
                    let gf = grads[future.0].as_mut().unwrap();
                    for j in 0..k {
                        let frow = &f[j * c..(j + 1) * c];
                        let gfrow = &mut gf[j * c..(j + 1) * c];
                        for i in 0..k {
                            let go = gout[i * k + j];
                            if go == S::zero() {
                                continue;
                            }
                            let hrow = &h[i * c..(i + 1) * c];
                            let sij = sim[i * k + j];
                            let scale = go / f_norms[j];
                            for t in 0..c {
                                let u = hrow[t] / h_norms[i];
                                let v = frow[t] / f_norms[j];
                                gfrow[t] += scale * (u - sij * v);
                            }
                        }
                    }
                }
            }
            Op::InfoNce { sim, tau, softmax } => {
                if self.needs(*sim) {
                    let k = self.shape(*sim)[0];
                    ensure(grads, *sim, k * k);
                    let gs = grads[sim.0].as_mut().unwrap();
                    let go = gout[0];
                    // dL/dsim_ij = (p_ij - [i == j]) / tau
                    for i in 0..k {
                        for j in 0..k {
                            let delta = if i == j { S::one() } else { S::zero() };
                            gs[i * k + j] += go * (softmax[i * k + j] - delta) / *tau;
                        }
                    }
                }
            }
        }
    }
}

fn row_norms<S: Scalar>(data: &[S], rows: usize, cols: usize) -> Vec<S> {
    let floor = s::<S>(1e-12);
    (0..rows)
        .map(|r| {
            let row = &data[r * cols..(r + 1) * cols];
            let mut sq = S::zero();
            for &v in row {
                sq += v * v;
            }
            let n = sq.sqrt();
            if n > floor {
                n
            } else {
                floor
            }
        })
        .collect()
}

fn batch_stats<S: Scalar>(x: &[S], batch: usize, feat: usize) -> (Vec<S>, Vec<S>) {
    let bn = s::<S>(batch as f64);
    let mut mean = vec![S::zero(); feat];
    for b in 0..batch {
        for f in 0..feat {
            mean[f] += x[b * feat + f];
        }
    }
    for m in mean.iter_mut() {
        *m /= bn;
    }
    let mut var = vec![S::zero(); feat];
    for b in 0..batch {
        for f in 0..feat {
            let d = x[b * feat + f] - mean[f];
            var[f] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= bn;
    }
    (mean, var)
}

fn bn_forward<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    mean: &[S],
    var: &[S],
    epsilon: S,
    batch: usize,
    feat: usize,
) -> Vec<S> {
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + epsilon).sqrt()).collect();
    let mut out = vec![S::zero(); batch * feat];
    for b in 0..batch {
        for f in 0..feat {
            out[b * feat + f] = gamma[f] * (x[b * feat + f] - mean[f]) * inv_std[f] + beta[f];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv1d_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    bias: &[S],
    batch: usize,
    tlen: usize,
    cin: usize,
    k: usize,
    cout: usize,
    dilation: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); batch * tlen * cout];
    for b in 0..batch {
        for t in 0..tlen {
            let orow = &mut out[(b * tlen + t) * cout..][..cout];
            orow.copy_from_slice(bias);
            for j in 0..k {
                let Some(tp) = t.checked_sub(j * dilation) else {
                    break;
                };
                let xrow = &x[(b * tlen + tp) * cin..][..cin];
                for (ci, &xv) in xrow.iter().enumerate() {
                    let wrow = &w[(j * cin + ci) * cout..][..cout];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward_input<S: Scalar>(
    gout: &[S],
    w: &[S],
    gx: &mut [S],
    batch: usize,
    tlen: usize,
    cin: usize,
    k: usize,
    cout: usize,
    dilation: usize,
) {
    for b in 0..batch {
        for t in 0..tlen {
            let grow = &gout[(b * tlen + t) * cout..][..cout];
            for j in 0..k {
                let Some(tp) = t.checked_sub(j * dilation) else {
                    break;
                };
                let gxrow = &mut gx[(b * tlen + tp) * cin..][..cin];
                for (ci, gxv) in gxrow.iter_mut().enumerate() {
                    let wrow = &w[(j * cin + ci) * cout..][..cout];
                    let mut acc = S::zero();
                    for (&gv, &wv) in grow.iter().zip(wrow) {
                        acc += gv * wv;
                    }
                    *gxv += acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward_weights<S: Scalar>(
    gout: &[S],
    x: &[S],
    gw: &mut [S],
    batch: usize,
    tlen: usize,
    cin: usize,
    k: usize,
    cout: usize,
    dilation: usize,
) {
    for b in 0..batch {
        for t in 0..tlen {
            let grow = &gout[(b * tlen + t) * cout..][..cout];
            for j in 0..k {
                let Some(tp) = t.checked_sub(j * dilation) else {
                    break;
                };
                let xrow = &x[(b * tlen + tp) * cin..][..cin];
                for (ci, &xv) in xrow.iter().enumerate() {
                    let gwrow = &mut gw[(j * cin + ci) * cout..][..cout];
                    for (g, &gv) in gwrow.iter_mut().zip(grow) {
                        *g += xv * gv;
                    }
                }
            }
        }
    }
}

fn dense_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    bias: &[S],
    batch: usize,
    fin: usize,
    fout: usize,
) -> Vec<S> {
    let mut out = vec![S::zero(); batch * fout];
    for b in 0..batch {
        let orow = &mut out[b * fout..(b + 1) * fout];
        orow.copy_from_slice(bias);
        let xrow = &x[b * fin..(b + 1) * fin];
        for (fi, &xv) in xrow.iter().enumerate() {
            let wrow = &w[fi * fout..(fi + 1) * fout];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    out
}
