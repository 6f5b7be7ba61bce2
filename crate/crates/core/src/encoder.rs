//! Window encoder: stacked dilated causal convolutions followed by a dense
//! projection head.
//!
//! Each stack applies one causal conv + ReLU per dilation rate with a
//! residual connection around the whole stack (1x1-projected when the
//! channel counts differ). The feature vector is the activation at the last
//! time step of the final stack; the head maps it through two
//! dense->ReLU->batch-norm layers and a final linear layer to the code size.
//! History and future windows share one set of weights unless
//! `separate_heads` is set, in which case future windows go through their
//! own projection head.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{BatchNormStats, Graph, Mode, NodeId};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Which window role an encoding serves. Only meaningful when a config
/// enables `separate_heads`; otherwise both roles share every weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    History,
    Future,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Samples per window (w).
    pub window_len: usize,
    /// Input channels (d).
    pub channels: usize,
    /// Convolution filters per layer.
    pub filters: usize,
    /// Convolution kernel size.
    pub kernel: usize,
    /// Dilation rate of each conv layer within a stack.
    pub dilations: Vec<usize>,
    /// Number of stacks.
    pub stacks: usize,
    /// Widths of the two hidden head layers.
    pub head_widths: [usize; 2],
    /// Embedding length (c).
    pub code_size: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub separate_heads: bool,
}

impl EncoderConfig {
    /// Defaults from the reference architecture; window length and channel
    /// count are data-dependent and always explicit.
    pub fn new(window_len: usize, channels: usize) -> Self {
        EncoderConfig {
            window_len,
            channels,
            filters: 64,
            kernel: 4,
            dilations: vec![1, 4, 16],
            stacks: 2,
            head_widths: [128, 64],
            code_size: 10,
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
            separate_heads: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.channels == 0 || self.code_size == 0 {
            return Err(Error::invalid(
                "window_len, channels and code_size must all be >= 1",
            ));
        }
        if self.filters == 0 || self.kernel == 0 || self.stacks == 0 {
            return Err(Error::invalid("filters, kernel and stacks must be >= 1"));
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::invalid("dilations must be non-empty and positive"));
        }
        if self.head_widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("head widths must be >= 1"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::invalid("bn_momentum must lie in (0, 1)"));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(Error::invalid("bn_epsilon must be positive"));
        }
        Ok(())
    }
}

/// Number of trailing input samples that can influence the last-timestep
/// feature vector: `1 + stacks * sum((kernel - 1) * dilation)`.
pub fn receptive_field(config: &EncoderConfig) -> usize {
    let per_stack: usize = config
        .dilations
        .iter()
        .map(|d| (config.kernel - 1) * d)
        .sum();
    1 + config.stacks * per_stack
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<S> {
    pub weight: Tensor<S>, // [k, Cin, Cout]
    pub bias: Tensor<S>,   // [Cout]
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackParams<S> {
    pub convs: Vec<ConvParams<S>>,
    /// 1x1 projection for the residual path; present only when the stack's
    /// input channel count differs from `filters`.
    pub proj: Option<ConvParams<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<S> {
    pub weight: Tensor<S>, // [Fin, Fout]
    pub bias: Tensor<S>,   // [Fout]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<S> {
    pub hidden: Vec<(DenseParams<S>, BnParams<S>)>,
    pub out: DenseParams<S>,
}

/// Full parameter set of one encoder, including batch-norm running
/// statistics, with the config echoed alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<S> {
    config: EncoderConfig,
    pub stacks: Vec<StackParams<S>>,
    pub head: HeadParams<S>,
    pub future_head: Option<HeadParams<S>>,
}

impl<S: Scalar> EncoderParams<S> {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// All-zero parameter set with the shapes implied by `config`; used as
    /// the target when loading checkpoints.
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut stacks = Vec::with_capacity(config.stacks);
        let mut cin = config.channels;
        for _ in 0..config.stacks {
            let mut convs = Vec::with_capacity(config.dilations.len());
            let mut layer_in = cin;
            for _ in &config.dilations {
                convs.push(ConvParams {
                    weight: Tensor::zeros(vec![config.kernel, layer_in, config.filters]),
                    bias: Tensor::zeros(vec![config.filters]),
                });
                layer_in = config.filters;
            }
            let proj = (cin != config.filters).then(|| ConvParams {
                weight: Tensor::zeros(vec![1, cin, config.filters]),
                bias: Tensor::zeros(vec![config.filters]),
            });
            stacks.push(StackParams { convs, proj });
            cin = config.filters;
        }
        let head = Self::zero_head(&config);
        let future_head = config.separate_heads.then(|| Self::zero_head(&config));
        Ok(EncoderParams {
            config,
            stacks,
            head,
            future_head,
        })
    }

    fn zero_head(config: &EncoderConfig) -> HeadParams<S> {
        let mut hidden = Vec::with_capacity(2);
        let mut fin = config.filters;
        for &width in &config.head_widths {
            hidden.push((
                DenseParams {
                    weight: Tensor::zeros(vec![fin, width]),
                    bias: Tensor::zeros(vec![width]),
                },
                BnParams {
                    gamma: Tensor::zeros(vec![width]),
                    beta: Tensor::zeros(vec![width]),
                    running_mean: Tensor::zeros(vec![width]),
                    running_var: Tensor::zeros(vec![width]),
                },
            ));
            fin = width;
        }
        HeadParams {
            hidden,
            out: DenseParams {
                weight: Tensor::zeros(vec![fin, config.code_size]),
                bias: Tensor::zeros(vec![config.code_size]),
            },
        }
    }

    /// Every tensor with its canonical name, running statistics included.
    /// The order is fixed; it defines the checkpoint section order, the
    /// leaf insertion order and the optimizer slot order.
    pub fn visit(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (si, stack) in self.stacks.iter().enumerate() {
            for (ci, conv) in stack.convs.iter().enumerate() {
                out.push((format!("stack{si}.conv{ci}.weight"), &conv.weight));
                out.push((format!("stack{si}.conv{ci}.bias"), &conv.bias));
            }
            if let Some(proj) = &stack.proj {
                out.push((format!("stack{si}.proj.weight"), &proj.weight));
                out.push((format!("stack{si}.proj.bias"), &proj.bias));
            }
        }
        visit_head(&self.head, "head", &mut out);
        if let Some(fh) = &self.future_head {
            visit_head(fh, "future_head", &mut out);
        }
        out
    }

    /// Trainable tensors in canonical order (running statistics excluded).
    pub fn trainable(&self) -> Vec<&Tensor<S>> {
        self.visit()
            .into_iter()
            .filter(|(name, _)| !name.contains("running_"))
            .map(|(_, t)| t)
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for stack in self.stacks.iter_mut() {
            for conv in stack.convs.iter_mut() {
                out.push(&mut conv.weight);
                out.push(&mut conv.bias);
            }
            if let Some(proj) = stack.proj.as_mut() {
                out.push(&mut proj.weight);
                out.push(&mut proj.bias);
            }
        }
        for head in [Some(&mut self.head), self.future_head.as_mut()]
            .into_iter()
            .flatten()
        {
            for (dense, bn) in head.hidden.iter_mut() {
                out.push(&mut dense.weight);
                out.push(&mut dense.bias);
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
            out.push(&mut head.out.weight);
            out.push(&mut head.out.bias);
        }
        out
    }

    /// Number of trainable values.
    pub fn param_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Blend freshly computed batch statistics into the running statistics
    /// of the given head: `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(&mut self, role: Role, stats: &[BatchNormStats<S>]) -> Result<()> {
        let momentum = s::<S>(self.config.bn_momentum);
        let head = match (role, self.future_head.as_mut()) {
            (Role::Future, Some(fh)) => fh,
            _ => &mut self.head,
        };
        if stats.len() != head.hidden.len() {
            return Err(Error::invalid(format!(
                "expected {} batch-norm stats, got {}",
                head.hidden.len(),
                stats.len()
            )));
        }
        for ((_, bn), st) in head.hidden.iter_mut().zip(stats) {
            blend(bn.running_mean.data_mut(), &st.mean, momentum);
            blend(bn.running_var.data_mut(), &st.var, momentum);
        }
        Ok(())
    }
}

fn blend<S: Scalar>(running: &mut [S], batch: &[S], momentum: S) {
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = momentum * *r + (S::one() - momentum) * b;
    }
}

fn visit_head<'a, S: Scalar>(
    head: &'a HeadParams<S>,
    prefix: &str,
    out: &mut Vec<(String, &'a Tensor<S>)>,
) {
    for (i, (dense, bn)) in head.hidden.iter().enumerate() {
        out.push((format!("{prefix}.dense{i}.weight"), &dense.weight));
        out.push((format!("{prefix}.dense{i}.bias"), &dense.bias));
        out.push((format!("{prefix}.bn{i}.gamma"), &bn.gamma));
        out.push((format!("{prefix}.bn{i}.beta"), &bn.beta));
        out.push((format!("{prefix}.bn{i}.running_mean"), &bn.running_mean));
        out.push((format!("{prefix}.bn{i}.running_var"), &bn.running_var));
    }
    out.push((format!("{prefix}.out.weight"), &head.out.weight));
    out.push((format!("{prefix}.out.bias"), &head.out.bias));
}

/// He-style fan-in scaled random initialization: weights drawn from
/// N(0, sqrt(2 / fan_in)), biases zero, batch-norm gamma 1 / beta 0,
/// running statistics (0, 1). Deterministic for a given seed.
pub fn init<S: Scalar>(config: &EncoderConfig, seed: u64) -> Result<EncoderParams<S>> {
    let mut params = EncoderParams::<S>::zeros(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |t: &mut Tensor<S>, fan_in: usize| {
        let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        for v in t.data_mut() {
            *v = s(normal.sample(&mut rng));
        }
    };
    for stack in params.stacks.iter_mut() {
        for conv in stack.convs.iter_mut() {
            let shape = conv.weight.shape().to_vec();
            fill(&mut conv.weight, shape[0] * shape[1]);
        }
        if let Some(proj) = stack.proj.as_mut() {
            let shape = proj.weight.shape().to_vec();
            fill(&mut proj.weight, shape[0] * shape[1]);
        }
    }
    for head in [Some(&mut params.head), params.future_head.as_mut()]
        .into_iter()
        .flatten()
    {
        for (dense, bn) in head.hidden.iter_mut() {
            let fan_in = dense.weight.shape()[0];
            fill(&mut dense.weight, fan_in);
            bn.gamma.data_mut().fill(S::one());
            bn.running_var.data_mut().fill(S::one());
        }
        let fan_in = head.out.weight.shape()[0];
        fill(&mut head.out.weight, fan_in);
    }
    Ok(params)
}

struct ConvNodes {
    weight: NodeId,
    bias: NodeId,
}

struct StackNodes {
    convs: Vec<ConvNodes>,
    proj: Option<ConvNodes>,
}

struct DenseNodes {
    weight: NodeId,
    bias: NodeId,
}

struct BnNodes<S> {
    gamma: NodeId,
    beta: NodeId,
    running_mean: Vec<S>,
    running_var: Vec<S>,
}

struct HeadNodes<S> {
    hidden: Vec<(DenseNodes, BnNodes<S>)>,
    out: DenseNodes,
}

/// Graph-resident copies of the encoder parameters for one forward pass.
pub struct ParamNodes<S> {
    stacks: Vec<StackNodes>,
    head: HeadNodes<S>,
    future_head: Option<HeadNodes<S>>,
}

impl<S: Scalar> EncoderParams<S> {
    /// Clone every trainable tensor into the graph as leaves; running
    /// statistics travel by value, they are not differentiated.
    pub fn insert_leaves(&self, g: &mut Graph<S>, track_gradients: bool) -> ParamNodes<S> {
        let leaf =
            |g: &mut Graph<S>, t: &Tensor<S>| g.leaf(t.clone().with_requires_grad(track_gradients));
        let stacks = self
            .stacks
            .iter()
            .map(|stack| StackNodes {
                convs: stack
                    .convs
                    .iter()
                    .map(|c| ConvNodes {
                        weight: leaf(g, &c.weight),
                        bias: leaf(g, &c.bias),
                    })
                    .collect(),
                proj: stack.proj.as_ref().map(|p| ConvNodes {
                    weight: leaf(g, &p.weight),
                    bias: leaf(g, &p.bias),
                }),
            })
            .collect();
        let head_nodes = |g: &mut Graph<S>, head: &HeadParams<S>| HeadNodes {
            hidden: head
                .hidden
                .iter()
                .map(|(dense, bn)| {
                    (
                        DenseNodes {
                            weight: leaf(g, &dense.weight),
                            bias: leaf(g, &dense.bias),
                        },
                        BnNodes {
                            gamma: leaf(g, &bn.gamma),
                            beta: leaf(g, &bn.beta),
                            running_mean: bn.running_mean.data().to_vec(),
                            running_var: bn.running_var.data().to_vec(),
                        },
                    )
                })
                .collect(),
            out: DenseNodes {
                weight: leaf(g, &head.out.weight),
                bias: leaf(g, &head.out.bias),
            },
        };
        let head = head_nodes(g, &self.head);
        let future_head = self.future_head.as_ref().map(|fh| head_nodes(g, fh));
        ParamNodes {
            stacks,
            head,
            future_head,
        }
    }

    /// Gradients of the trainable tensors after a backward sweep, in
    /// canonical order.
    pub fn collect_gradients(&self, g: &Graph<S>, nodes: &ParamNodes<S>) -> Vec<Vec<S>> {
        let ids = nodes.trainable_ids();
        ids.iter()
            .zip(self.trainable())
            .map(|(id, t)| match g.gradient(*id) {
                Some(grad) => grad.to_vec(),
                None => vec![S::zero(); t.len()],
            })
            .collect()
    }
}

impl<S> ParamNodes<S> {
    /// Leaf ids of the trainable tensors, mirroring
    /// `EncoderParams::trainable` order.
    fn trainable_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for stack in &self.stacks {
            for conv in &stack.convs {
                out.push(conv.weight);
                out.push(conv.bias);
            }
            if let Some(proj) = &stack.proj {
                out.push(proj.weight);
                out.push(proj.bias);
            }
        }
        for head in [Some(&self.head), self.future_head.as_ref()]
            .into_iter()
            .flatten()
        {
            for (dense, bn) in &head.hidden {
                out.push(dense.weight);
                out.push(dense.bias);
                out.push(bn.gamma);
                out.push(bn.beta);
            }
            out.push(head.out.weight);
            out.push(head.out.bias);
        }
        out
    }
}

/// Run the TCN stacks over `input` ([B, T, Cin]) up to the last-timestep
/// feature vector [B, filters].
fn tcn_features<S: Scalar>(
    g: &mut Graph<S>,
    config: &EncoderConfig,
    nodes: &ParamNodes<S>,
    input: NodeId,
) -> Result<NodeId> {
    let mut x = input;
    for stack in &nodes.stacks {
        let stack_in = x;
        for (conv, &dilation) in stack.convs.iter().zip(&config.dilations) {
            let y = g.conv1d(x, conv.weight, conv.bias, dilation)?;
            x = g.relu(y);
        }
        let residual = match &stack.proj {
            Some(proj) => g.conv1d(stack_in, proj.weight, proj.bias, 1)?,
            None => stack_in,
        };
        x = g.add(x, residual)?;
    }
    g.last_step(x)
}

/// Apply one projection head to a [B, filters] feature matrix. Returns the
/// embedding node and, in train mode, the batch statistics of each
/// batch-norm layer in layer order.
fn head_forward<S: Scalar>(
    g: &mut Graph<S>,
    config: &EncoderConfig,
    head: &HeadNodes<S>,
    features: NodeId,
    mode: Mode,
) -> Result<(NodeId, Vec<BatchNormStats<S>>)> {
    let eps = s::<S>(config.bn_epsilon);
    let mut stats = Vec::new();
    let mut x = features;
    for (dense, bn) in &head.hidden {
        let y = g.dense(x, dense.weight, dense.bias)?;
        let y = g.relu(y);
        let running = match mode {
            Mode::Train => None,
            Mode::Eval => Some((bn.running_mean.as_slice(), bn.running_var.as_slice())),
        };
        let (y, st) = g.batch_norm(y, bn.gamma, bn.beta, eps, mode, running)?;
        if let Some(st) = st {
            stats.push(st);
        }
        x = y;
    }
    let out = g.dense(x, head.out.weight, head.out.bias)?;
    Ok((out, stats))
}

fn head_for_role<S>(nodes: &ParamNodes<S>, role: Role) -> &HeadNodes<S> {
    match (role, nodes.future_head.as_ref()) {
        (Role::Future, Some(fh)) => fh,
        _ => &nodes.head,
    }
}

/// Encode a batch of windows inside an existing graph.
pub fn encode_graph<S: Scalar>(
    g: &mut Graph<S>,
    config: &EncoderConfig,
    nodes: &ParamNodes<S>,
    input: NodeId,
    mode: Mode,
    role: Role,
) -> Result<(NodeId, Vec<BatchNormStats<S>>)> {
    check_window_shape(config, g.value(input).shape())?;
    let features = tcn_features(g, config, nodes, input)?;
    head_forward(g, config, head_for_role(nodes, role), features, mode)
}

/// Encoding of a joint history/future batch: history embeddings come out as
/// the first K rows, future embeddings as the second K.
pub struct PairEncoding<S> {
    pub history: NodeId,
    pub future: NodeId,
    /// Train-mode batch statistics of the shared (or history) head.
    pub head_stats: Vec<BatchNormStats<S>>,
    /// Train-mode batch statistics of the future head; empty unless the
    /// config separates heads.
    pub future_head_stats: Vec<BatchNormStats<S>>,
}

/// Encode a `[2K, w, d]` tensor holding K history windows followed by their
/// K future windows. With a shared head the full batch passes through one
/// head (batch-norm statistics over 2K rows); with separate heads each half
/// passes through its own head.
pub fn encode_pair_graph<S: Scalar>(
    g: &mut Graph<S>,
    config: &EncoderConfig,
    nodes: &ParamNodes<S>,
    joint: NodeId,
    pairs: usize,
    mode: Mode,
) -> Result<PairEncoding<S>> {
    let shape = g.value(joint).shape().to_vec();
    check_window_shape(config, &shape)?;
    if shape[0] != 2 * pairs {
        return Err(Error::invalid(format!(
            "joint batch has {} rows, expected 2 * {}",
            shape[0], pairs
        )));
    }
    let features = tcn_features(g, config, nodes, joint)?;
    if nodes.future_head.is_some() {
        let hfeat = g.slice_rows(features, 0, pairs)?;
        let ffeat = g.slice_rows(features, pairs, pairs)?;
        let (history, head_stats) = head_forward(g, config, &nodes.head, hfeat, mode)?;
        let (future, future_head_stats) =
            head_forward(g, config, nodes.future_head.as_ref().unwrap(), ffeat, mode)?;
        Ok(PairEncoding {
            history,
            future,
            head_stats,
            future_head_stats,
        })
    } else {
        let (emb, head_stats) = head_forward(g, config, &nodes.head, features, mode)?;
        let history = g.slice_rows(emb, 0, pairs)?;
        let future = g.slice_rows(emb, pairs, pairs)?;
        Ok(PairEncoding {
            history,
            future,
            head_stats,
            future_head_stats: Vec::new(),
        })
    }
}

fn check_window_shape(config: &EncoderConfig, shape: &[usize]) -> Result<()> {
    if shape.len() != 3 || shape[1] != config.window_len || shape[2] != config.channels {
        return Err(Error::invalid(format!(
            "window batch shape {:?} does not match encoder window_len={} channels={}",
            shape, config.window_len, config.channels
        )));
    }
    Ok(())
}

/// Encode windows with the history-role head. Eval mode is a pure function
/// of (params, windows); train mode normalizes by batch statistics but does
/// NOT update running statistics (the training loop owns that).
pub fn encode<S: Scalar>(
    params: &EncoderParams<S>,
    windows: &Tensor<S>,
    mode: Mode,
) -> Result<Tensor<S>> {
    encode_role(params, windows, mode, Role::History)
}

/// [`encode`] with an explicit window role; the role only changes the
/// outcome for configs with separate heads.
pub fn encode_role<S: Scalar>(
    params: &EncoderParams<S>,
    windows: &Tensor<S>,
    mode: Mode,
    role: Role,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let nodes = params.insert_leaves(&mut g, false);
    let input = g.leaf(windows.clone());
    let (out, _) = encode_graph(&mut g, &params.config, &nodes, input, mode, role)?;
    Ok(g.value(out).clone())
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
// Byte layout: the magic line "CPDT1\n"; one "key=value\n" line per config
// field; "sections=<n>\n"; then n sections, each a text line
// "section=<name> shape=<d0>x<d1>...\n" followed by that many little-endian
// 32-bit floats. Round-trips are bit-exact for f32 parameters.
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &str = "CPDT1";

pub fn checkpoint_bytes<S: Scalar>(params: &EncoderParams<S>) -> Vec<u8> {
    let cfg = &params.config;
    let mut out = Vec::new();
    let line = |buf: &mut Vec<u8>, text: String| {
        buf.extend_from_slice(text.as_bytes());
        buf.push(b'\n');
    };
    line(&mut out, CHECKPOINT_MAGIC.to_string());
    line(&mut out, format!("window_len={}", cfg.window_len));
    line(&mut out, format!("channels={}", cfg.channels));
    line(&mut out, format!("filters={}", cfg.filters));
    line(&mut out, format!("kernel={}", cfg.kernel));
    line(&mut out, format!("dilations={}", join_usizes(&cfg.dilations)));
    line(&mut out, format!("stacks={}", cfg.stacks));
    line(&mut out, format!("head_widths={}", join_usizes(&cfg.head_widths)));
    line(&mut out, format!("code_size={}", cfg.code_size));
    line(&mut out, format!("bn_momentum={}", cfg.bn_momentum));
    line(&mut out, format!("bn_epsilon={}", cfg.bn_epsilon));
    line(&mut out, format!("separate_heads={}", cfg.separate_heads));
    let sections = params.visit();
    line(&mut out, format!("sections={}", sections.len()));
    for (name, tensor) in sections {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        line(&mut out, format!("section={} shape={}", name, dims.join("x")));
        for &v in tensor.data() {
            let f: f32 = v.to_f32().unwrap_or(f32::NAN);
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint<S: Scalar>(params: &EncoderParams<S>, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(params);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<EncoderParams<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<EncoderParams<S>> {
    let mut cursor = 0usize;
    let next_line = |cursor: &mut usize| -> Result<String> {
        let rest = &bytes[*cursor..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("unterminated header line".into()))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?
            .to_string();
        *cursor += end + 1;
        Ok(line)
    };

    if next_line(&mut cursor)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "missing magic string {CHECKPOINT_MAGIC:?}"
        )));
    }
    let mut fields = std::collections::HashMap::new();
    let section_count: usize;
    loop {
        let line = next_line(&mut cursor)?;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed header line {line:?}")))?;
        if key == "sections" {
            section_count = value
                .parse()
                .map_err(|_| Error::Checkpoint("bad section count".into()))?;
            break;
        }
        fields.insert(key.to_string(), value.to_string());
    }
    let get = |key: &str| -> Result<&str> {
        fields
            .get(key)
            .map(|v| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing header field {key}")))
    };
    let head_widths = parse_usizes(get("head_widths")?)?;
    if head_widths.len() != 2 {
        return Err(Error::Checkpoint("head_widths must have 2 entries".into()));
    }
    let config = EncoderConfig {
        window_len: parse_num(get("window_len")?)?,
        channels: parse_num(get("channels")?)?,
        filters: parse_num(get("filters")?)?,
        kernel: parse_num(get("kernel")?)?,
        dilations: parse_usizes(get("dilations")?)?,
        stacks: parse_num(get("stacks")?)?,
        head_widths: [head_widths[0], head_widths[1]],
        code_size: parse_num(get("code_size")?)?,
        bn_momentum: get("bn_momentum")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad bn_momentum".into()))?,
        bn_epsilon: get("bn_epsilon")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad bn_epsilon".into()))?,
        separate_heads: match get("separate_heads")? {
            "true" => true,
            "false" => false,
            other => {
                return Err(Error::Checkpoint(format!(
                    "bad separate_heads value {other:?}"
                )))
            }
        },
    };
    let mut params = EncoderParams::<S>::zeros(config)
        .map_err(|e| Error::Checkpoint(format!("config rejected: {e}")))?;

    // Sections must appear in canonical order with the implied shapes.
    let expected: Vec<(String, Vec<usize>)> = params
        .visit()
        .into_iter()
        .map(|(name, t)| (name, t.shape().to_vec()))
        .collect();
    if expected.len() != section_count {
        return Err(Error::Checkpoint(format!(
            "expected {} sections, header says {}",
            expected.len(),
            section_count
        )));
    }
    let mut loaded: Vec<Vec<S>> = Vec::with_capacity(section_count);
    for (name, shape) in &expected {
        let line = next_line(&mut cursor)?;
        let want = format!(
            "section={} shape={}",
            name,
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x")
        );
        if line != want {
            return Err(Error::Checkpoint(format!(
                "section mismatch: expected {want:?}, found {line:?}"
            )));
        }
        let count: usize = shape.iter().product();
        let nbytes = count * 4;
        if cursor + nbytes > bytes.len() {
            return Err(Error::Checkpoint(format!("section {name} truncated")));
        }
        let mut values = Vec::with_capacity(count);
        for chunk in bytes[cursor..cursor + nbytes].chunks_exact(4) {
            let f = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            values.push(s::<S>(f as f64));
        }
        cursor += nbytes;
        loaded.push(values);
    }
    if cursor != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last section".into()));
    }

    let mut it = loaded.into_iter();
    for tensor in visit_all_mut(&mut params) {
        let values = it.next().expect("section count checked above");
        tensor.data_mut().copy_from_slice(&values);
    }
    Ok(params)
}

/// All tensors (running statistics included) in the same order as `visit`.
fn visit_all_mut<S: Scalar>(params: &mut EncoderParams<S>) -> Vec<&mut Tensor<S>> {
    let mut out = Vec::new();
    for stack in params.stacks.iter_mut() {
        for conv in stack.convs.iter_mut() {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        if let Some(proj) = stack.proj.as_mut() {
            out.push(&mut proj.weight);
            out.push(&mut proj.bias);
        }
    }
    for head in [Some(&mut params.head), params.future_head.as_mut()]
        .into_iter()
        .flatten()
    {
        for (dense, bn) in head.hidden.iter_mut() {
            out.push(&mut dense.weight);
            out.push(&mut dense.bias);
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
            out.push(&mut bn.running_mean);
            out.push(&mut bn.running_var);
        }
        out.push(&mut head.out.weight);
        out.push(&mut head.out.bias);
    }
    out
}

fn join_usizes(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_usizes(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad integer list entry {part:?}")))
        })
        .collect()
}

fn parse_num(text: &str) -> Result<usize> {
    text.parse()
        .map_err(|_| Error::Checkpoint(format!("bad integer {text:?}")))
}
