//! Self-supervised training loop: sample a batch, encode, contrast,
//! backpropagate, Adam step. Fully reproducible from (data, configs, seed).

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{info_nce_graph, sample_batch};
use crate::data::LabeledSeries;
use crate::encoder::{encode_pair_graph, encode_role, init, EncoderConfig, EncoderParams, Role};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

// Sampler stream is decorrelated from the init stream, which consumes the
// raw seed.
const SAMPLER_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Positive pairs per batch (K); the other K-1 futures act as negatives.
    pub batch_size: usize,
    /// Softmax temperature.
    pub tau: f64,
    /// Minimum boundary separation; `None` means 4 * window_len.
    pub delta_min: Option<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub steps: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables periodic saves).
    pub checkpoint_every: usize,
    /// Append a history row every this many steps.
    pub log_every: usize,
    /// Report and differentiate the batch-mean loss instead of the sum.
    pub mean_reduction: bool,
    /// Global gradient-norm clip; values <= 0 disable clipping.
    pub clip_norm: f64,
    /// Optional loss-plateau stop: end training early once this many
    /// consecutive logged rows fail to improve the best loss by at least
    /// 0.01% (relative). Off by default.
    pub plateau_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            tau: 0.1,
            delta_min: None,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            steps: 2000,
            seed: 0,
            checkpoint_every: 0,
            log_every: 10,
            mean_reduction: false,
            clip_norm: 5.0,
            plateau_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be >= 2"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every must be >= 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.plateau_patience == Some(0) {
            return Err(Error::invalid("plateau_patience must be >= 1 when set"));
        }
        Ok(())
    }

    pub fn resolved_delta_min(&self, window_len: usize) -> usize {
        self.delta_min.unwrap_or(4 * window_len)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(cfg: &TrainConfig) -> Self {
        AdamConfig {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.adam_epsilon,
        }
    }
}

/// First/second moment slots, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
    pub skipped_steps: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[&Tensor<S>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![S::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![S::zero(); p.len()]).collect(),
            t: 0,
            skipped_steps: 0,
        }
    }

    pub fn steps_applied(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update across all parameter tensors. A non-finite
/// gradient anywhere skips the whole step (moments untouched), bumps
/// `skipped_steps` and logs a warning; returns whether the step applied.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Vec<S>],
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<bool> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam_step slot mismatch: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::invalid("adam_step gradient shape mismatch"));
        }
    }
    if grads
        .iter()
        .any(|g| g.iter().any(|v| !v.is_finite()))
    {
        state.skipped_steps += 1;
        log::warn!(
            "skipping optimizer step {}: non-finite gradient",
            state.t + 1
        );
        return Ok(false);
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = s::<S>(1.0 - cfg.beta1.powi(t));
    let bc2 = s::<S>(1.0 - cfg.beta2.powi(t));
    let lr = s::<S>(cfg.learning_rate);
    let b1 = s::<S>(cfg.beta1);
    let b2 = s::<S>(cfg.beta2);
    let eps = s::<S>(cfg.epsilon);
    let one = S::one();
    for ((param, grad), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let data = param.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(true)
}

/// Scale all gradients so their joint L2 norm does not exceed `max_norm`.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for v in g {
            let v = v.to_f64_lossy();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() || norm <= max_norm {
        return;
    }
    let factor = s::<S>(max_norm / norm);
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= factor;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub loss: f64,
    pub pos_sim: f64,
    pub neg_sim: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,loss,pos_sim,neg_sim,seconds")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{:.3}",
                r.step, r.loss, r.pos_sim, r.neg_sim, r.seconds
            )?;
        }
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }
}

/// Train an encoder on a series. Labels are never consulted. When
/// `checkpoint_dir` is set and `checkpoint_every > 0`, periodic checkpoints
/// land there as `checkpoint_<step>.cpdt`.
pub fn train<S: Scalar>(
    series: &LabeledSeries<S>,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(EncoderParams<S>, TrainHistory)> {
    enc_cfg.validate()?;
    cfg.validate()?;
    if series.channels() != enc_cfg.channels {
        return Err(Error::invalid(format!(
            "series has {} channels but the encoder expects {}",
            series.channels(),
            enc_cfg.channels
        )));
    }
    let w = enc_cfg.window_len;
    let delta_min = cfg.resolved_delta_min(w);
    let k = cfg.batch_size;
    let tau = s::<S>(cfg.tau);

    let mut params = init::<S>(enc_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLER_SALT);
    let mut adam = AdamState::new(&params.trainable());
    let adam_cfg = AdamConfig::from(cfg);
    let mut history = TrainHistory::default();
    let mut non_finite_streak = 0usize;
    let mut best_loss = f64::INFINITY;
    let mut stale_rows = 0usize;
    let started = Instant::now();

    for step in 0..cfg.steps {
        let batch = sample_batch(series, k, w, delta_min, &mut rng)?;
        let joint = batch.joint_windows();

        let mut g = Graph::new();
        let nodes = params.insert_leaves(&mut g, true);
        let input = g.leaf(joint);
        let enc = encode_pair_graph(&mut g, enc_cfg, &nodes, input, k, Mode::Train)?;
        let (mut loss_id, out) = info_nce_graph(&mut g, enc.history, enc.future, tau)?;
        if cfg.mean_reduction {
            loss_id = g.scale(loss_id, s::<S>(1.0 / k as f64));
        }
        let loss = g.value(loss_id).item().to_f64_lossy();

        if !loss.is_finite() {
            non_finite_streak += 1;
            if non_finite_streak >= 10 {
                return Err(Error::invalid(format!(
                    "training diverged: non-finite loss for {non_finite_streak} consecutive \
                     steps (last step {step}); lower the learning rate or raise tau"
                )));
            }
        } else {
            non_finite_streak = 0;
        }

        g.backward(loss_id)?;
        let mut grads = params.collect_gradients(&g, &nodes);
        clip_global_norm(&mut grads, cfg.clip_norm);
        {
            let mut trainable = params.trainable_mut();
            adam_step(&mut trainable, &grads, &mut adam, &adam_cfg)?;
        }
        params.update_running_stats(Role::History, &enc.head_stats)?;
        if !enc.future_head_stats.is_empty() {
            params.update_running_stats(Role::Future, &enc.future_head_stats)?;
        }

        let step_no = (step + 1) as u64;
        if step_no % cfg.log_every as u64 == 0 {
            history.rows.push(HistoryRow {
                step: step_no,
                loss,
                pos_sim: out.mean_positive_similarity().to_f64_lossy(),
                neg_sim: out.mean_negative_similarity().to_f64_lossy(),
                seconds: started.elapsed().as_secs_f64(),
            });
            if let Some(patience) = cfg.plateau_patience {
                if loss.is_finite()
                    && (!best_loss.is_finite() || loss < best_loss - 1e-4 * best_loss.abs())
                {
                    best_loss = loss;
                    stale_rows = 0;
                } else {
                    stale_rows += 1;
                    if stale_rows >= patience {
                        log::info!(
                            "stopping at step {step_no}: loss plateaued for {patience} logged rows"
                        );
                        break;
                    }
                }
            }
        }
        if cfg.checkpoint_every > 0 && step_no % cfg.checkpoint_every as u64 == 0 {
            if let Some(dir) = checkpoint_dir {
                let path = dir.join(format!("checkpoint_{step_no:06}.cpdt"));
                crate::encoder::save_checkpoint(&params, &path)?;
            }
        }
    }
    if adam.skipped_steps > 0 {
        log::warn!(
            "{} of {} optimizer steps were skipped due to non-finite gradients",
            adam.skipped_steps,
            cfg.steps
        );
    }
    Ok((params, history))
}

/// Mean positive-pair and negative-pair cosine similarity over freshly
/// sampled held-out batches, encoded in eval mode.
pub fn pair_similarity_stats<S: Scalar>(
    params: &EncoderParams<S>,
    series: &LabeledSeries<S>,
    k: usize,
    delta_min: usize,
    seed: u64,
    n_batches: usize,
) -> Result<(f64, f64)> {
    let w = params.config().window_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = 0.0f64;
    let mut neg = 0.0f64;
    for _ in 0..n_batches {
        let batch = sample_batch(series, k, w, delta_min, &mut rng)?;
        let joint = batch.joint_windows();
        let h = joint_half(&joint, 0, k);
        let f = joint_half(&joint, k, k);
        let h_emb = encode_role(params, &h, Mode::Eval, Role::History)?;
        let f_emb = encode_role(params, &f, Mode::Eval, Role::Future)?;
        let mut g = Graph::new();
        let hn = g.leaf(h_emb);
        let fn_ = g.leaf(f_emb);
        let sim = g.cosine_matrix(hn, fn_)?;
        let simv = g.value(sim).data();
        for i in 0..k {
            for j in 0..k {
                let v = simv[i * k + j].to_f64_lossy();
                if i == j {
                    pos += v;
                } else {
                    neg += v;
                }
            }
        }
    }
    let n = n_batches as f64;
    Ok((
        pos / (n * k as f64),
        neg / (n * (k * (k - 1)) as f64),
    ))
}

fn joint_half<S: Scalar>(joint: &Tensor<S>, start: usize, rows: usize) -> Tensor<S> {
    let shape = joint.shape();
    let row_size: usize = shape[1..].iter().product();
    let data = joint.data()[start * row_size..(start + rows) * row_size].to_vec();
    Tensor::new(vec![rows, shape[1], shape[2]], data).expect("half batch shape")
}
