//! Batch construction under a temporal-separation constraint and the
//! contrastive objective over history/future embedding pairs.
//!
//! A batch holds K positive pairs of adjacent windows; the future windows of
//! the other K-1 pairs serve as negatives, which is valid because every pair
//! boundary keeps a minimum temporal distance from all others.

use rand::Rng;

use crate::data::LabeledSeries;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One positive pair: the `w` samples before and after a boundary.
#[derive(Debug, Clone)]
pub struct WindowPair<S> {
    pub history: Tensor<S>, // [w, d]
    pub future: Tensor<S>,  // [w, d]
    /// Sample index of the first future sample in the source series.
    pub boundary_index: usize,
}

#[derive(Debug, Clone)]
pub struct TrainBatch<S> {
    pub pairs: Vec<WindowPair<S>>,
    pub min_separation: usize,
}

impl<S: Scalar> TrainBatch<S> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stack histories then futures into one `[2K, w, d]` tensor.
    pub fn joint_windows(&self) -> Tensor<S> {
        let w = self.pairs[0].history.shape()[0];
        let d = self.pairs[0].history.shape()[1];
        let mut data = Vec::with_capacity(2 * self.pairs.len() * w * d);
        for pair in &self.pairs {
            data.extend_from_slice(pair.history.data());
        }
        for pair in &self.pairs {
            data.extend_from_slice(pair.future.data());
        }
        Tensor::new(vec![2 * self.pairs.len(), w, d], data).expect("stacked batch shape")
    }
}

/// Largest batch size placeable on a series of `t_len` samples with window
/// length `w` and minimum boundary separation `delta_min`.
pub fn max_feasible_pairs(t_len: usize, w: usize, delta_min: usize) -> usize {
    if t_len < 2 * w {
        return 0;
    }
    let span = t_len - 2 * w; // boundaries live in [w, t_len - w]
    if delta_min == 0 {
        span + 1
    } else {
        span / delta_min + 1
    }
}

/// Draw K boundaries uniformly from `[w, T - w]`, rejecting candidates
/// closer than `delta_min` to any accepted boundary. Ground-truth labels are
/// never consulted. Deterministic for a given generator state.
pub fn sample_batch<S: Scalar, R: Rng>(
    series: &LabeledSeries<S>,
    k: usize,
    w: usize,
    delta_min: usize,
    rng: &mut R,
) -> Result<TrainBatch<S>> {
    if k < 2 {
        return Err(Error::invalid(
            "batch size must be >= 2 (each positive needs at least one negative)",
        ));
    }
    if w == 0 {
        return Err(Error::invalid("window length must be >= 1"));
    }
    let t_len = series.num_samples();
    let max_k = max_feasible_pairs(t_len, w, delta_min);
    if k > max_k {
        return Err(Error::Capacity {
            requested: k,
            min_separation: delta_min,
            max_feasible: max_k,
        });
    }

    const DRAW_CAP: usize = 1000;
    const RESTART_CAP: usize = 64;
    let mut boundaries: Vec<usize> = Vec::with_capacity(k);
    'restart: for _ in 0..RESTART_CAP {
        boundaries.clear();
        let mut draws = 0usize;
        while boundaries.len() < k {
            if draws >= DRAW_CAP {
                continue 'restart;
            }
            draws += 1;
            let candidate = rng.random_range(w..=t_len - w);
            // without replacement: always distinct, even at delta_min = 0
            if boundaries
                .iter()
                .all(|&b| candidate.abs_diff(b) >= delta_min.max(1))
            {
                boundaries.push(candidate);
            }
        }
        let pairs = boundaries
            .iter()
            .map(|&b| WindowPair {
                history: series.window(b - w, w),
                future: series.window(b, w),
                boundary_index: b,
            })
            .collect();
        return Ok(TrainBatch {
            pairs,
            min_separation: delta_min,
        });
    }
    // Feasible in principle but rejection sampling wedged repeatedly.
    Err(Error::Capacity {
        requested: k,
        min_separation: delta_min,
        max_feasible: max_k,
    })
}

/// Cosine similarity with a degenerate-input flag: zero-norm vectors yield
/// similarity 0 and set the flag instead of producing non-finite values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity<S> {
    pub value: S,
    pub degenerate: bool,
}

pub fn cosine_similarity<S: Scalar>(a: &[S], b: &[S]) -> Result<Similarity<S>> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cosine_similarity length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("cosine_similarity needs non-empty vectors"));
    }
    let mut dot = S::zero();
    let mut na = S::zero();
    let mut nb = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == S::zero() || nb == S::zero() {
        log::warn!("cosine_similarity on a zero-norm vector; reporting 0");
        return Ok(Similarity {
            value: S::zero(),
            degenerate: true,
        });
    }
    let raw = dot / (na.sqrt() * nb.sqrt());
    // clamp rounding overshoot
    let value = raw.min(S::one()).max(-S::one());
    Ok(Similarity {
        value,
        degenerate: false,
    })
}

/// Similarities, per-pair positive probabilities and the loss of one batch.
#[derive(Debug, Clone)]
pub struct ContrastiveOutput<S> {
    /// `sim_matrix[i * K + j]` compares history i against future j.
    pub sim_matrix: Tensor<S>,
    /// Scaled-softmax probability of each positive pair.
    pub rho: Vec<S>,
    /// Sum over the batch of `-ln(rho_i)`.
    pub loss: S,
}

impl<S: Scalar> ContrastiveOutput<S> {
    /// Mean similarity of the positive (diagonal) pairs.
    pub fn mean_positive_similarity(&self) -> S {
        let k = self.rho.len();
        let sim = self.sim_matrix.data();
        let mut total = S::zero();
        for i in 0..k {
            total += sim[i * k + i];
        }
        total / crate::scalar::s(k as f64)
    }

    /// Mean similarity of the negative (off-diagonal) pairs.
    pub fn mean_negative_similarity(&self) -> S {
        let k = self.rho.len();
        let sim = self.sim_matrix.data();
        let mut total = S::zero();
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    total += sim[i * k + j];
                }
            }
        }
        total / crate::scalar::s((k * (k - 1)) as f64)
    }
}

/// Record the contrastive objective on an existing graph: a cosine
/// similarity matrix over the embedding rows followed by the scaled-softmax
/// loss. Returns the loss node and the realized values.
pub fn info_nce_graph<S: Scalar>(
    g: &mut Graph<S>,
    h_emb: NodeId,
    f_emb: NodeId,
    tau: S,
) -> Result<(NodeId, ContrastiveOutput<S>)> {
    let sim = g.cosine_matrix(h_emb, f_emb)?;
    let (loss, rho) = g.info_nce(sim, tau)?;
    let out = ContrastiveOutput {
        sim_matrix: g.value(sim).clone(),
        rho,
        loss: g.value(loss).item(),
    };
    Ok((loss, out))
}

/// Standalone objective over `[K, c]` history and future embeddings.
pub fn info_nce<S: Scalar>(
    h_emb: &Tensor<S>,
    f_emb: &Tensor<S>,
    tau: S,
) -> Result<ContrastiveOutput<S>> {
    let mut g = Graph::new();
    let h = g.leaf(h_emb.clone());
    let f = g.leaf(f_emb.clone());
    let (_, out) = info_nce_graph(&mut g, h, f, tau)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_series(t_len: usize) -> LabeledSeries<f32> {
        let values: Vec<f32> = (0..t_len).map(|i| (i as f32 * 0.01).sin()).collect();
        LabeledSeries::new(values, 1, vec![], "flat".into()).unwrap()
    }

    #[test]
    fn cosine_similarity_basics() {
        let r = cosine_similarity(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(r.value, 0.0);
        let r = cosine_similarity(&[2.0f64, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(r.value, 1.0);
        let r = cosine_similarity(&[1.0f64, 1.0], &[1.0, -1.0]).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn cosine_similarity_zero_norm_flags_degenerate() {
        let r = cosine_similarity(&[0.0f64, 0.0], &[1.0, 0.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn sample_batch_respects_constraints() {
        let series = flat_series(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&series, 4, 50, 200, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        for (i, a) in batch.pairs.iter().enumerate() {
            assert!((50..=950).contains(&a.boundary_index));
            for b in batch.pairs.iter().skip(i + 1) {
                assert!(a.boundary_index.abs_diff(b.boundary_index) >= 200);
            }
        }
    }

    #[test]
    fn sample_batch_infeasible_reports_capacity() {
        let series = flat_series(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = sample_batch(&series, 2, 50, 1000, &mut rng).unwrap_err();
        match err {
            Error::Capacity { max_feasible, .. } => assert_eq!(max_feasible, 1),
            other => panic!("expected capacity error, got {other}"),
        }
    }

    #[test]
    fn sample_batch_is_deterministic_per_seed() {
        let series = flat_series(5000);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_batch(&series, 8, 50, 200, &mut rng)
                .unwrap()
                .pairs
                .iter()
                .map(|p| p.boundary_index)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn sampled_batches_always_respect_separation() {
        // exhaustive audit over many draws
        let series = flat_series(5000);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let batch = sample_batch(&series, 6, 50, 300, &mut rng).unwrap();
            let mut min_dist = usize::MAX;
            for (i, a) in batch.pairs.iter().enumerate() {
                for b in batch.pairs.iter().skip(i + 1) {
                    min_dist = min_dist.min(a.boundary_index.abs_diff(b.boundary_index));
                }
            }
            assert!(min_dist >= 300);
        }
    }

    #[test]
    fn info_nce_equal_similarities() {
        // identical embeddings everywhere -> all sims 1 -> rho 1/2, loss 2 ln 2
        let e = Tensor::new(vec![2, 3], vec![0.3f64, -0.7, 0.2, 0.3, -0.7, 0.2]).unwrap();
        let out = info_nce(&e, &e, 0.1).unwrap();
        for &r in &out.rho {
            assert!((r - 0.5).abs() < 1e-9);
        }
        assert!((out.loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn info_nce_identity_similarity_closed_form() {
        // orthonormal embeddings give the identity similarity matrix;
        // at tau=1: rho_i = e / (e + 2), loss = 3 ln((e + 2) / e)
        let h = Tensor::new(
            vec![3, 3],
            vec![1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let out = info_nce(&h, &h, 1.0).unwrap();
        let e = std::f64::consts::E;
        let rho_expect = e / (e + 2.0);
        let loss_expect = 3.0 * ((e + 2.0) / e).ln();
        assert!((rho_expect - 0.5761).abs() < 1e-4);
        assert!((loss_expect - 1.6544).abs() < 1e-4);
        for &r in &out.rho {
            assert!((r - rho_expect).abs() < 1e-9);
        }
        assert!((out.loss - loss_expect).abs() < 1e-9);
    }

    #[test]
    fn info_nce_row_softmax_sums_to_one() {
        let h = Tensor::new(vec![3, 2], vec![0.9f64, 0.1, -0.4, 0.8, 0.2, -0.3]).unwrap();
        let f = Tensor::new(vec![3, 2], vec![0.8f64, 0.3, -0.2, 0.9, 0.4, -0.1]).unwrap();
        let out = info_nce(&h, &f, 0.5).unwrap();
        let k = 3;
        let sim = out.sim_matrix.data();
        for i in 0..k {
            let mut total = 0.0;
            for j in 0..k {
                total += (sim[i * k + j] / 0.5).exp();
            }
            let row_sum: f64 = (0..k)
                .map(|j| (sim[i * k + j] / 0.5).exp() / total)
                .sum();
            assert!((row_sum - 1.0).abs() < 1e-5);
            assert!(out.rho[i] > 0.0 && out.rho[i] < 1.0);
        }
        assert!(out.loss >= 0.0);
    }

    #[test]
    fn labels_are_never_consulted() {
        // identical values, one series with labels, one without
        let values: Vec<f32> = (0..2000).map(|i| (i as f32 * 0.02).cos()).collect();
        let plain = LabeledSeries::new(values.clone(), 1, vec![], "a".into()).unwrap();
        let labeled = LabeledSeries::new(values, 1, vec![500, 1000], "b".into()).unwrap();
        let draw = |series: &LabeledSeries<f32>| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            sample_batch(series, 4, 40, 160, &mut rng)
                .unwrap()
                .pairs
                .iter()
                .map(|p| p.boundary_index)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(&plain), draw(&labeled));
    }
}
