//! Change point detection: slide paired history/future windows over a
//! series, compare each boundary's embedding cosine similarity against its
//! trailing moving average, and report local maxima of the drop.

use std::collections::BTreeMap;
use std::io::Write;

use crate::contrastive::cosine_similarity;
use crate::data::LabeledSeries;
use crate::encoder::{encode_role, EncoderParams, Role};
use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Windows per eval-mode encoder call while scanning a series.
const ENCODE_CHUNK: usize = 256;

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    /// Samples per window; must match the encoder's window length.
    pub window_len: usize,
    /// Boundary step in samples.
    pub stride: usize,
    /// Number of previous similarity values in the moving average (W).
    pub ma_width: usize,
    /// Minimum drop height for a peak to be reported.
    pub prominence: f64,
    /// Minimum samples between reported change points.
    pub min_spacing: usize,
}

impl DetectorConfig {
    pub fn new(window_len: usize) -> Self {
        DetectorConfig {
            window_len,
            stride: 1,
            ma_width: 10,
            prominence: 0.05,
            min_spacing: window_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(Error::invalid("window_len must be >= 1"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        if self.ma_width == 0 {
            return Err(Error::invalid("ma_width must be >= 1"));
        }
        if self.prominence < 0.0 {
            return Err(Error::invalid("prominence must be >= 0"));
        }
        if self.min_spacing == 0 {
            return Err(Error::invalid("min_spacing must be >= 1"));
        }
        Ok(())
    }
}

/// Cosine similarity of adjacent-window embeddings per boundary, its
/// trailing moving average, and the clipped drop `max(0, ma - sim)`.
#[derive(Debug, Clone)]
pub struct SimilarityProfile<S> {
    /// Boundary sample indices `w + k * stride`.
    pub boundaries: Vec<usize>,
    pub sim: Vec<S>,
    pub ma: Vec<S>,
    pub diff: Vec<S>,
    /// Boundaries whose embedding had zero norm.
    pub degenerate: usize,
}

impl<S: Scalar> SimilarityProfile<S> {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "boundary,sim,ma,diff")?;
        for i in 0..self.boundaries.len() {
            writeln!(
                out,
                "{},{},{},{}",
                self.boundaries[i], self.sim[i], self.ma[i], self.diff[i]
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    /// Sample index of the boundary the detection maps to.
    pub index: usize,
    /// Drop height at the peak.
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChangePointEstimates {
    /// Sorted by index; consecutive indices differ by at least the
    /// configured spacing and every score clears the prominence threshold.
    pub estimates: Vec<Estimate>,
}

impl ChangePointEstimates {
    pub fn indices(&self) -> Vec<usize> {
        self.estimates.iter().map(|e| e.index).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "index,score")?;
        for e in &self.estimates {
            writeln!(out, "{},{}", e.index, e.score)?;
        }
        Ok(())
    }
}

/// Encode the windows starting at each index (eval mode, chunked) and return
/// one embedding row per start.
fn embed_starts<S: Scalar>(
    params: &EncoderParams<S>,
    series: &LabeledSeries<S>,
    starts: &[usize],
    role: Role,
) -> Result<Vec<Vec<S>>> {
    let w = params.config().window_len;
    let d = series.channels();
    let code = params.config().code_size;
    let mut rows = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(ENCODE_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * w * d);
        for &start in chunk {
            data.extend_from_slice(series.window(start, w).data());
        }
        let batch = Tensor::new(vec![chunk.len(), w, d], data).expect("window batch shape");
        let emb = encode_role(params, &batch, Mode::Eval, role)?;
        for i in 0..chunk.len() {
            rows.push(emb.data()[i * code..(i + 1) * code].to_vec());
        }
    }
    Ok(rows)
}

/// Compute the similarity profile over all boundaries `w, w+s, ..., T-w`.
pub fn similarity_profile<S: Scalar>(
    params: &EncoderParams<S>,
    series: &LabeledSeries<S>,
    cfg: &DetectorConfig,
) -> Result<SimilarityProfile<S>> {
    cfg.validate()?;
    let w = cfg.window_len;
    if params.config().window_len != w {
        return Err(Error::invalid(format!(
            "detector window_len {} does not match checkpoint window_len {}",
            w,
            params.config().window_len
        )));
    }
    if params.config().channels != series.channels() {
        return Err(Error::invalid(format!(
            "series has {} channels but the encoder expects {}",
            series.channels(),
            params.config().channels
        )));
    }
    let t_len = series.num_samples();
    if t_len < 2 * w {
        return Err(Error::invalid(format!(
            "series of {t_len} samples is shorter than two windows ({})",
            2 * w
        )));
    }

    let boundaries: Vec<usize> = (w..=t_len - w).step_by(cfg.stride).collect();
    // Each window start is embedded once; with a shared head a window serves
    // as the future of one boundary and the history of another.
    let separate = params.config().separate_heads;
    let (hist_rows, fut_rows): (BTreeMap<usize, Vec<S>>, BTreeMap<usize, Vec<S>>) = if separate {
        let hist_starts: Vec<usize> = boundaries.iter().map(|&b| b - w).collect();
        let fut_starts: Vec<usize> = boundaries.clone();
        let h = embed_starts(params, series, &hist_starts, Role::History)?;
        let f = embed_starts(params, series, &fut_starts, Role::Future)?;
        (
            hist_starts.into_iter().zip(h).collect(),
            fut_starts.into_iter().zip(f).collect(),
        )
    } else {
        let mut starts: Vec<usize> = boundaries.iter().map(|&b| b - w).collect();
        starts.extend(boundaries.iter().copied());
        starts.sort_unstable();
        starts.dedup();
        let rows = embed_starts(params, series, &starts, Role::History)?;
        let map: BTreeMap<usize, Vec<S>> = starts.into_iter().zip(rows).collect();
        (map.clone(), map)
    };

    let mut sim = Vec::with_capacity(boundaries.len());
    let mut degenerate = 0usize;
    for &b in &boundaries {
        let h = &hist_rows[&(b - w)];
        let f = &fut_rows[&b];
        let r = cosine_similarity(h, f)?;
        if r.degenerate {
            degenerate += 1;
        }
        sim.push(r.value);
    }

    // Trailing moving average of the previous W values; early boundaries
    // average whatever history exists, and the first falls back to its own
    // similarity (zero drop).
    let mut ma = Vec::with_capacity(sim.len());
    let mut diff = Vec::with_capacity(sim.len());
    let mut window_sum = S::zero();
    for k in 0..sim.len() {
        let m = if k == 0 {
            sim[0]
        } else {
            let n = k.min(cfg.ma_width);
            window_sum / s::<S>(n as f64)
        };
        ma.push(m);
        let d = m - sim[k];
        diff.push(if d > S::zero() { d } else { S::zero() });
        window_sum += sim[k];
        if k >= cfg.ma_width {
            window_sum -= sim[k - cfg.ma_width];
        }
    }

    Ok(SimilarityProfile {
        boundaries,
        sim,
        ma,
        diff,
        degenerate,
    })
}

/// Local maxima of `diff` at least `theta` high: a position qualifies when
/// its value is >= both neighbors (plateaus count once, at their leftmost
/// index). Candidates are accepted greedily in descending height, skipping
/// any within `min_spacing` of an accepted peak. Returned sorted by index.
pub fn find_peaks<S: Scalar>(diff: &[S], theta: S, min_spacing: usize) -> Vec<usize> {
    let n = diff.len();
    let qualifies = |p: usize| -> bool {
        diff[p] >= theta
            && (p == 0 || diff[p] >= diff[p - 1])
            && (p + 1 == n || diff[p] >= diff[p + 1])
    };
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&p| qualifies(p) && !(p > 0 && diff[p] == diff[p - 1] && qualifies(p - 1)))
        .collect();
    candidates.sort_by(|&a, &b| {
        diff[b]
            .partial_cmp(&diff[a])
            .expect("diff values are finite")
            .then(a.cmp(&b))
    });
    let spacing = min_spacing.max(1);
    let mut accepted: Vec<usize> = Vec::new();
    for p in candidates {
        if accepted.iter().all(|&q| p.abs_diff(q) >= spacing) {
            accepted.push(p);
        }
    }
    accepted.sort_unstable();
    accepted
}

/// Peak finding over an existing profile's drop series, mapped back to
/// boundary sample indices.
pub fn estimates_from_profile<S: Scalar>(
    profile: &SimilarityProfile<S>,
    cfg: &DetectorConfig,
) -> ChangePointEstimates {
    // min_spacing is in samples; convert to profile positions.
    let spacing = cfg.min_spacing.div_ceil(cfg.stride).max(1);
    let peaks = find_peaks(&profile.diff, s::<S>(cfg.prominence), spacing);
    let estimates = peaks
        .into_iter()
        .map(|p| Estimate {
            index: profile.boundaries[p],
            score: profile.diff[p].to_f64_lossy(),
        })
        .collect();
    ChangePointEstimates { estimates }
}

/// Full detection: similarity profile, then peak finding over the drop
/// series.
pub fn detect<S: Scalar>(
    params: &EncoderParams<S>,
    series: &LabeledSeries<S>,
    cfg: &DetectorConfig,
) -> Result<ChangePointEstimates> {
    let profile = similarity_profile(params, series, cfg)?;
    Ok(estimates_from_profile(&profile, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init, EncoderConfig};

    fn tiny_encoder(window_len: usize) -> EncoderParams<f32> {
        let cfg = EncoderConfig {
            window_len,
            channels: 1,
            filters: 6,
            kernel: 2,
            dilations: vec![1, 2],
            stacks: 1,
            head_widths: [8, 6],
            code_size: 4,
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
            separate_heads: false,
        };
        init(&cfg, 42).unwrap()
    }

    #[test]
    fn constant_series_yields_no_estimates() {
        let series =
            LabeledSeries::new(vec![1.5f32; 400], 1, vec![], "const".into()).unwrap();
        let params = tiny_encoder(32);
        let cfg = DetectorConfig::new(32);
        let profile = similarity_profile(&params, &series, &cfg).unwrap();
        for &v in &profile.sim {
            assert!((v - 1.0).abs() < 1e-5);
        }
        for &v in &profile.diff {
            assert!(v.abs() < 1e-5);
        }
        let estimates = detect(&params, &series, &cfg).unwrap();
        assert!(estimates.estimates.is_empty());
    }

    #[test]
    fn boundary_index_arithmetic() {
        let values: Vec<f32> = (0..500).map(|i| (i as f32 * 0.05).sin()).collect();
        let series = LabeledSeries::new(values, 1, vec![], "sine".into()).unwrap();
        let params = tiny_encoder(100);
        let cfg = DetectorConfig::new(100);
        let profile = similarity_profile(&params, &series, &cfg).unwrap();
        assert_eq!(profile.boundaries.len(), 301);
        assert_eq!(profile.boundaries[0], 100);
        assert_eq!(*profile.boundaries.last().unwrap(), 400);
    }

    #[test]
    fn profile_rejects_short_series_and_window_mismatch() {
        let series = LabeledSeries::new(vec![0.0f32; 50], 1, vec![], "short".into()).unwrap();
        let params = tiny_encoder(32);
        assert!(similarity_profile(&params, &series, &DetectorConfig::new(32)).is_err());
        let longer = LabeledSeries::new(vec![0.0f32; 300], 1, vec![], "x".into()).unwrap();
        assert!(similarity_profile(&params, &longer, &DetectorConfig::new(16)).is_err());
    }

    #[test]
    fn find_peaks_examples() {
        assert_eq!(find_peaks(&[0.0, 0.0, 0.5, 0.0, 0.0], 0.1, 1), vec![2]);
        // index 1 is suppressed: index 3 is taller and within spacing 3
        assert_eq!(find_peaks(&[0.0, 0.4, 0.0, 0.6, 0.0], 0.1, 3), vec![3]);
        assert_eq!(find_peaks(&[0.01, 0.02, 0.01], 0.1, 1), Vec::<usize>::new());
    }

    #[test]
    fn find_peaks_plateau_reports_leftmost() {
        assert_eq!(find_peaks(&[0.0, 0.5, 0.5, 0.0], 0.1, 1), vec![1]);
    }

    #[test]
    fn raising_theta_never_adds_estimates() {
        let diff = [0.0, 0.3, 0.1, 0.6, 0.0, 0.2, 0.05, 0.4];
        let low = find_peaks(&diff, 0.1, 2);
        let high = find_peaks(&diff, 0.2, 2);
        assert!(high.iter().all(|p| low.contains(p)));
        assert!(high.len() <= low.len());
    }

    #[test]
    fn single_strong_shift_peaks_near_boundary() {
        // one strong sign-crossing mean shift at 300 (the shape a
        // z-normalized level change takes); the global drop maximum must
        // land within w of it even for an untrained encoder
        use rand::Rng as _;
        use rand::SeedableRng as _;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let w = 32;
        let m = 300usize;
        let values: Vec<f32> = (0..600)
            .map(|t| {
                let level = if t < m { -2.5 } else { 2.5 };
                level + 0.5 * (rng.random::<f32>() - 0.5)
            })
            .collect();
        let series = LabeledSeries::new(values, 1, vec![m], "shift".into()).unwrap();
        let params = tiny_encoder(w);
        let cfg = DetectorConfig::new(w);
        let profile = similarity_profile(&params, &series, &cfg).unwrap();
        let (best, _) = profile
            .diff
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let peak_at = profile.boundaries[best];
        assert!(
            peak_at.abs_diff(m) <= w,
            "global diff max at {peak_at}, true shift at {m}"
        );
    }

    #[test]
    fn stride_consistency() {
        let values: Vec<f32> = (0..400)
            .map(|i| (i as f32 * 0.11).sin() + (i as f32 * 0.013).cos())
            .collect();
        let series = LabeledSeries::new(values, 1, vec![], "mix".into()).unwrap();
        let params = tiny_encoder(50);
        let mut cfg = DetectorConfig::new(50);
        let p1 = similarity_profile(&params, &series, &cfg).unwrap();
        cfg.stride = 2;
        let p2 = similarity_profile(&params, &series, &cfg).unwrap();
        for (i, &b) in p2.boundaries.iter().enumerate() {
            let j = p1.boundaries.iter().position(|&x| x == b).unwrap();
            assert_eq!(p1.sim[j], p2.sim[i], "sim at boundary {b} differs");
        }
    }

    #[test]
    fn estimates_csv_layout() {
        let est = ChangePointEstimates {
            estimates: vec![Estimate {
                index: 120,
                score: 0.25,
            }],
        };
        let mut buf = Vec::new();
        est.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "index,score\n120,0.25\n");
    }
}
