//! Series ingestion, normalization, labels, and a synthetic labeled-series
//! generator for desk-scale ground truth.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// A multivariate series of T samples x d channels, stored row-major, with
/// an optional sorted list of ground-truth change-point indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSeries<S> {
    values: Vec<S>,
    num_samples: usize,
    channels: usize,
    pub change_points: Vec<usize>,
    pub name: String,
    /// Samples per second, when known.
    pub sample_rate: Option<f64>,
}

impl<S: Scalar> LabeledSeries<S> {
    pub fn new(
        values: Vec<S>,
        channels: usize,
        change_points: Vec<usize>,
        name: String,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("series needs at least one channel"));
        }
        if values.len() % channels != 0 {
            return Err(Error::invalid(format!(
                "{} values do not divide into {} channels",
                values.len(),
                channels
            )));
        }
        let num_samples = values.len() / channels;
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("series contains non-finite values"));
        }
        validate_labels(&change_points, num_samples)?;
        Ok(LabeledSeries {
            values,
            num_samples,
            channels,
            change_points,
            name,
            sample_rate: None,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    /// Row (sample) `t` across all channels.
    pub fn sample(&self, t: usize) -> &[S] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }

    /// Copy `len` consecutive samples starting at `start` into a `[len, d]`
    /// window tensor.
    pub fn window(&self, start: usize, len: usize) -> Tensor<S> {
        let d = self.channels;
        let data = self.values[start * d..(start + len) * d].to_vec();
        Tensor::new(vec![len, d], data).expect("window shape")
    }

    /// Drop the labels; useful for verifying that training never reads them.
    pub fn without_labels(&self) -> Self {
        let mut copy = self.clone();
        copy.change_points.clear();
        copy
    }

    /// Replace the labels, enforcing the strictly-increasing interior-index
    /// invariant.
    pub fn set_labels(&mut self, labels: Vec<usize>) -> Result<()> {
        validate_labels(&labels, self.num_samples)?;
        self.change_points = labels;
        Ok(())
    }
}

fn validate_labels(change_points: &[usize], num_samples: usize) -> Result<()> {
    for pair in change_points.windows(2) {
        if pair[0] >= pair[1] {
            return Err(Error::invalid("change points must be strictly increasing"));
        }
    }
    if let (Some(&first), Some(&last)) = (change_points.first(), change_points.last()) {
        if first == 0 || last >= num_samples {
            return Err(Error::invalid(format!(
                "change points must lie strictly inside (0, {num_samples})"
            )));
        }
    }
    Ok(())
}

/// Per-channel z-normalization: subtract the mean, divide by the population
/// standard deviation. Channels with a deviation below 1e-8 become all-zero.
pub fn znormalize<S: Scalar>(series: &LabeledSeries<S>) -> LabeledSeries<S> {
    let d = series.channels;
    let t_len = series.num_samples;
    let mut out = series.clone();
    if t_len == 0 {
        return out;
    }
    for c in 0..d {
        let mut mean = 0.0f64;
        for t in 0..t_len {
            mean += series.values[t * d + c].to_f64_lossy();
        }
        mean /= t_len as f64;
        let mut var = 0.0f64;
        for t in 0..t_len {
            let dev = series.values[t * d + c].to_f64_lossy() - mean;
            var += dev * dev;
        }
        let std = (var / t_len as f64).sqrt();
        if std < 1e-8 {
            for t in 0..t_len {
                out.values[t * d + c] = S::zero();
            }
        } else {
            for t in 0..t_len {
                let v = (series.values[t * d + c].to_f64_lossy() - mean) / std;
                out.values[t * d + c] = s(v);
            }
        }
    }
    out
}

/// Options for CSV ingestion beyond the common path.
#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    pub has_header: bool,
    /// Column whose value 1 marks a change point at that row; requires a
    /// header and is excluded from the value channels.
    pub label_column: Option<String>,
    /// Restrict value channels to these named columns (requires a header).
    pub value_columns: Option<Vec<String>>,
    /// Replace empty cells with the previous row's value instead of
    /// rejecting them.
    pub forward_fill: bool,
}

/// Load a CSV file: one row per timestep, numeric columns become channels in
/// file order. Rows where `label_column` equals 1 become change points.
pub fn load_csv<S: Scalar>(
    path: &Path,
    has_header: bool,
    label_column: Option<&str>,
) -> Result<LabeledSeries<S>> {
    load_csv_opts(
        path,
        &CsvOptions {
            has_header,
            label_column: label_column.map(|c| c.to_string()),
            value_columns: None,
            forward_fill: false,
        },
    )
}

pub fn load_csv_opts<S: Scalar>(path: &Path, opts: &CsvOptions) -> Result<LabeledSeries<S>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Load {
            row: 0,
            message: e.to_string(),
        })?;

    let header_row: Vec<String> = if opts.has_header {
        reader
            .headers()
            .map_err(|e| Error::Load {
                row: 1,
                message: e.to_string(),
            })?
            .iter()
            .map(|h| h.trim().to_string())
            .collect()
    } else {
        Vec::new()
    };

    let label_idx = match &opts.label_column {
        Some(name) => {
            if !opts.has_header {
                return Err(Error::invalid(
                    "label_column needs a header row to resolve the name",
                ));
            }
            let idx = header_row.iter().position(|h| h == name).ok_or_else(|| {
                Error::Load {
                    row: 1,
                    message: format!("label column {name:?} not found in header"),
                }
            })?;
            Some(idx)
        }
        None => None,
    };

    let value_idx: Option<Vec<usize>> = match &opts.value_columns {
        Some(names) => {
            if !opts.has_header {
                return Err(Error::invalid(
                    "value_columns needs a header row to resolve the names",
                ));
            }
            let mut idx = Vec::with_capacity(names.len());
            for name in names {
                let found = header_row.iter().position(|h| h == name).ok_or_else(|| {
                    Error::Load {
                        row: 1,
                        message: format!("value column {name:?} not found in header"),
                    }
                })?;
                if Some(found) == label_idx {
                    return Err(Error::invalid(format!(
                        "column {name:?} cannot be both a value and the label column"
                    )));
                }
                idx.push(found);
            }
            Some(idx)
        }
        None => None,
    };

    let mut values: Vec<S> = Vec::new();
    let mut change_points: Vec<usize> = Vec::new();
    let mut columns: Option<usize> = None;
    let mut prev_row: Vec<f64> = Vec::new();
    let header_lines = usize::from(opts.has_header);

    for (i, record) in reader.records().enumerate() {
        let file_row = i + 1 + header_lines;
        let record = record.map_err(|e| Error::Load {
            row: file_row,
            message: e.to_string(),
        })?;
        let ncols = record.len();
        match columns {
            None => columns = Some(ncols),
            Some(c) if c != ncols => {
                return Err(Error::Load {
                    row: file_row,
                    message: format!("ragged row: expected {c} columns, found {ncols}"),
                })
            }
            _ => {}
        }
        let mut row_values: Vec<f64> = Vec::with_capacity(ncols);
        for (col, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            let parsed: f64 = if cell.is_empty() {
                if opts.forward_fill && prev_row.len() > col {
                    prev_row[col]
                } else {
                    return Err(Error::Load {
                        row: file_row,
                        message: format!("empty cell in column {col}"),
                    });
                }
            } else {
                cell.parse().map_err(|_| Error::Load {
                    row: file_row,
                    message: format!("non-numeric cell {cell:?} in column {col}"),
                })?
            };
            if !parsed.is_finite() {
                return Err(Error::Load {
                    row: file_row,
                    message: format!("non-finite value in column {col}"),
                });
            }
            row_values.push(parsed);
        }
        if let Some(li) = label_idx {
            if row_values[li] == 1.0 {
                change_points.push(i);
            }
        }
        match &value_idx {
            Some(idx) => {
                for &col in idx {
                    if col >= row_values.len() {
                        return Err(Error::Load {
                            row: file_row,
                            message: format!("value column index {col} out of range"),
                        });
                    }
                    values.push(s(row_values[col]));
                }
            }
            None => {
                for (col, &v) in row_values.iter().enumerate() {
                    if Some(col) != label_idx {
                        values.push(s(v));
                    }
                }
            }
        }
        prev_row = row_values;
    }

    let channels = match &value_idx {
        Some(idx) => idx.len(),
        None => columns.unwrap_or(0).saturating_sub(usize::from(label_idx.is_some())),
    };
    if channels == 0 {
        return Err(Error::Load {
            row: 0,
            message: "no value columns found".into(),
        });
    }
    // A label on row 0 or on a header-only file cannot be a valid change
    // point; constructor validation owns the rest.
    change_points.retain(|&cp| cp != 0);
    let name = path
        .file_stem()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into());
    LabeledSeries::new(values, channels, change_points, name)
}

/// Plain-text label sidecar: one change-point index per line.
pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let reader = BufReader::new(File::open(path)?);
    let mut labels = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let idx: usize = line.parse().map_err(|_| Error::Load {
            row: i + 1,
            message: format!("bad change-point index {line:?}"),
        })?;
        labels.push(idx);
    }
    Ok(labels)
}

/// Write a series as CSV with header `c0,...,c{d-1}`; f32 precision survives
/// the round trip exactly.
pub fn write_series_csv<S: Scalar>(series: &LabeledSeries<S>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..series.channels()).map(|c| format!("c{c}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for t in 0..series.num_samples() {
        let row: Vec<String> = series
            .sample(t)
            .iter()
            .map(|v| format!("{}", v))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in labels {
        writeln!(w, "{l}")?;
    }
    Ok(())
}

/// Change families the generator can produce at segment boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangeKind {
    MeanShift,
    VarShift,
    FreqShift,
    TrendChange,
}

impl ChangeKind {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "mean_shift" => Ok(ChangeKind::MeanShift),
            "var_shift" => Ok(ChangeKind::VarShift),
            "freq_shift" => Ok(ChangeKind::FreqShift),
            "trend_change" => Ok(ChangeKind::TrendChange),
            other => Err(Error::invalid(format!(
                "unknown change kind {other:?} (expected mean_shift, var_shift, freq_shift or trend_change)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ChangeKind::MeanShift => "mean_shift",
            ChangeKind::VarShift => "var_shift",
            ChangeKind::FreqShift => "freq_shift",
            ChangeKind::TrendChange => "trend_change",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_segments: usize,
    /// Inclusive range of segment lengths in samples.
    pub segment_len: (usize, usize),
    pub channels: usize,
    pub kinds: Vec<ChangeKind>,
    /// Inclusive range of shift magnitudes, in units of the base noise sigma.
    pub magnitude: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_segments < 2 {
            return Err(Error::invalid("generator needs at least 2 segments"));
        }
        if self.segment_len.0 == 0 || self.segment_len.0 > self.segment_len.1 {
            return Err(Error::invalid("segment_len range must satisfy 1 <= lo <= hi"));
        }
        if self.channels == 0 {
            return Err(Error::invalid("generator needs at least one channel"));
        }
        if self.kinds.is_empty() {
            return Err(Error::invalid("at least one change kind is required"));
        }
        if !(self.magnitude.0 > 0.0 && self.magnitude.0 <= self.magnitude.1) {
            return Err(Error::invalid("magnitude range must satisfy 0 < lo <= hi"));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(Error::invalid("noise sigma must be positive"));
        }
        Ok(())
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_segments: 10,
            segment_len: (300, 600),
            channels: 1,
            kinds: vec![ChangeKind::MeanShift],
            magnitude: (4.0, 8.0),
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

/// Per-channel generator state carried across segments.
struct ChannelState {
    level: f64,
    slope: f64,
    noise_scale: f64,
    freq: f64,
    amp: f64,
    phase: f64,
}

/// Concatenate segments whose generating process changes at every boundary;
/// the boundaries are the ground-truth change points. Deterministic per seed.
pub fn synth_generate<S: Scalar>(spec: &SynthSpec) -> Result<LabeledSeries<S>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigma = spec.noise_sigma;
    let unit_normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let wave = spec.kinds.contains(&ChangeKind::FreqShift);
    let mut channels: Vec<ChannelState> = (0..spec.channels)
        .map(|_| ChannelState {
            level: 0.0,
            slope: 0.0,
            noise_scale: 1.0,
            freq: if wave { 0.05 } else { 0.0 },
            amp: if wave { 2.0 * sigma } else { 0.0 },
            phase: 0.0,
        })
        .collect();

    let mut values: Vec<S> = Vec::new();
    let mut change_points = Vec::new();
    let mut t_global = 0usize;
    for seg in 0..spec.n_segments {
        if seg > 0 {
            // draw the change for this boundary
            let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
            for ch in channels.iter_mut() {
                // carry any ramp into the new baseline so only the chosen
                // property jumps
                match kind {
                    ChangeKind::MeanShift => {
                        let mag = rng.random_range(spec.magnitude.0..=spec.magnitude.1);
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        ch.level += sign * mag * sigma;
                    }
                    ChangeKind::VarShift => {
                        let factor = rng.random_range(2.0..=4.0);
                        ch.noise_scale = if ch.noise_scale > 1.5 {
                            1.0
                        } else {
                            factor
                        };
                    }
                    ChangeKind::FreqShift => {
                        ch.freq = rng.random_range(0.02..=0.2);
                    }
                    ChangeKind::TrendChange => {
                        let mag = rng.random_range(spec.magnitude.0..=spec.magnitude.1);
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        ch.slope = sign * mag * sigma / 100.0;
                    }
                }
            }
            change_points.push(t_global);
        }
        let seg_len = rng.random_range(spec.segment_len.0..=spec.segment_len.1);
        for _ in 0..seg_len {
            for ch in channels.iter_mut() {
                let wave_term = if ch.amp > 0.0 {
                    ch.amp * (std::f64::consts::TAU * ch.freq * t_global as f64 + ch.phase).sin()
                } else {
                    0.0
                };
                let noise = unit_normal.sample(&mut rng) * sigma * ch.noise_scale;
                values.push(s(ch.level + wave_term + noise));
                ch.level += ch.slope;
            }
            t_global += 1;
        }
    }
    LabeledSeries::new(
        values,
        spec.channels,
        change_points,
        format!("synth-seed{}", spec.seed),
    )
}

#[cfg(test)]
fn unique_sorted(indices: &[usize]) -> bool {
    indices.windows(2).all(|w| w[0] < w[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_simple_csv_with_header() {
        let f = write_tmp("v\n1\n2\n3\n");
        let series = load_csv::<f32>(f.path(), true, None).unwrap();
        assert_eq!(series.num_samples(), 3);
        assert_eq!(series.channels(), 1);
        assert!(series.change_points.is_empty());
        assert_eq!(series.values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn load_csv_with_changepoint_column() {
        let f = write_tmp("v,cp\n0.5,0\n0.6,0\n9.0,1\n9.1,0\n");
        let series = load_csv::<f32>(f.path(), true, Some("cp")).unwrap();
        assert_eq!(series.change_points, vec![2]);
        assert_eq!(series.channels(), 1);
        assert_eq!(series.values(), &[0.5, 0.6, 9.0, 9.1]);
    }

    #[test]
    fn load_csv_rejects_ragged_and_non_numeric() {
        let f = write_tmp("a,b\n1,2\n3\n");
        match load_csv::<f32>(f.path(), true, None) {
            Err(Error::Load { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected load error, got {other:?}"),
        }
        let f = write_tmp("a\n1\nx\n");
        match load_csv::<f32>(f.path(), true, None) {
            Err(Error::Load { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn value_columns_select_named_channels() {
        let f = write_tmp("ts,value,flag
0,1.5,0
1,2.5,1
2,3.5,0
");
        let opts = CsvOptions {
            has_header: true,
            label_column: Some("flag".into()),
            value_columns: Some(vec!["value".into()]),
            forward_fill: false,
        };
        let series = load_csv_opts::<f32>(f.path(), &opts).unwrap();
        assert_eq!(series.channels(), 1);
        assert_eq!(series.values(), &[1.5, 2.5, 3.5]);
        assert_eq!(series.change_points, vec![1]);
    }

    #[test]
    fn forward_fill_replaces_empty_cells() {
        let f = write_tmp("a,b\n1,2\n,3\n4,5\n");
        assert!(load_csv::<f32>(f.path(), true, None).is_err());
        let opts = CsvOptions {
            has_header: true,
            forward_fill: true,
            ..Default::default()
        };
        let series = load_csv_opts::<f32>(f.path(), &opts).unwrap();
        assert_eq!(series.values(), &[1.0, 2.0, 1.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn csv_round_trip_preserves_values_and_labels() {
        let spec = SynthSpec {
            n_segments: 3,
            segment_len: (50, 80),
            seed: 12,
            ..Default::default()
        };
        let series = synth_generate::<f32>(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("series.csv");
        let label_path = dir.path().join("labels.txt");
        write_series_csv(&series, &csv_path).unwrap();
        write_labels(&series.change_points, &label_path).unwrap();
        let mut loaded = load_csv::<f32>(&csv_path, true, None).unwrap();
        loaded.change_points = load_labels(&label_path).unwrap();
        assert_eq!(loaded.values(), series.values());
        assert_eq!(loaded.change_points, series.change_points);
    }

    #[test]
    fn znormalize_basics() {
        let series = LabeledSeries::new(vec![1.0f64, 2.0, 3.0], 1, vec![], "t".into()).unwrap();
        let normed = znormalize(&series);
        let mean: f64 = normed.values().iter().sum::<f64>() / 3.0;
        let var: f64 = normed.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-12);

        let constant = LabeledSeries::new(vec![5.0f64; 10], 1, vec![], "c".into()).unwrap();
        assert!(znormalize(&constant).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn znormalize_is_idempotent() {
        let spec = SynthSpec {
            n_segments: 4,
            segment_len: (100, 150),
            seed: 3,
            ..Default::default()
        };
        let series = synth_generate::<f64>(&spec).unwrap();
        let once = znormalize(&series);
        let twice = znormalize(&once);
        for (a, b) in once.values().iter().zip(twice.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn generator_boundary_count_and_determinism() {
        let spec = SynthSpec {
            n_segments: 3,
            segment_len: (100, 200),
            seed: 7,
            ..Default::default()
        };
        let a = synth_generate::<f32>(&spec).unwrap();
        assert_eq!(a.change_points.len(), 2);
        assert!(unique_sorted(&a.change_points));
        let b = synth_generate::<f32>(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_shift_magnitude_reaches_segment_means() {
        // 5-sigma shifts: segment means on either side of every boundary
        // must differ by at least 3 sigma (noise of a 200+ sample mean is
        // tiny next to the shift)
        for seed in 0..100 {
            let spec = SynthSpec {
                n_segments: 4,
                segment_len: (200, 250),
                magnitude: (5.0, 5.0),
                seed,
                ..Default::default()
            };
            let series = synth_generate::<f64>(&spec).unwrap();
            let mut boundaries = vec![0];
            boundaries.extend(&series.change_points);
            boundaries.push(series.num_samples());
            for w in boundaries.windows(2).collect::<Vec<_>>().windows(2) {
                let (a0, a1) = (w[0][0], w[0][1]);
                let (b0, b1) = (w[1][0], w[1][1]);
                let mean_a: f64 =
                    (a0..a1).map(|t| series.sample(t)[0]).sum::<f64>() / (a1 - a0) as f64;
                let mean_b: f64 =
                    (b0..b1).map(|t| series.sample(t)[0]).sum::<f64>() / (b1 - b0) as f64;
                assert!(
                    (mean_a - mean_b).abs() >= 3.0,
                    "seed {seed}: boundary shift too small"
                );
            }
        }
    }

    #[test]
    fn label_validation() {
        assert!(LabeledSeries::new(vec![0.0f32; 10], 1, vec![3, 3], "x".into()).is_err());
        assert!(LabeledSeries::new(vec![0.0f32; 10], 1, vec![0], "x".into()).is_err());
        assert!(LabeledSeries::new(vec![0.0f32; 10], 1, vec![10], "x".into()).is_err());
        assert!(LabeledSeries::new(vec![f32::NAN; 4], 1, vec![], "x".into()).is_err());
    }
}
