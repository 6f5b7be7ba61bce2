//! Command-line surface. Every tunable is optional at the clap level so a
//! key=value config file can supply it; explicit flags always win.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "cpd",
    version,
    about = "Self-supervised change point detection for time series",
    long_about = "Learns a contrastive embedding of history/future windows and reports \
                  change points where the cosine similarity of adjacent windows drops \
                  below its trailing moving average."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a labeled synthetic series (series.csv + labels.txt)
    Synth(SynthArgs),
    /// Train an encoder on a series (checkpoint.cpdt + history.csv)
    Train(TrainArgs),
    /// Scan a series with a trained encoder (profile.csv + estimates.csv)
    Detect(DetectArgs),
    /// Score estimates against ground truth per margin (report.csv)
    Eval(EvalArgs),
    /// Train/detect/eval over a window x batch x code grid (sweep.csv)
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Default)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Number of segments (boundaries between them are the change points)
    #[arg(long)]
    pub segments: Option<usize>,
    /// Segment length range, e.g. 300:600
    #[arg(long, value_name = "LO:HI")]
    pub segment_len: Option<String>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Comma-separated change kinds: mean_shift,var_shift,freq_shift,trend_change
    #[arg(long)]
    pub kinds: Option<String>,
    /// Shift magnitude range in units of sigma, e.g. 4:8
    #[arg(long, value_name = "LO:HI")]
    pub magnitude: Option<String>,
    /// Base noise standard deviation
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// key=value config file; explicit flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct LoaderArgs {
    /// Input series CSV
    #[arg(long)]
    pub data: PathBuf,
    /// Label sidecar (one change-point index per line); overrides --label-column
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// CSV column whose value 1 marks a change point
    #[arg(long)]
    pub label_column: Option<String>,
    /// Restrict channels to these named columns
    #[arg(long, value_name = "A,B,...")]
    pub value_columns: Option<String>,
    /// Treat the first row as data, not a header
    #[arg(long)]
    pub no_header: bool,
    /// Replace empty cells with the previous row's value
    #[arg(long)]
    pub forward_fill: bool,
    /// Skip per-channel z-normalization
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Args, Debug, Default, Clone)]
pub struct EncoderArgs {
    /// Window length in samples (w)
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    /// Comma-separated dilation rates per stack, e.g. 1,4,16
    #[arg(long)]
    pub dilations: Option<String>,
    #[arg(long)]
    pub stacks: Option<usize>,
    /// Widths of the two hidden head layers, e.g. 128,64
    #[arg(long, value_name = "A,B")]
    pub head_widths: Option<String>,
    /// Embedding length (c)
    #[arg(long)]
    pub code: Option<usize>,
    #[arg(long)]
    pub bn_momentum: Option<f64>,
    #[arg(long)]
    pub bn_epsilon: Option<f64>,
    /// Give future windows their own projection head
    #[arg(long)]
    pub separate_heads: bool,
}

#[derive(Args, Debug, Default, Clone)]
pub struct TrainerArgs {
    /// Positive pairs per batch (K)
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Softmax temperature
    #[arg(long)]
    pub tau: Option<f64>,
    /// Minimum boundary separation in samples (default 4 * window)
    #[arg(long)]
    pub delta_min: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Report/differentiate the batch-mean loss instead of the sum
    #[arg(long)]
    pub mean_reduction: bool,
    /// Global gradient-norm clip (0 disables)
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Stop early after this many logged rows without loss improvement
    #[arg(long)]
    pub plateau_patience: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub loader: LoaderArgs,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub trainer: TrainerArgs,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// key=value config file; explicit flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct DetectArgs {
    /// Trained encoder checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub loader: LoaderArgs,
    /// Window length; must match the checkpoint when given
    #[arg(long)]
    pub window: Option<usize>,
    /// Boundary step in samples
    #[arg(long)]
    pub stride: Option<usize>,
    /// Moving-average width in boundaries (W)
    #[arg(long)]
    pub ma_width: Option<usize>,
    /// Minimum drop height for a reported peak
    #[arg(long)]
    pub theta: Option<f64>,
    /// Minimum samples between reported change points (default: window)
    #[arg(long)]
    pub min_spacing: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// key=value config file; explicit flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    /// Estimates file: `index,score` CSV from detect, or one index per line
    #[arg(long)]
    pub estimates: PathBuf,
    /// Ground-truth labels, one change-point index per line
    #[arg(long)]
    pub labels: PathBuf,
    /// Comma-separated detection margins in samples
    #[arg(long)]
    pub margins: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// key=value config file; explicit flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct SweepArgs {
    #[command(flatten)]
    pub loader: LoaderArgs,
    /// Window sizes to sweep, e.g. 50,100
    #[arg(long)]
    pub windows: Option<String>,
    /// Batch sizes to sweep, e.g. 8,16
    #[arg(long)]
    pub batch_sizes: Option<String>,
    /// Code sizes to sweep, e.g. 4,10
    #[arg(long)]
    pub codes: Option<String>,
    /// Margins evaluated per cell
    #[arg(long)]
    pub margins: Option<String>,
    /// Training steps per cell
    #[arg(long)]
    pub steps: Option<usize>,
    /// Base seed; cell i trains with seed + i
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub stacks: Option<usize>,
    #[arg(long)]
    pub dilations: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Detector stride during the per-cell scan
    #[arg(long)]
    pub stride: Option<usize>,
    /// Minimum drop height for a reported peak
    #[arg(long)]
    pub theta: Option<f64>,
    /// Concurrent cell workers (results stay in grid order)
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// key=value config file; explicit flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
}
