//! `cpd synth`: generate a labeled synthetic series.

use cpd_core::data::{synth_generate, write_labels, write_series_csv, ChangeKind, SynthSpec};

use crate::args::SynthArgs;
use crate::config::{ensure_out_dir, join_list, parse_list, parse_range, ConfigEcho, FileConfig};
use crate::error::{CliError, CliResult};

pub fn run(args: &SynthArgs) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let defaults = SynthSpec::default();

    let segment_len = match args
        .segment_len
        .clone()
        .or_else(|| file.get_string("segment_len"))
    {
        Some(text) => parse_range(&text, "segment_len")?,
        None => defaults.segment_len,
    };
    let magnitude = match args
        .magnitude
        .clone()
        .or_else(|| file.get_string("magnitude"))
    {
        Some(text) => parse_range(&text, "magnitude")?,
        None => defaults.magnitude,
    };
    let kinds = match args.kinds.clone().or_else(|| file.get_string("kinds")) {
        Some(text) => parse_list::<String>(&text, "kinds")?
            .iter()
            .map(|k| ChangeKind::parse(k).map_err(CliError::from))
            .collect::<CliResult<Vec<_>>>()?,
        None => defaults.kinds.clone(),
    };
    let spec = SynthSpec {
        n_segments: file.resolve(args.segments, "segments", defaults.n_segments)?,
        segment_len,
        channels: file.resolve(args.channels, "channels", defaults.channels)?,
        kinds,
        magnitude,
        noise_sigma: file.resolve(args.sigma, "sigma", defaults.noise_sigma)?,
        seed: file.resolve(args.seed, "seed", defaults.seed)?,
    };
    spec.validate().map_err(CliError::from)?;

    let series = synth_generate::<f32>(&spec).map_err(CliError::from)?;
    ensure_out_dir(&args.out)?;
    write_series_csv(&series, &args.out.join("series.csv")).map_err(CliError::from)?;
    write_labels(&series.change_points, &args.out.join("labels.txt")).map_err(CliError::from)?;

    let mut echo = ConfigEcho::new("synth");
    echo.push("segments", spec.n_segments);
    echo.push(
        "segment_len",
        format!("{}:{}", spec.segment_len.0, spec.segment_len.1),
    );
    echo.push("channels", spec.channels);
    echo.push(
        "kinds",
        join_list(&spec.kinds.iter().map(|k| k.name()).collect::<Vec<_>>()),
    );
    echo.push(
        "magnitude",
        format!("{}:{}", spec.magnitude.0, spec.magnitude.1),
    );
    echo.push("sigma", spec.noise_sigma);
    echo.push("seed", spec.seed);
    echo.write(&args.out)?;

    println!(
        "wrote {} samples x {} channels with {} change points to {}",
        series.num_samples(),
        series.channels(),
        series.change_points.len(),
        args.out.display()
    );
    Ok(())
}
