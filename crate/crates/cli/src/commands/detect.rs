//! `cpd detect`: scan a series with a trained encoder, write the similarity
//! profile and the change point estimates.

use std::fs::File;
use std::io::BufWriter;

use cpd_core::detector::{estimates_from_profile, similarity_profile, DetectorConfig};
use cpd_core::encoder::load_checkpoint;

use crate::args::DetectArgs;
use crate::config::{ensure_out_dir, ConfigEcho, FileConfig};
use crate::error::{CliError, CliResult};

use super::shared;

pub fn run(args: &DetectArgs) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let params = load_checkpoint::<f32>(&args.checkpoint)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.checkpoint.display())))?;

    let window = file.resolve_opt(args.window, "window")?;
    if let Some(w) = window {
        if w != params.config().window_len {
            return Err(CliError::ConfigMismatch(format!(
                "requested window {} but checkpoint was trained with window {}",
                w,
                params.config().window_len
            )));
        }
    }
    let loader = shared::resolve_loader(&args.loader, &file)?;
    let series = shared::load_series(&loader)?;
    if series.channels() != params.config().channels {
        return Err(CliError::ConfigMismatch(format!(
            "series has {} channels but checkpoint expects {}",
            series.channels(),
            params.config().channels
        )));
    }

    let mut cfg = DetectorConfig::new(params.config().window_len);
    cfg.stride = file.resolve(args.stride, "stride", cfg.stride)?;
    cfg.ma_width = file.resolve(args.ma_width, "ma_width", cfg.ma_width)?;
    cfg.prominence = file.resolve(args.theta, "theta", cfg.prominence)?;
    cfg.min_spacing = file.resolve(args.min_spacing, "min_spacing", cfg.min_spacing)?;
    cfg.validate().map_err(CliError::from)?;

    let profile = similarity_profile(&params, &series, &cfg)?;
    let estimates = estimates_from_profile(&profile, &cfg);

    ensure_out_dir(&args.out)?;
    let profile_file = File::create(args.out.join("profile.csv"))
        .map_err(|e| CliError::Io(format!("cannot write profile.csv: {e}")))?;
    profile
        .write_csv(BufWriter::new(profile_file))
        .map_err(CliError::from)?;
    let est_file = File::create(args.out.join("estimates.csv"))
        .map_err(|e| CliError::Io(format!("cannot write estimates.csv: {e}")))?;
    estimates
        .write_csv(BufWriter::new(est_file))
        .map_err(CliError::from)?;

    let mut echo = ConfigEcho::new("detect");
    echo.push("checkpoint", args.checkpoint.display());
    shared::echo_loader(&mut echo, &loader);
    echo.push("window", cfg.window_len);
    echo.push("stride", cfg.stride);
    echo.push("ma_width", cfg.ma_width);
    echo.push("theta", cfg.prominence);
    echo.push("min_spacing", cfg.min_spacing);
    echo.write(&args.out)?;

    if profile.degenerate > 0 {
        log::warn!(
            "{} of {} boundaries produced zero-norm embeddings",
            profile.degenerate,
            profile.boundaries.len()
        );
    }
    println!(
        "scanned {} boundaries, {} change point estimates written to {}",
        profile.boundaries.len(),
        estimates.estimates.len(),
        args.out.display()
    );
    Ok(())
}
