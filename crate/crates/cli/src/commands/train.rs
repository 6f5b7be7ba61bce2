//! `cpd train`: fit an encoder on a series, write checkpoint + history.

use std::fs::File;
use std::io::BufWriter;

use cpd_core::encoder::save_checkpoint;
use cpd_core::trainer::train;

use crate::args::TrainArgs;
use crate::config::{ensure_out_dir, ConfigEcho, FileConfig};
use crate::error::{CliError, CliResult};

use super::shared;

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let loader = shared::resolve_loader(&args.loader, &file)?;
    let series = shared::load_series(&loader)?;
    let enc_cfg = shared::resolve_encoder(&args.encoder, &file, series.channels())?;
    let train_cfg = shared::resolve_trainer(&args.trainer, &file)?;

    ensure_out_dir(&args.out)?;
    let (params, history) = train(&series, &enc_cfg, &train_cfg, Some(&args.out))?;

    let checkpoint_path = args.out.join("checkpoint.cpdt");
    save_checkpoint(&params, &checkpoint_path).map_err(CliError::from)?;
    let history_file = File::create(args.out.join("history.csv"))
        .map_err(|e| CliError::Io(format!("cannot write history.csv: {e}")))?;
    history
        .write_csv(BufWriter::new(history_file))
        .map_err(CliError::from)?;

    let mut echo = ConfigEcho::new("train");
    shared::echo_loader(&mut echo, &loader);
    shared::echo_encoder(&mut echo, &enc_cfg);
    shared::echo_trainer(&mut echo, &train_cfg, enc_cfg.window_len);
    echo.write(&args.out)?;

    let final_loss = history.rows.last().map(|r| r.loss);
    println!(
        "trained {} steps on {} samples ({} parameters); checkpoint at {}{}",
        train_cfg.steps,
        series.num_samples(),
        params.param_count(),
        checkpoint_path.display(),
        final_loss
            .map(|l| format!("; final loss {l:.4}"))
            .unwrap_or_default()
    );
    Ok(())
}
