//! Flag/file/default resolution shared by train, detect and sweep.

use std::path::PathBuf;

use cpd_core::data::{load_csv_opts, load_labels, znormalize, CsvOptions};
use cpd_core::encoder::EncoderConfig;
use cpd_core::trainer::TrainConfig;
use cpd_core::Series32;

use crate::args::{EncoderArgs, LoaderArgs, TrainerArgs};
use crate::config::{join_list, parse_list, ConfigEcho, FileConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct LoaderSettings {
    pub data: PathBuf,
    pub labels: Option<PathBuf>,
    pub label_column: Option<String>,
    pub value_columns: Option<Vec<String>>,
    pub has_header: bool,
    pub forward_fill: bool,
    pub normalize: bool,
}

pub fn resolve_loader(args: &LoaderArgs, file: &FileConfig) -> CliResult<LoaderSettings> {
    let value_columns = match args
        .value_columns
        .clone()
        .or_else(|| file.get_string("value_columns"))
    {
        Some(text) => Some(parse_list::<String>(&text, "value_columns")?),
        None => None,
    };
    Ok(LoaderSettings {
        data: args.data.clone(),
        labels: args.labels.clone(),
        label_column: args
            .label_column
            .clone()
            .or_else(|| file.get_string("label_column")),
        value_columns,
        has_header: !file.resolve_switch(args.no_header, "no_header")?,
        forward_fill: file.resolve_switch(args.forward_fill, "forward_fill")?,
        normalize: !file.resolve_switch(args.no_normalize, "no_normalize")?,
    })
}

pub fn load_series(settings: &LoaderSettings) -> CliResult<Series32> {
    let opts = CsvOptions {
        has_header: settings.has_header,
        label_column: settings.label_column.clone(),
        value_columns: settings.value_columns.clone(),
        forward_fill: settings.forward_fill,
    };
    let mut series = load_csv_opts::<f32>(&settings.data, &opts)
        .map_err(|e| CliError::Io(format!("{}: {e}", settings.data.display())))?;
    if let Some(labels) = &settings.labels {
        let indices =
            load_labels(labels).map_err(|e| CliError::Io(format!("{}: {e}", labels.display())))?;
        series
            .set_labels(indices)
            .map_err(|e| CliError::Io(format!("{}: {e}", labels.display())))?;
    }
    if settings.normalize {
        series = znormalize(&series);
    }
    Ok(series)
}

pub fn echo_loader(echo: &mut ConfigEcho, settings: &LoaderSettings) {
    echo.push("data", settings.data.display());
    echo.push_opt("labels", settings.labels.as_ref().map(|p| p.display()));
    echo.push_opt("label_column", settings.label_column.as_deref());
    echo.push_opt(
        "value_columns",
        settings.value_columns.as_deref().map(join_list),
    );
    echo.push("no_header", !settings.has_header);
    echo.push("forward_fill", settings.forward_fill);
    echo.push("no_normalize", !settings.normalize);
}

pub fn resolve_encoder(
    args: &EncoderArgs,
    file: &FileConfig,
    channels: usize,
) -> CliResult<EncoderConfig> {
    let window = file.resolve(args.window, "window", 100)?;
    let mut cfg = EncoderConfig::new(window, channels);
    cfg.filters = file.resolve(args.filters, "filters", cfg.filters)?;
    cfg.kernel = file.resolve(args.kernel, "kernel", cfg.kernel)?;
    if let Some(text) = args
        .dilations
        .clone()
        .or_else(|| file.get_string("dilations"))
    {
        cfg.dilations = parse_list(&text, "dilations")?;
    }
    cfg.stacks = file.resolve(args.stacks, "stacks", cfg.stacks)?;
    if let Some(text) = args
        .head_widths
        .clone()
        .or_else(|| file.get_string("head_widths"))
    {
        let widths: Vec<usize> = parse_list(&text, "head_widths")?;
        if widths.len() != 2 {
            return Err(CliError::Usage(
                "head_widths needs exactly two entries".into(),
            ));
        }
        cfg.head_widths = [widths[0], widths[1]];
    }
    cfg.code_size = file.resolve(args.code, "code", cfg.code_size)?;
    cfg.bn_momentum = file.resolve(args.bn_momentum, "bn_momentum", cfg.bn_momentum)?;
    cfg.bn_epsilon = file.resolve(args.bn_epsilon, "bn_epsilon", cfg.bn_epsilon)?;
    cfg.separate_heads = file.resolve_switch(args.separate_heads, "separate_heads")?;
    cfg.validate().map_err(CliError::from)?;
    Ok(cfg)
}

pub fn echo_encoder(echo: &mut ConfigEcho, cfg: &EncoderConfig) {
    echo.push("window", cfg.window_len);
    echo.push("channels", cfg.channels);
    echo.push("filters", cfg.filters);
    echo.push("kernel", cfg.kernel);
    echo.push("dilations", join_list(&cfg.dilations));
    echo.push("stacks", cfg.stacks);
    echo.push("head_widths", join_list(&cfg.head_widths));
    echo.push("code", cfg.code_size);
    echo.push("bn_momentum", cfg.bn_momentum);
    echo.push("bn_epsilon", cfg.bn_epsilon);
    echo.push("separate_heads", cfg.separate_heads);
}

pub fn resolve_trainer(args: &TrainerArgs, file: &FileConfig) -> CliResult<TrainConfig> {
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        batch_size: file.resolve(args.batch_size, "batch_size", defaults.batch_size)?,
        tau: file.resolve(args.tau, "tau", defaults.tau)?,
        delta_min: file.resolve_opt(args.delta_min, "delta_min")?,
        learning_rate: file.resolve(args.lr, "lr", defaults.learning_rate)?,
        beta1: defaults.beta1,
        beta2: defaults.beta2,
        adam_epsilon: defaults.adam_epsilon,
        steps: file.resolve(args.steps, "steps", defaults.steps)?,
        seed: file.resolve(args.seed, "seed", defaults.seed)?,
        checkpoint_every: file.resolve(
            args.checkpoint_every,
            "checkpoint_every",
            defaults.checkpoint_every,
        )?,
        log_every: file.resolve(args.log_every, "log_every", defaults.log_every)?,
        mean_reduction: file.resolve_switch(args.mean_reduction, "mean_reduction")?,
        clip_norm: file.resolve(args.clip_norm, "clip_norm", defaults.clip_norm)?,
        plateau_patience: file.resolve_opt(args.plateau_patience, "plateau_patience")?,
    };
    cfg.validate().map_err(CliError::from)?;
    Ok(cfg)
}

pub fn echo_trainer(echo: &mut ConfigEcho, cfg: &TrainConfig, window_len: usize) {
    echo.push("batch_size", cfg.batch_size);
    echo.push("tau", cfg.tau);
    echo.push("delta_min", cfg.resolved_delta_min(window_len));
    echo.push("lr", cfg.learning_rate);
    echo.push("steps", cfg.steps);
    echo.push("seed", cfg.seed);
    echo.push("checkpoint_every", cfg.checkpoint_every);
    echo.push("log_every", cfg.log_every);
    echo.push("mean_reduction", cfg.mean_reduction);
    echo.push("clip_norm", cfg.clip_norm);
    echo.push_opt("plateau_patience", cfg.plateau_patience);
}
