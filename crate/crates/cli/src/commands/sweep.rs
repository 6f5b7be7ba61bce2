//! `cpd sweep`: train/detect/eval across a window x batch x code grid.
//!
//! Cells are independent and run sequentially by default (`--jobs` raises
//! the worker count; results land in grid order either way). Cell i trains
//! with `seed + i` so any single cell can be reproduced in isolation.
//! Failures are recorded in the results table and the sweep continues.

use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};

use cpd_core::detector::{detect, DetectorConfig};
use cpd_core::encoder::EncoderConfig;
use cpd_core::eval::report_suite;
use cpd_core::trainer::{train, TrainConfig};
use cpd_core::Series32;

use crate::args::SweepArgs;
use crate::config::{ensure_out_dir, join_list, parse_list, ConfigEcho, FileConfig};
use crate::error::{CliError, CliResult};

use super::shared;

struct CellSpec {
    window: usize,
    batch: usize,
    code: usize,
    seed: u64,
}

fn run_cell(
    series: &Series32,
    cell: &CellSpec,
    base_enc: &EncoderConfig,
    base_train: &TrainConfig,
    stride: usize,
    theta: f64,
    margins: &[usize],
) -> CliResult<Vec<(usize, f64)>> {
    let enc_cfg = EncoderConfig {
        window_len: cell.window,
        channels: series.channels(),
        code_size: cell.code,
        ..base_enc.clone()
    };
    enc_cfg.validate().map_err(CliError::from)?;
    let train_cfg = TrainConfig {
        batch_size: cell.batch,
        seed: cell.seed,
        // history is discarded; one row keeps memory flat
        log_every: base_train.steps.max(1),
        ..base_train.clone()
    };
    let (params, _) = train(series, &enc_cfg, &train_cfg, None)?;
    let mut det = DetectorConfig::new(cell.window);
    det.stride = stride;
    det.prominence = theta;
    let estimates = detect(&params, series, &det)?;
    let reports = report_suite(&series.change_points, &estimates.indices(), margins)?;
    Ok(reports.into_iter().map(|r| (r.margin, r.f1)).collect())
}

pub fn run(args: &SweepArgs) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let loader = shared::resolve_loader(&args.loader, &file)?;
    let series = shared::load_series(&loader)?;
    if series.change_points.is_empty() {
        return Err(CliError::Usage(
            "sweep needs ground-truth labels to score cells (use --labels or --label-column)"
                .into(),
        ));
    }

    let list_of = |flag: &Option<String>, key: &str, default: &[usize]| -> CliResult<Vec<usize>> {
        match flag.clone().or_else(|| file.get_string(key)) {
            Some(text) => parse_list(&text, key),
            None => Ok(default.to_vec()),
        }
    };
    let windows = list_of(&args.windows, "windows", &[50, 100])?;
    let batches = list_of(&args.batch_sizes, "batch_sizes", &[8, 16])?;
    let codes = list_of(&args.codes, "codes", &[4, 10])?;
    let margins = list_of(&args.margins, "margins", &[24, 50, 75])?;
    for (name, list) in [
        ("windows", &windows),
        ("batch_sizes", &batches),
        ("codes", &codes),
        ("margins", &margins),
    ] {
        if list.is_empty() {
            return Err(CliError::Usage(format!("{name} must not be empty")));
        }
    }

    let seed: u64 = file.resolve(args.seed, "seed", 0)?;
    let steps: usize = file.resolve(args.steps, "steps", 300)?;
    let stride: usize = file.resolve(args.stride, "stride", 1)?;
    let theta: f64 = file.resolve(args.theta, "theta", 0.05)?;

    let mut base_enc = EncoderConfig::new(1, series.channels());
    base_enc.filters = file.resolve(args.filters, "filters", base_enc.filters)?;
    base_enc.stacks = file.resolve(args.stacks, "stacks", base_enc.stacks)?;
    if let Some(text) = args
        .dilations
        .clone()
        .or_else(|| file.get_string("dilations"))
    {
        base_enc.dilations = parse_list(&text, "dilations")?;
    }
    let defaults = TrainConfig::default();
    let base_train = TrainConfig {
        steps,
        tau: file.resolve(args.tau, "tau", defaults.tau)?,
        learning_rate: file.resolve(args.lr, "lr", defaults.learning_rate)?,
        ..defaults
    };

    let jobs: usize = file.resolve(args.jobs, "jobs", 1)?;
    if jobs == 0 {
        return Err(CliError::Usage("jobs must be >= 1".into()));
    }

    ensure_out_dir(&args.out)?;
    let mut cells = Vec::new();
    for &window in &windows {
        for &batch in &batches {
            for &code in &codes {
                let index = cells.len() as u64;
                cells.push(CellSpec {
                    window,
                    batch,
                    code,
                    seed: seed.wrapping_add(index),
                });
            }
        }
    }

    let cell_rows = |cell: &CellSpec| -> Vec<String> {
        match run_cell(&series, cell, &base_enc, &base_train, stride, theta, &margins) {
            Ok(scores) => scores
                .into_iter()
                .map(|(margin, f1)| {
                    format!("{},{},{},{margin},{f1:.6},ok", cell.window, cell.batch, cell.code)
                })
                .collect(),
            Err(e) => {
                let msg = e.to_string().replace([',', '\n'], ";");
                log::warn!(
                    "cell (w={}, K={}, c={}) failed: {e}",
                    cell.window,
                    cell.batch,
                    cell.code
                );
                vec![format!(
                    "{},{},{},,,error: {msg}",
                    cell.window, cell.batch, cell.code
                )]
            }
        }
    };

    // results collected by cell index, so the table is identical at any
    // worker count
    let mut results: Vec<Option<Vec<String>>> = (0..cells.len()).map(|_| None).collect();
    if jobs == 1 {
        for (slot, cell) in results.iter_mut().zip(&cells) {
            *slot = Some(cell_rows(cell));
        }
    } else {
        let next = AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Vec<String>>>> =
            (0..cells.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(cells.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= cells.len() {
                        break;
                    }
                    let rows = cell_rows(&cells[i]);
                    *slots[i].lock().unwrap() = Some(rows);
                });
            }
        });
        for (slot, cell) in results.iter_mut().zip(slots) {
            *slot = Some(cell.into_inner().unwrap().expect("cell completed"));
        }
    }

    let mut rows = vec!["window,batch,code,margin,f1,status".to_string()];
    for cell_result in results {
        rows.extend(cell_result.expect("all cells ran"));
    }
    let cell_index = cells.len() as u64;
    let mut table = rows.join("\n");
    table.push('\n');
    fs::write(args.out.join("sweep.csv"), &table)
        .map_err(|e| CliError::Io(format!("cannot write sweep.csv: {e}")))?;

    let mut echo = ConfigEcho::new("sweep");
    shared::echo_loader(&mut echo, &loader);
    echo.push("windows", join_list(&windows));
    echo.push("batch_sizes", join_list(&batches));
    echo.push("codes", join_list(&codes));
    echo.push("margins", join_list(&margins));
    echo.push("steps", steps);
    echo.push("seed", seed);
    echo.push("stride", stride);
    echo.push("theta", theta);
    echo.push("filters", base_enc.filters);
    echo.push("stacks", base_enc.stacks);
    echo.push("dilations", join_list(&base_enc.dilations));
    echo.push("tau", base_train.tau);
    echo.push("lr", base_train.learning_rate);
    echo.push("jobs", jobs);
    echo.write(&args.out)?;

    println!(
        "swept {} cells x {} margins into {}",
        cell_index,
        margins.len(),
        args.out.join("sweep.csv").display()
    );
    Ok(())
}
