//! `cpd eval`: margin-based scoring of estimates against ground truth.

use std::fs;
use std::io::Write as _;

use cpd_core::data::load_labels;
use cpd_core::eval::{report_suite, write_reports_csv};

use crate::args::EvalArgs;
use crate::config::{ensure_out_dir, join_list, parse_list, ConfigEcho, FileConfig};
use crate::error::{CliError, CliResult};

/// Accepts the `index,score` CSV written by detect, or one bare index per
/// line.
fn read_estimate_indices(path: &std::path::Path) -> CliResult<Vec<usize>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if lineno == 0 && line.starts_with("index") {
            continue;
        }
        let first = line.split(',').next().unwrap_or_default();
        let idx: usize = first.parse().map_err(|_| {
            CliError::Io(format!(
                "{} line {}: expected an index, got {line:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        out.push(idx);
    }
    Ok(out)
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let margins: Vec<usize> = match args.margins.clone().or_else(|| file.get_string("margins")) {
        Some(text) => parse_list(&text, "margins")?,
        None => vec![24, 50, 75],
    };
    if margins.is_empty() {
        return Err(CliError::Usage("margins must not be empty".into()));
    }

    let estimates = read_estimate_indices(&args.estimates)?;
    let truth = load_labels(&args.labels)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.labels.display())))?;

    // unsorted/duplicated inputs are malformed files here
    let reports = report_suite(&truth, &estimates, &margins)
        .map_err(|e| CliError::Io(e.to_string()))?;

    let mut stdout = std::io::stdout().lock();
    for report in &reports {
        write!(stdout, "{}", report.to_text()).map_err(CliError::from)?;
        writeln!(stdout).map_err(CliError::from)?;
    }

    ensure_out_dir(&args.out)?;
    let mut buf = Vec::new();
    write_reports_csv(&reports, &mut buf).map_err(CliError::from)?;
    fs::write(args.out.join("report.csv"), buf)
        .map_err(|e| CliError::Io(format!("cannot write report.csv: {e}")))?;

    let mut echo = ConfigEcho::new("eval");
    echo.push("estimates", args.estimates.display());
    echo.push("labels", args.labels.display());
    echo.push("margins", join_list(&margins));
    echo.write(&args.out)?;
    Ok(())
}
