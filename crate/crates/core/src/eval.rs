//! Margin-based change-point evaluation: greedy closest-first matching of
//! estimates to ground truth, then precision/recall/F1.
//!
//! An estimate within the margin of a truth point counts as a true positive
//! only if it is the one matched to it; leftover estimates are false
//! positives even when they also sit within the margin of an already-matched
//! truth. Unmatched truths are false negatives.

use std::io::Write;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchedPair {
    pub truth: usize,
    pub estimate: usize,
    pub distance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub margin: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matches: Vec<MatchedPair>,
}

impl EvalReport {
    /// Key/value text block, one metric per line.
    pub fn to_text(&self) -> String {
        format!(
            "margin: {}\ntp: {}\nfp: {}\nfn: {}\nprecision: {:.4}\nrecall: {:.4}\nf1: {:.4}\n",
            self.margin,
            self.true_positives,
            self.false_positives,
            self.false_negatives,
            self.precision,
            self.recall,
            self.f1
        )
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6}",
            self.margin,
            self.true_positives,
            self.false_positives,
            self.false_negatives,
            self.precision,
            self.recall,
            self.f1
        )
    }
}

pub const REPORT_CSV_HEADER: &str = "margin,tp,fp,fn,precision,recall,f1";

pub fn write_reports_csv<W: Write>(reports: &[EvalReport], mut out: W) -> Result<()> {
    writeln!(out, "{REPORT_CSV_HEADER}")?;
    for r in reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

fn check_sorted_unique(name: &str, indices: &[usize]) -> Result<()> {
    for pair in indices.windows(2) {
        if pair[0] >= pair[1] {
            return Err(Error::invalid(format!(
                "{name} indices must be sorted and duplicate-free (saw {} then {})",
                pair[0], pair[1]
            )));
        }
    }
    Ok(())
}

/// Match estimates to ground truth within `margin` samples: candidate pairs
/// are accepted greedily in ascending distance (ties: smaller truth index,
/// then smaller estimate index), each side usable once.
pub fn match_and_score(truth: &[usize], estimates: &[usize], margin: usize) -> Result<EvalReport> {
    check_sorted_unique("truth", truth)?;
    check_sorted_unique("estimate", estimates)?;

    let mut candidates: Vec<(usize, usize, usize)> = Vec::new(); // (distance, ti, ei)
    for (ti, &t) in truth.iter().enumerate() {
        for (ei, &e) in estimates.iter().enumerate() {
            let d = t.abs_diff(e);
            if d <= margin {
                candidates.push((d, ti, ei));
            }
        }
    }
    candidates.sort_unstable();

    let mut truth_used = vec![false; truth.len()];
    let mut est_used = vec![false; estimates.len()];
    let mut matches = Vec::new();
    for (d, ti, ei) in candidates {
        if !truth_used[ti] && !est_used[ei] {
            truth_used[ti] = true;
            est_used[ei] = true;
            matches.push(MatchedPair {
                truth: truth[ti],
                estimate: estimates[ei],
                distance: d,
            });
        }
    }

    let tp = matches.len();
    let fp = estimates.len() - tp;
    let fn_count = truth.len() - tp;
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_count == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_count) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(EvalReport {
        margin,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_count,
        precision,
        recall,
        f1,
        matches,
    })
}

/// One independent report per margin.
pub fn report_suite(
    truth: &[usize],
    estimates: &[usize],
    margins: &[usize],
) -> Result<Vec<EvalReport>> {
    margins
        .iter()
        .map(|&m| match_and_score(truth, estimates, m))
        .collect()
}
