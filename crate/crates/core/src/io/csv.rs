//! CSV reports. Numbers are formatted by Rust's `Display`, which is
//! locale-independent; lines end in `\n`; files are replaced atomically.

use std::fmt::Write as _;
use std::path::Path;

use super::igt1::write_atomic;
use crate::allocator::WeightVector;
use crate::error::{Error, Result};
use crate::training::{Comparison, TrainReport};

/// Column labels of the four visual groups, from shallow to deep.
pub const GROUP_LABELS: [&str; 4] = ["low", "low-to-mid", "mid-to-high", "high"];

/// Weight-table column labels: [`GROUP_LABELS`] for four groups, `g1..gK`
/// otherwise.
pub fn group_labels(groups: usize) -> Vec<String> {
    if groups == GROUP_LABELS.len() {
        GROUP_LABELS.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=groups).map(|i| format!("g{i}")).collect()
    }
}

/// `step,loss,entropy`, one row per training step, full precision.
pub fn loss_trace_csv(report: &TrainReport) -> String {
    let mut out = String::from("step,loss,entropy\n");
    for (i, (l, e)) in report.loss_trace.iter().zip(&report.entropy_trace).enumerate() {
        writeln!(out, "{i},{l},{e}").expect("writing to a String");
    }
    out
}

/// `step,loss` for a run that stopped early.
pub fn partial_trace_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{i},{l}").expect("writing to a String");
    }
    out
}

/// One row per cluster with weights at six decimals.
pub fn weight_table_csv(rows: &[WeightVector], labels: &[String]) -> Result<String> {
    let mut out = String::from("cluster");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (c, w) in rows.iter().enumerate() {
        if w.len() != labels.len() {
            return Err(Error::Report(format!(
                "row {c} has {} weights for {} columns",
                w.len(),
                labels.len()
            )));
        }
        out.push_str(&c.to_string());
        for v in w.as_slice() {
            write!(out, ",{v:.6}").expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

/// `config,heldout_loss`, one row per comparison entry.
pub fn comparison_csv(rows: &[Comparison]) -> String {
    let mut out = String::from("config,heldout_loss\n");
    for r in rows {
        writeln!(out, "{},{}", r.label, r.loss).expect("writing to a String");
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    write_atomic(path.as_ref(), text.as_bytes())
}
