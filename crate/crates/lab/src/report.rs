//! Cross-run comparison tables built from persisted evaluation reports.

use serde::{Deserialize, Serialize};

use sdgod_core::eval::MpcReport;

use crate::{LabError, Result};

/// One evaluated run, reduced to the numbers the comparison tables need.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub mode: String,
    pub clean_map: f64,
    pub mpc: f64,
    pub corruption_names: Vec<String>,
    /// Severity-averaged mAP per corruption, same order as the names.
    pub per_corruption: Vec<f64>,
}

impl RunSummary {
    pub fn from_report(name: &str, mode: &str, report: &MpcReport) -> Result<Self> {
        Ok(RunSummary {
            name: name.to_string(),
            mode: mode.to_string(),
            clean_map: report.clean_map,
            mpc: report.mpc()?,
            corruption_names: report.corruption_names.clone(),
            per_corruption: report.severity_averaged(),
        })
    }
}

fn check_alignment(runs: &[RunSummary]) -> Result<()> {
    if runs.is_empty() {
        return Err(LabError::Config("no runs to compare".into()));
    }
    for r in &runs[1..] {
        if r.corruption_names != runs[0].corruption_names {
            return Err(LabError::Config(format!(
                "run {} was evaluated on a different corruption set than {}",
                r.name, runs[0].name
            )));
        }
    }
    Ok(())
}

/// Headline comparison, one row per run; deltas are against the first
/// (reference) row.
pub fn comparison_csv(runs: &[RunSummary]) -> Result<String> {
    check_alignment(runs)?;
    let base = &runs[0];
    let mut out = String::from("run,mode,clean_map,mpc,delta_clean,delta_mpc\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{:.2},{:.2},{:+.2},{:+.2}\n",
            r.name,
            r.mode,
            r.clean_map,
            r.mpc,
            r.clean_map - base.clean_map,
            r.mpc - base.mpc,
        ));
    }
    Ok(out)
}

/// Same comparison as a markdown table.
pub fn comparison_markdown(runs: &[RunSummary]) -> Result<String> {
    check_alignment(runs)?;
    let base = &runs[0];
    let mut out = String::from("| run | mode | clean mAP | mPC | delta mPC |\n");
    out.push_str("|---|---|---|---|---|\n");
    for r in runs {
        out.push_str(&format!(
            "| {} | {} | {:.2} | {:.2} | {:+.2} |\n",
            r.name,
            r.mode,
            r.clean_map,
            r.mpc,
            r.mpc - base.mpc,
        ));
    }
    Ok(out)
}

/// Per-corruption breakdown: one row per corruption, one column per run,
/// severity-averaged values, trailing mPC row.
pub fn per_corruption_csv(runs: &[RunSummary]) -> Result<String> {
    check_alignment(runs)?;
    let mut out = String::from("corruption");
    for r in runs {
        out.push_str(&format!(",{}", r.name));
    }
    out.push('\n');
    for (i, c) in runs[0].corruption_names.iter().enumerate() {
        out.push_str(c);
        for r in runs {
            out.push_str(&format!(",{:.2}", r.per_corruption[i]));
        }
        out.push('\n');
    }
    out.push_str("mPC");
    for r in runs {
        out.push_str(&format!(",{:.2}", r.mpc));
    }
    out.push('\n');
    Ok(out)
}
