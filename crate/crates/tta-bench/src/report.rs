//! Aggregation of multiple run reports into a comparison table.

use crate::error::{BenchError, Result};
use std::fs;
use std::path::{Path, PathBuf};
use tta_core::RunReport;

#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub run: String,
    pub method: String,
    pub scenario: String,
    pub seed: u64,
    pub accuracy: f64,
    pub ece: f64,
    pub mean_confidence: f64,
    pub forwards: u64,
    pub backwards: u64,
    pub selected: usize,
    pub final_clean_accuracy: Option<f64>,
    /// Accuracy minus the first (baseline) run's accuracy.
    pub accuracy_delta: f64,
}

/// Accept either a run directory or a direct path to its report file.
fn report_file(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join("report.json")
    } else {
        input.to_path_buf()
    }
}

pub fn load_reports(inputs: &[PathBuf]) -> Result<Vec<(String, RunReport)>> {
    if inputs.is_empty() {
        return Err(BenchError::config("report: need at least one input run"));
    }
    let mut out = Vec::new();
    for input in inputs {
        let path = report_file(input);
        let file = fs::File::open(&path).map_err(|e| {
            BenchError::config(format!("report input {}: {e}", path.display()))
        })?;
        let report = RunReport::from_json_reader(file).map_err(BenchError::Core)?;
        let name = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| input.display().to_string());
        let name = if name == "report" {
            input
                .parent()
                .and_then(|p| p.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or(name)
        } else {
            name
        };
        out.push((name, report));
    }
    Ok(out)
}

/// The first input is the baseline for the accuracy-delta column.
pub fn compare(reports: &[(String, RunReport)]) -> Vec<ComparisonRow> {
    let baseline = reports
        .first()
        .map(|(_, r)| r.aggregate.accuracy)
        .unwrap_or(0.0);
    reports
        .iter()
        .map(|(name, r)| ComparisonRow {
            run: name.clone(),
            method: r.method.clone(),
            scenario: r.scenario.clone(),
            seed: r.seed,
            accuracy: r.aggregate.accuracy,
            ece: r.aggregate.ece,
            mean_confidence: r.aggregate.mean_confidence,
            forwards: r.aggregate.total_forwards,
            backwards: r.aggregate.total_backwards,
            selected: r.aggregate.total_selected,
            final_clean_accuracy: r.trajectory.last().map(|p| p.clean_accuracy),
            accuracy_delta: r.aggregate.accuracy - baseline,
        })
        .collect()
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(
        "run,method,scenario,seed,accuracy,ece,mean_confidence,forwards,backwards,\
         selected,final_clean_accuracy,accuracy_delta\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{},{},{},{},{:.6}\n",
            r.run,
            r.method,
            r.scenario,
            r.seed,
            r.accuracy,
            r.ece,
            r.mean_confidence,
            r.forwards,
            r.backwards,
            r.selected,
            r.final_clean_accuracy
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default(),
            r.accuracy_delta,
        ));
    }
    out
}
