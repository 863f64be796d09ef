//! The machine-readable report emitted by `simulate` and consumed by
//! `report`. Serialization is deterministic: struct fields in declaration
//! order, maps ordered, floats via shortest round-trip formatting, no
//! wall-clock metadata.

use serde::{Deserialize, Serialize};

use nsl_core::sim::{summarize, MeasureSummary, RepRecord};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub tool_version: String,
    pub seed: u64,
    /// The fully resolved configuration the run used.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub metadata: ReportMetadata,
    pub summary: MeasureSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub records: Option<Vec<RepRecord>>,
    pub diagnostics: std::collections::BTreeMap<String, f64>,
}

impl Report {
    pub fn to_json(&self) -> Result<String, CliError> {
        serde_json::to_string_pretty(self)
            .map_err(|e| CliError::input(format!("cannot serialize report: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::input(format!("malformed report: {e}")))
    }

    /// Re-aggregates the stored records and checks they reproduce the
    /// stored summary exactly.
    pub fn verify(&self) -> Result<(), CliError> {
        let records = match &self.records {
            Some(r) => r,
            None => return Ok(()),
        };
        let rebuilt = summarize(
            records,
            self.summary.reps_requested,
            self.summary.failures.clone(),
        );
        let a = serde_json::to_string(&rebuilt)
            .map_err(|e| CliError::input(format!("cannot serialize summary: {e}")))?;
        let b = serde_json::to_string(&self.summary)
            .map_err(|e| CliError::input(format!("cannot serialize summary: {e}")))?;
        if a != b {
            return Err(CliError::input(
                "stored records do not reproduce the stored summary",
            ));
        }
        Ok(())
    }
}

/// Renders the summary as an aligned text table, one row per
/// (method, model) pair.
pub fn format_summary(summary: &MeasureSummary) -> String {
    let mut measures: Vec<String> = Vec::new();
    for row in &summary.rows {
        for name in row.stats.keys() {
            if !measures.contains(name) {
                measures.push(name.clone());
            }
        }
    }
    let mut out = String::new();
    out.push_str(&format!(
        "replications: {} completed of {} requested\n",
        summary.reps_completed, summary.reps_requested
    ));
    for failure in &summary.failures {
        out.push_str(&format!("failure: {failure}\n"));
    }
    out.push_str(&format!("{:<18}", "method/model"));
    for m in &measures {
        out.push_str(&format!("{m:>18}"));
    }
    out.push('\n');
    for row in &summary.rows {
        out.push_str(&format!("{:<18}", format!("{}/{}", row.method, row.model)));
        for m in &measures {
            match row.stats.get(m) {
                Some(stat) => {
                    out.push_str(&format!("{:>18}", format!("{:.3} ({:.3})", stat.mean, stat.sd)))
                }
                None => out.push_str(&format!("{:>18}", "-")),
            }
        }
        out.push('\n');
    }
    out
}
