use std::fs;
use std::path::Path;

use super::{AttributionResult, PipelineError};

/// Version tag written into every exported report.
pub const SCHEMA_VERSION: &str = "1";

/// Pretty-printed JSON for `result`, newline-terminated.
pub fn report_json(result: &AttributionResult) -> String {
    let mut text = serde_json::to_string_pretty(result).expect("report serializes");
    text.push('\n');
    text
}

pub fn export_report(result: &AttributionResult, out: impl AsRef<Path>) -> Result<(), PipelineError> {
    let out = out.as_ref();
    fs::write(out, report_json(result)).map_err(|e| PipelineError::FileWrite {
        path: out.display().to_string(),
        message: e.to_string(),
    })
}

pub fn import_report(path: impl AsRef<Path>) -> Result<AttributionResult, PipelineError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::Report(format!("cannot read {}: {e}", path.display())))?;
    let result: AttributionResult =
        serde_json::from_str(&text).map_err(|e| PipelineError::Report(e.to_string()))?;
    if result.schema_version != SCHEMA_VERSION {
        return Err(PipelineError::Report(format!(
            "unsupported schema_version {:?}",
            result.schema_version
        )));
    }
    if result.coefficients.len() != result.tokens.len()
        || result.normalized_scores.len() != result.tokens.len()
    {
        return Err(PipelineError::Report("token and score counts differ".into()));
    }
    Ok(result)
}
