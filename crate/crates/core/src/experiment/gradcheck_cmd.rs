//! The gradient-check command.

use std::path::Path;

use crate::gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport, Term};
use crate::volume_io::write_atomic;

use super::ExperimentError;

pub const GRADCHECK_JSON: &str = "gradcheck.json";

/// Run the finite-difference suites and optionally save the report.
pub fn gradcheck_cmd(
    opts: &GradcheckOptions,
    terms: &[Term],
    out: Option<&Path>,
) -> Result<GradcheckReport, ExperimentError> {
    let report = run_gradcheck(opts, terms);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(&report)?;
        write_atomic(&dir.join(GRADCHECK_JSON), text.as_bytes())?;
    }
    Ok(report)
}

/// An assertion error naming every failing term.
pub fn ensure_gradients_pass(report: &GradcheckReport) -> Result<(), ExperimentError> {
    let failed = report.failed_terms();
    if failed.is_empty() {
        return Ok(());
    }
    let names: Vec<&str> = failed.iter().map(|t| t.name()).collect();
    Err(ExperimentError::Assertion(format!(
        "gradient check failed for: {}",
        names.join(", ")
    )))
}
