use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use serde::Serialize;
use skul_core::{validate_dump, ValidationReport};

use crate::error::{CliError, Result};
use crate::layout::to_json;

#[derive(Serialize)]
struct FileReport {
    path: String,
    clean: bool,
    #[serde(flatten)]
    report: ValidationReport,
}

/// Prints one JSON report per dump; fails if any dump has anomalies.
pub fn run(paths: &[PathBuf]) -> Result<()> {
    let mut dirty = Vec::new();
    let mut reports = Vec::new();
    for path in paths {
        let file = File::open(path).map_err(|e| CliError::io(path, e))?;
        let report = validate_dump(BufReader::new(file)).map_err(|e| CliError::dump(path, e))?;
        if !report.is_clean() {
            dirty.push(format!(
                "{} ({} anomalies)",
                path.display(),
                report.anomalies.len()
            ));
        }
        reports.push(FileReport {
            path: path.display().to_string(),
            clean: report.is_clean(),
            report,
        });
    }
    print!("{}", to_json(&reports));
    if dirty.is_empty() {
        Ok(())
    } else {
        Err(CliError::Anomalies(format!(
            "anomalies found in {}",
            dirty.join(", ")
        )))
    }
}
