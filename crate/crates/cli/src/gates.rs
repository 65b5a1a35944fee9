//! Oracle gates: experiments refuse to run until the oracle suite passes,
//! unless explicitly overridden.

use std::path::Path;

use anyhow::bail;

use fedlab_core::oracle::{run_gate_suite, OracleReport};

pub const GATE_SEED: u64 = 0x0fed_1ab5;

/// Runs the oracle suite, optionally writing the line-delimited reports.
pub fn run_gates(report_path: Option<&Path>) -> anyhow::Result<Vec<OracleReport>> {
    let reports = run_gate_suite(GATE_SEED).map_err(|e| anyhow::anyhow!("{e}"))?;
    if let Some(path) = report_path {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let text: String = reports.iter().map(|r| r.line() + "\n").collect();
        std::fs::write(path, text)?;
    }
    Ok(reports)
}

/// Fails with the list of failing oracles.
pub fn enforce_gates(report_path: Option<&Path>) -> anyhow::Result<Vec<OracleReport>> {
    let reports = run_gates(report_path)?;
    let failing: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.check.as_str()).collect();
    if !failing.is_empty() {
        bail!(
            "oracle gates failed: {}; rerun with --override-gates to proceed anyway",
            failing.join(", ")
        );
    }
    Ok(reports)
}
