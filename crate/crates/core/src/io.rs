//! Versioned JSON documents for problems, batches and solve reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DrgpError, Result};
use crate::neuro::SolveReport;
use crate::reformulate::RobustGP;

/// Version carried by every problem, report and table file.
pub const SCHEMA_VERSION: u32 = 1;

/// A problem file: the fields of [`RobustGP`] plus `schema_version`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub schema_version: u32,
    #[serde(flatten)]
    pub problem: RobustGP,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFile {
    pub schema_version: u32,
    pub problems: Vec<RobustGP>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub schema_version: u32,
    #[serde(flatten)]
    pub report: SolveReport,
}

/// One entry of a batch result: a report or the error that stopped the instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchEntry {
    Solved(SolveReport),
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReportFile {
    pub schema_version: u32,
    pub reports: Vec<BatchEntry>,
}

fn check_version(found: u32) -> Result<()> {
    if found == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(DrgpError::Parse(format!(
            "unsupported schema_version {found}, expected {SCHEMA_VERSION}"
        )))
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| DrgpError::Io(format!("{}: {e}", path.display())))
}

/// Parses and validates a problem document.
pub fn parse_problem(text: &str) -> Result<RobustGP> {
    let file: ProblemFile = serde_json::from_str(text)?;
    check_version(file.schema_version)?;
    file.problem.validate()?;
    Ok(file.problem)
}

pub fn read_problem(path: &Path) -> Result<RobustGP> {
    parse_problem(&read_to_string(path)?)
}

pub fn problem_to_json(p: &RobustGP) -> Result<String> {
    let file = ProblemFile {
        schema_version: SCHEMA_VERSION,
        problem: p.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn parse_batch(text: &str) -> Result<Vec<RobustGP>> {
    let file: BatchFile = serde_json::from_str(text)?;
    check_version(file.schema_version)?;
    if file.problems.is_empty() {
        return Err(DrgpError::InvalidModel("batch holds no problems".into()));
    }
    for (i, p) in file.problems.iter().enumerate() {
        p.validate()
            .map_err(|e| DrgpError::InvalidModel(format!("batch problem {i}: {e}")))?;
    }
    Ok(file.problems)
}

pub fn read_batch(path: &Path) -> Result<Vec<RobustGP>> {
    parse_batch(&read_to_string(path)?)
}

pub fn batch_to_json(problems: &[RobustGP]) -> Result<String> {
    let file = BatchFile {
        schema_version: SCHEMA_VERSION,
        problems: problems.to_vec(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn parse_solution(text: &str) -> Result<SolveReport> {
    let file: SolutionFile = serde_json::from_str(text)?;
    check_version(file.schema_version)?;
    Ok(file.report)
}

pub fn read_solution(path: &Path) -> Result<SolveReport> {
    parse_solution(&read_to_string(path)?)
}

pub fn solution_to_json(report: &SolveReport) -> Result<String> {
    let file = SolutionFile {
        schema_version: SCHEMA_VERSION,
        report: report.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn batch_reports_to_json(results: &[Result<SolveReport>]) -> Result<String> {
    let reports = results
        .iter()
        .map(|r| match r {
            Ok(rep) => BatchEntry::Solved(rep.clone()),
            Err(e) => BatchEntry::Failed { error: e.to_string() },
        })
        .collect();
    Ok(serde_json::to_string_pretty(&BatchReportFile {
        schema_version: SCHEMA_VERSION,
        reports,
    })?)
}
