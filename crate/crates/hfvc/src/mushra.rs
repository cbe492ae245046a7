//! MUSHRA response tables: CSV input, TSV summary and JSON test outcomes.

use std::fmt::Write as _;

use hfvc_core::stats::{aggregate, filter_intensity, mushra_compare, Comparison, GroupBy, MushraResponse, SummaryRow};
use hfvc_core::synthdata::IntensityLevel;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CSV_HEADER: [&str; 5] = ["listener_id", "system", "utterance_id", "intensity", "score"];
pub const SUMMARY_HEADER: &str = "system\tintensity\tn\tmean\tmedian\tq1\tq3\tmin\tmax";

/// Parses a response table. Errors name the 1-based line of the bad row.
pub fn parse_csv(text: &str) -> CliResult<Vec<MushraResponse>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| CliError::input(format!("line 1: {e}")))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(CliError::input(format!(
            "line 1: header must be `{}`",
            CSV_HEADER.join(",")
        )));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::input(format!("line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |msg: String| CliError::input(format!("line {line}: {msg}"));
        let intensity: IntensityLevel = record[3].parse().map_err(|e| bad(format!("{e}")))?;
        let score: f64 = record[4]
            .parse()
            .map_err(|_| bad(format!("score `{}` is not a number", &record[4])))?;
        let r = MushraResponse::new(&record[0], &record[1], &record[2], intensity, score)
            .map_err(|e| bad(e.to_string()))?;
        out.push(r);
    }
    if out.is_empty() {
        return Err(CliError::input("response table has no rows"));
    }
    Ok(out)
}

/// Rows per (system, intensity), then per system over all intensities.
pub fn summary_tsv(responses: &[MushraResponse]) -> CliResult<String> {
    let mut rows = aggregate(responses, GroupBy::SystemIntensity)?;
    rows.extend(aggregate(responses, GroupBy::System)?);
    let mut out = format!("{SUMMARY_HEADER}\n");
    for SummaryRow {
        system,
        intensity,
        n,
        mean,
        median,
        q1,
        q3,
        min,
        max,
    } in &rows
    {
        let level = intensity.map_or("all", |l| l.as_str());
        writeln!(
            out,
            "{system}\t{level}\t{n}\t{mean}\t{median}\t{q1}\t{q3}\t{min}\t{max}"
        )
        .expect("string write");
    }
    Ok(out)
}

/// Holm family: every system pair within one intensity slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub intensity: IntensityLevel,
    #[serde(flatten)]
    pub comparison: Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub question: String,
    pub paired: bool,
    pub families: Vec<Family>,
}

pub fn compare(responses: &[MushraResponse], question: &str, alpha: f64) -> CliResult<TestReport> {
    let mut families = Vec::new();
    for level in IntensityLevel::ALL {
        let slice = filter_intensity(responses, level);
        if slice.is_empty() {
            continue;
        }
        families.push(Family {
            intensity: level,
            comparison: mushra_compare(&slice, alpha)?,
        });
    }
    Ok(TestReport {
        question: question.to_string(),
        paired: true,
        families,
    })
}
