//! Curve reports as CSV, JSON or a text table with `(clean)certified` cells.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::curve::CurvePoint;

pub const TABLE_CAPTION: &str = "Certified Accuracy at ℓ2 radius (%)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING-KEBAB-CASE")]
pub enum ReportFormat {
    Csv,
    Json,
    TextTable,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "text-table" | "text" | "table" => Ok(ReportFormat::TextTable),
            _ => Err(Error::config("format", format!("unknown report format `{s}`"))),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::TextTable => "txt",
        }
    }
}

/// One labeled curve, usually a method's envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCurve {
    pub method: String,
    pub points: Vec<CurvePoint>,
}

/// `(clean)certified` in percent with one decimal, e.g. `(73.8)73.8`.
pub fn table_cell(clean: f64, certified: f64) -> String {
    format!("({:.1}){:.1}", clean * 100.0, certified * 100.0)
}

pub fn to_csv(curves: &[LabeledCurve]) -> String {
    let mut out = String::from("method,sigma_used,radius,certified_acc,clean_acc\n");
    for c in curves {
        for p in &c.points {
            writeln!(
                out,
                "{},{},{},{},{}",
                c.method, p.sigma_used, p.radius, p.certified_accuracy, p.clean_accuracy
            )
            .unwrap();
        }
    }
    out
}

pub fn to_json(curves: &[LabeledCurve]) -> String {
    serde_json::to_string_pretty(curves).expect("curves serialize") + "\n"
}

pub fn from_json(text: &str) -> Result<Vec<LabeledCurve>> {
    serde_json::from_str(text).map_err(|e| Error::Format {
        path: "<json report>".into(),
        message: e.to_string(),
    })
}

/// Methods as rows, radii as columns, each cell `(clean)certified`.
pub fn to_text_table(curves: &[LabeledCurve]) -> String {
    let radii: Vec<String> = curves
        .first()
        .map(|c| c.points.iter().map(|p| p.radius.to_string()).collect())
        .unwrap_or_default();
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("Method".to_owned()).chain(radii).collect()];
    for c in curves {
        rows.push(
            std::iter::once(c.method.clone())
                .chain(c.points.iter().map(|p| table_cell(p.clean_accuracy, p.certified_accuracy)))
                .collect(),
        );
    }
    let columns = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..columns)
        .map(|j| rows.iter().filter_map(|r| r.get(j)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = format!("{TABLE_CAPTION}\n");
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, s)| format!("{s:<w$}", w = widths[j]))
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&rule.join("-|-"));
            out.push('\n');
        }
    }
    out
}

pub fn render(curves: &[LabeledCurve], format: ReportFormat) -> Result<String> {
    if curves.is_empty() || curves.iter().any(|c| c.points.is_empty()) {
        return Err(Error::domain("nothing to report"));
    }
    Ok(match format {
        ReportFormat::Csv => to_csv(curves),
        ReportFormat::Json => to_json(curves),
        ReportFormat::TextTable => to_text_table(curves),
    })
}

pub fn emit_report(curves: &[LabeledCurve], format: ReportFormat, path: &Path) -> Result<()> {
    let text = render(curves, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
