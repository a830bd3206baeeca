//! End-to-end driver: configuration, datasets, certification runs, curves,
//! reports and ablation sweeps.

pub mod ablation;
pub mod config;
pub mod curve;
pub mod dataset;
pub mod report;
pub mod run;

use std::fmt::Display;
use std::io::Write;

pub use ablation::{ablation_sweep, AblationKind, AblationPoint, Setting};
pub use config::{DatasetConfig, Method, ModelConfig, NoiseConfig, PromptConfig, RunConfig, SynthConfig, ToyModelConfig};
pub use curve::{certified_accuracy_curve, curves_by_sigma, multi_sigma_envelope, CurvePoint};
pub use dataset::{load_manifest, write_dataset, Data, Manifest};
pub use report::{emit_report, table_cell, LabeledCurve, ReportFormat};
pub use run::{read_records, run_certification, CertRecord, Runner};

fn quote(value: &str) -> String {
    if !value.is_empty() && !value.contains(|c: char| c.is_whitespace() || c == '"' || c == '=') {
        value.to_owned()
    } else {
        format!("{value:?}")
    }
}

/// Formats one `event=<name> key=value ...` log line.
pub fn log_line(event: &str, fields: &[(&str, &dyn Display)]) -> String {
    let mut line = format!("event={}", quote(event));
    for (k, v) in fields {
        line.push(' ');
        line.push_str(k);
        line.push('=');
        line.push_str(&quote(&v.to_string()));
    }
    line
}

/// Writes a key=value line to stderr unless `SMOOTHCERT_QUIET` is set.
pub fn log(event: &str, fields: &[(&str, &dyn Display)]) {
    if std::env::var_os("SMOOTHCERT_QUIET").is_some() {
        return;
    }
    let _ = writeln!(std::io::stderr().lock(), "{}", log_line(event, fields));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_values_with_spaces_are_quoted() {
        assert_eq!(
            log_line("run_done", &[("records", &4), ("error", &"bad thing")]),
            "event=run_done records=4 error=\"bad thing\""
        );
    }
}
