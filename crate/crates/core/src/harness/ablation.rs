//! One-knob sweeps over a base configuration.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toymodel::ContextInit;

use super::config::RunConfig;
use super::curve::{curves_by_sigma, CurvePoint};
use super::report::{emit_report, LabeledCurve, ReportFormat};
use super::run::run_certification;
use super::{log, DatasetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AblationKind {
    Shots,
    ContextTokens,
    OptimizerSteps,
    ContextInit,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "SHOTS" => Ok(AblationKind::Shots),
            "CONTEXT_TOKENS" => Ok(AblationKind::ContextTokens),
            "OPTIMIZER_STEPS" => Ok(AblationKind::OptimizerSteps),
            "CONTEXT_INIT" => Ok(AblationKind::ContextInit),
            _ => Err(Error::config("kind", format!("unknown ablation `{s}`"))),
        }
    }
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Shots => "SHOTS",
            AblationKind::ContextTokens => "CONTEXT_TOKENS",
            AblationKind::OptimizerSteps => "OPTIMIZER_STEPS",
            AblationKind::ContextInit => "CONTEXT_INIT",
        }
    }

    pub fn default_grid(self) -> Vec<Setting> {
        match self {
            AblationKind::Shots => [1, 2, 4, 8, 16].map(Setting::Count).to_vec(),
            AblationKind::ContextTokens => [1, 2, 4, 8, 16].map(Setting::Count).to_vec(),
            AblationKind::OptimizerSteps => [1, 2, 4, 8].map(Setting::Count).to_vec(),
            AblationKind::ContextInit => vec![Setting::Init(ContextInit::Random), Setting::Init(ContextInit::Template)],
        }
    }

    /// Parses one grid entry written on the command line.
    pub fn parse_setting(self, s: &str) -> Result<Setting> {
        match self {
            AblationKind::ContextInit => serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase()))
                .map(Setting::Init)
                .map_err(|_| Error::config("grid", format!("unknown context init `{s}`"))),
            _ => s
                .parse()
                .map(Setting::Count)
                .map_err(|_| Error::config("grid", format!("`{s}` is not a count"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Setting {
    Count(usize),
    Init(ContextInit),
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Setting::Count(n) => write!(f, "{n}"),
            Setting::Init(i) => write!(f, "{i}"),
        }
    }
}

/// `base` with one knob turned.
pub fn apply(base: &RunConfig, kind: AblationKind, setting: Setting) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match (kind, setting) {
        (AblationKind::Shots, Setting::Count(n)) => {
            cfg.few_shot.shots_per_class = n;
            if let DatasetConfig::Synthetic(s) = &mut cfg.dataset {
                s.train_per_class = s.train_per_class.max(n);
            }
        }
        (AblationKind::ContextTokens, Setting::Count(n)) => cfg.prompt.context_tokens = n,
        (AblationKind::OptimizerSteps, Setting::Count(n)) => cfg.zero_shot.steps = n,
        (AblationKind::ContextInit, Setting::Init(init)) => {
            if cfg.method.adapts() && !cfg.method.needs_few_shot() {
                cfg.prompt.zero_shot_init = init;
            } else {
                cfg.prompt.few_shot_init = init;
            }
        }
        _ => {
            return Err(Error::config(
                "grid",
                format!("setting {setting} does not fit ablation {}", kind.name()),
            ))
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationPoint {
    pub setting: Setting,
    pub envelope: Vec<CurvePoint>,
    /// Mean entropy of the averaged noisy prediction over certified samples;
    /// `None` for non-toy models.
    pub mean_entropy: Option<f64>,
}

/// Runs the pipeline once per setting. With `out`, each setting's records
/// live in `out/<KIND>_<setting>/` and its envelope in
/// `out/<KIND>_<setting>.csv`; `out/<KIND>_summary.csv` collects all of them.
pub fn ablation_sweep(
    base: &RunConfig,
    kind: AblationKind,
    grid: &[Setting],
    out: Option<&Path>,
) -> Result<Vec<AblationPoint>> {
    if grid.is_empty() {
        return Err(Error::config("grid", "must not be empty"));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &setting in grid {
        let cfg = apply(base, kind, setting)?;
        let label = format!("{}_{setting}", kind.name());
        log("ablation_setting", &[("kind", &kind.name()), ("setting", &setting)]);
        let records = run_certification(&cfg, out.map(|o| o.join(&label)).as_deref())?;
        let (_, envelope) = curves_by_sigma(&records, &cfg.noise.sigmas, &cfg.radii)?;
        let entropies: Vec<f64> = records
            .iter()
            .filter(|r| r.sigma_index == 0)
            .filter_map(|r| r.entropy)
            .collect();
        let mean_entropy = (!entropies.is_empty()).then(|| entropies.iter().sum::<f64>() / entropies.len() as f64);
        if let Some(dir) = out {
            let curve = LabeledCurve {
                method: format!("{} {label}", cfg.method),
                points: envelope.clone(),
            };
            emit_report(&[curve], ReportFormat::Csv, &dir.join(format!("{label}.csv")))?;
        }
        points.push(AblationPoint {
            setting,
            envelope,
            mean_entropy,
        });
    }
    if let Some(dir) = out {
        let path = dir.join(format!("{}_summary.csv", kind.name()));
        std::fs::write(&path, summary_csv(kind, &points)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(points)
}

pub fn summary_csv(kind: AblationKind, points: &[AblationPoint]) -> String {
    let mut out = String::from("kind,setting,radius,sigma_used,certified_acc,clean_acc,mean_entropy\n");
    for p in points {
        let entropy = p.mean_entropy.map(|e| e.to_string()).unwrap_or_default();
        for c in &p.envelope {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                kind.name(),
                p.setting,
                c.radius,
                c.sigma_used,
                c.certified_accuracy,
                c.clean_accuracy,
                entropy
            )
            .unwrap();
        }
    }
    out
}
