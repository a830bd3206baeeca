//! Run configuration, read from TOML or JSON with one schema.
//!
//! ```toml
//! seed = 7
//! workers = 4
//! method = "COMBINED"            # NO_PL | FEW_SHOT | ZERO_SHOT | COMBINED
//! radii = [0.1, 0.25, 0.5]
//!
//! [dataset]
//! kind = "synthetic"             # or: kind = "manifest", path = "data/manifest.json"
//! test_per_class = 125
//!
//! [model]
//! kind = "toy"                   # or "external" / "linear"
//! domain_shift = -0.3
//!
//! [noise]
//! sigmas = [0.25]
//! n = 10000
//! ```
//!
//! Every table and most fields are optional; see the `Default` impls.
//! Unknown fields are rejected, and errors name the offending field path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extproto::ExternalSpec;
use crate::promptlearn::{FewShotConfig, ZeroShotConfig};
use crate::smoothing::NOISE_BLOCK;
use crate::stats::ConfidenceLevel;
use crate::toymodel::ContextInit;

pub fn default_radii() -> Vec<f64> {
    vec![0.1, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5]
}

/// Which prompts the toy head uses when certifying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    /// The hand-crafted template, no learning.
    #[default]
    NoPl,
    /// Prompts tuned on noisy labeled shots.
    FewShot,
    /// Per-image entropy minimization from the hand-crafted prompt.
    ZeroShot,
    /// Per-image entropy minimization from the few-shot prompts.
    Combined,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::NoPl, Method::FewShot, Method::ZeroShot, Method::Combined];

    pub fn name(self) -> &'static str {
        match self {
            Method::NoPl => "NO_PL",
            Method::FewShot => "FEW_SHOT",
            Method::ZeroShot => "ZERO_SHOT",
            Method::Combined => "COMBINED",
        }
    }

    pub fn needs_few_shot(self) -> bool {
        matches!(self, Method::FewShot | Method::Combined)
    }

    pub fn adapts(self) -> bool {
        matches!(self, Method::ZeroShot | Method::Combined)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

/// Synthetic benchmark data generated in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            input_dim: 64,
            train_per_class: 16,
            test_per_class: 125,
            separation: 2.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SynthConfig),
    /// A dataset manifest (JSON); relative paths inside it resolve against
    /// the manifest's directory.
    Manifest { path: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SynthConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    /// A saved model directory. Without it the model is built from the
    /// synthetic dataset's class means.
    pub path: Option<PathBuf>,
    pub init_seed: u64,
    pub domain_shift: f64,
    pub embed_dim: usize,
    pub token_dim: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            path: None,
            init_seed: 1,
            domain_shift: -0.3,
            embed_dim: 16,
            token_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Toy(ToyModelConfig),
    /// A child process speaking the external protocol. Only `NO_PL` applies.
    External(ExternalSpec),
    /// `argmax(W x + b)` from containers. Only `NO_PL` applies.
    Linear { weights: PathBuf, bias: Option<PathBuf> },
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Toy(ToyModelConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub context_tokens: usize,
    pub few_shot_init: ContextInit,
    pub zero_shot_init: ContextInit,
    /// Previously trained few-shot prompts; training is skipped when set.
    pub few_shot_prompts: Option<PathBuf>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            context_tokens: 5,
            few_shot_init: ContextInit::Random,
            zero_shot_init: ContextInit::HandCrafted,
            few_shot_prompts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigmas: Vec<f64>,
    pub n0: u64,
    pub n: u64,
    pub alpha: f64,
    pub batch_size: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigmas: vec![0.1, 0.25, 0.5, 1.0],
            n0: 100,
            n: 10_000,
            alpha: 0.001,
            batch_size: NOISE_BLOCK,
        }
    }
}

/// Everything one certification run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; defaults to the available parallelism.
    pub workers: Option<usize>,
    pub method: Method,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub prompt: PromptConfig,
    pub few_shot: FewShotConfig,
    pub zero_shot: ZeroShotConfig,
    pub noise: NoiseConfig,
    pub radii: Vec<f64>,
    /// Certify a seeded subset of this many test samples.
    pub max_samples: Option<usize>,
    /// Record wall-clock time per record; off makes record files reproducible
    /// byte for byte.
    pub record_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: None,
            method: Method::NoPl,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            prompt: PromptConfig::default(),
            few_shot: FewShotConfig::default(),
            zero_shot: ZeroShotConfig::default(),
            noise: NoiseConfig::default(),
            radii: default_radii(),
            max_samples: None,
            record_timing: true,
        }
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(path, format!("must be positive and finite, got {v}")))
    }
}

fn prefixed(prefix: &str, err: Error) -> Error {
    match err {
        Error::Config { path, message } => Error::config(format!("{prefix}.{path}"), message),
        other => other,
    }
}

impl RunConfig {
    /// Reads a `.toml` or `.json` file; other extensions are tried as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg = if is_json {
            RunConfig::from_json(&text)?
        } else {
            RunConfig::from_toml(&text)?
        };
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value =
            toml::from_str(text).map_err(|e| Error::config("<toml>", e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(value)
            .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == Some(0) {
            return Err(Error::config("workers", "must be at least 1"));
        }
        if self.noise.sigmas.is_empty() {
            return Err(Error::config("noise.sigmas", "must not be empty"));
        }
        for (i, &s) in self.noise.sigmas.iter().enumerate() {
            positive(&format!("noise.sigmas[{i}]"), s)?;
        }
        if self.noise.n0 == 0 {
            return Err(Error::config("noise.n0", "must be at least 1"));
        }
        if self.noise.n == 0 {
            return Err(Error::config("noise.n", "must be at least 1"));
        }
        if self.noise.batch_size == 0 {
            return Err(Error::config("noise.batch_size", "must be at least 1"));
        }
        ConfidenceLevel::new(self.noise.alpha)
            .map_err(|_| Error::config("noise.alpha", format!("must lie in (0, 1), got {}", self.noise.alpha)))?;
        if self.radii.is_empty() {
            return Err(Error::config("radii", "must not be empty"));
        }
        if let Some(i) = self.radii.iter().position(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::config(format!("radii[{i}]"), "must be finite and non-negative"));
        }
        if self.radii.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("radii", "must be strictly increasing"));
        }
        if self.prompt.context_tokens == 0 {
            return Err(Error::config("prompt.context_tokens", "must be at least 1"));
        }
        self.few_shot.validate().map_err(|e| prefixed("few_shot", e))?;
        self.zero_shot.validate().map_err(|e| prefixed("zero_shot", e))?;
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            if s.num_classes < 2 {
                return Err(Error::config("dataset.num_classes", "must be at least 2"));
            }
            if s.input_dim == 0 || s.test_per_class == 0 {
                return Err(Error::config("dataset", "input_dim and test_per_class must be positive"));
            }
            positive("dataset.separation", s.separation)?;
            if self.method.needs_few_shot()
                && self.prompt.few_shot_prompts.is_none()
                && s.train_per_class < self.few_shot.shots_per_class
            {
                return Err(Error::config(
                    "few_shot.shots_per_class",
                    format!(
                        "{} shots requested but dataset.train_per_class is {}",
                        self.few_shot.shots_per_class, s.train_per_class
                    ),
                ));
            }
        }
        match &self.model {
            ModelConfig::Toy(t) => {
                if !t.domain_shift.is_finite() {
                    return Err(Error::config("model.domain_shift", "must be finite"));
                }
                if t.path.is_none() && matches!(self.dataset, DatasetConfig::Manifest { .. }) {
                    return Err(Error::config("model.path", "a manifest dataset needs a saved toy model"));
                }
            }
            ModelConfig::External(spec) => {
                if spec.command.is_empty() {
                    return Err(Error::config("model.command", "must name a program"));
                }
                if self.method != Method::NoPl {
                    return Err(Error::config("method", "external models support NO_PL only"));
                }
            }
            ModelConfig::Linear { .. } => {
                if self.method != Method::NoPl {
                    return Err(Error::config("method", "linear models support NO_PL only"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_documents_give_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_and_json_share_a_schema() {
        let t = RunConfig::from_toml(
            r#"
            seed = 3
            method = "ZERO_SHOT"
            [dataset]
            kind = "synthetic"
            test_per_class = 5
            [noise]
            sigmas = [0.5]
            [zero_shot]
            steps = 8
            "#,
        )
        .unwrap();
        let j = RunConfig::from_json(
            r#"{"seed":3,"method":"ZERO_SHOT","dataset":{"kind":"synthetic","test_per_class":5},
                "noise":{"sigmas":[0.5]},"zero_shot":{"steps":8}}"#,
        )
        .unwrap();
        assert_eq!(t, j);
        assert_eq!(t.zero_shot.steps, 8);
        let back = RunConfig::from_json(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::from_toml("[noise]\nsigmas = [0.25, -1.0]\n").unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("noise.sigmas[1]"), "{err}");
        let err = RunConfig::from_json(r#"{"noise":{"n0":"many"}}"#).unwrap_err();
        assert!(err.to_string().contains("noise.n0"), "{err}");
        let err = RunConfig::from_toml("[few_shot]\nlearning_rate = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("few_shot.learning_rate"), "{err}");
        let err = RunConfig::from_toml("[prompt]\ncolour = 1\n").unwrap_err();
        assert!(err.to_string().contains("prompt"), "{err}");
        let err = RunConfig::from_toml("method = \"COMBINED\"\n[model]\nkind = \"external\"\ncommand = [\"x\"]\ninput_dim = 2\n")
            .unwrap_err();
        assert!(err.to_string().contains("method"), "{err}");
    }
}
