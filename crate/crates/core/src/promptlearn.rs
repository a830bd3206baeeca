//! Noise-aware prompt learning: few-shot tuning of the context tokens on noisy
//! labeled shots, single-image test-time entropy minimization, and the two
//! combined.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, mix64};
use crate::toymodel::{prompt_gradient, LossKind, PromptState, SynthDataset, ToyVlm};
use crate::vlmhead::Temperature;

pub fn default_sigma_range() -> Vec<f64> {
    vec![0.1, 0.25, 0.5, 1.0]
}

/// `count` i.i.d. uniform picks from `sigma_range`.
pub fn sample_sigmas(sigma_range: &[f64], count: usize, seed: u64) -> Result<Vec<f64>> {
    if sigma_range.is_empty() {
        return Err(Error::domain("sigma range is empty"));
    }
    let mut rng = seed::rng(seed);
    Ok((0..count)
        .map(|_| sigma_range[rng.random_range(0..sigma_range.len())])
        .collect())
}

fn check_range(path: &str, sigma_range: &[f64]) -> Result<()> {
    if sigma_range.is_empty() {
        return Err(Error::config(path, "must not be empty"));
    }
    if let Some(s) = sigma_range.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::config(path, format!("noise level {s} must be positive")));
    }
    Ok(())
}

/// Few-shot tuning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    pub shots_per_class: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Noise draws per image per step.
    pub t_noise: usize,
    pub sigma_range: Vec<f64>,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    pub tau: Temperature,
    pub seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            shots_per_class: 16,
            epochs: 50,
            learning_rate: 0.002,
            batch_size: 16,
            t_noise: 8,
            sigma_range: default_sigma_range(),
            momentum: 0.0,
            tau: Temperature::DEFAULT,
            seed: 0,
        }
    }
}

impl FewShotConfig {
    pub fn validate(&self) -> Result<()> {
        for (path, v) in [
            ("shots_per_class", self.shots_per_class),
            ("batch_size", self.batch_size),
            ("t_noise", self.t_noise),
        ] {
            if v == 0 {
                return Err(Error::config(path, "must be positive"));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        check_range("sigma_range", &self.sigma_range)
    }
}

/// Test-time adaptation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroShotConfig {
    /// Noisy copies of the test image.
    pub t_copies: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub sigma_range: Vec<f64>,
    pub tau: Temperature,
    pub seed: u64,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        ZeroShotConfig {
            t_copies: 100,
            steps: 1,
            learning_rate: 0.002,
            sigma_range: default_sigma_range(),
            tau: Temperature::DEFAULT,
            seed: 0,
        }
    }
}

impl ZeroShotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_copies == 0 {
            return Err(Error::config("t_copies", "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        check_range("sigma_range", &self.sigma_range)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ZeroShotConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn with_steps(&self, steps: usize) -> Self {
        ZeroShotConfig {
            steps,
            ..self.clone()
        }
    }

    /// Noise levels and noise seed of the copies, fixed for all steps.
    fn copies(&self) -> Result<(Vec<f64>, u64)> {
        let sigmas = sample_sigmas(&self.sigma_range, self.t_copies, mix64(self.seed, 0, 0))?;
        Ok((sigmas, mix64(self.seed, 1, 0)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotResult {
    pub prompts: PromptState,
    /// Mean loss of each epoch.
    pub loss_trace: Vec<f64>,
}

fn with_context(err: Error, context: &str) -> Error {
    match err {
        Error::NonFinite(msg) => Error::NonFinite(format!("{context}: {msg}")),
        other => other,
    }
}

/// SGD on the context tokens minimizing the noisy cross-entropy over the
/// first `shots_per_class` samples of each class.
///
/// Each step draws `t_noise` noise levels with [`sample_sigmas`], shared by
/// the batch, and one fresh Gaussian perturbation per (image, draw).
pub fn few_shot_train(
    vlm: &ToyVlm,
    init: &PromptState,
    data: &SynthDataset,
    cfg: &FewShotConfig,
) -> Result<FewShotResult> {
    cfg.validate()?;
    let dims = vlm.dims();
    if data.num_classes != dims.num_classes || data.input_dim != dims.input_dim {
        return Err(Error::dim(format!(
            "dataset is {} classes x {} inputs, model is {} x {}",
            data.num_classes, data.input_dim, dims.num_classes, dims.input_dim
        )));
    }
    let (shots, _) = data.split_per_class(cfg.shots_per_class)?;
    let mut prompts = init.clone();
    let mut velocity = vec![0.0; prompts.as_slice().len()];
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..shots.len()).collect();
    let mut images = Vec::with_capacity(cfg.batch_size * dims.input_dim);
    let mut labels = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::stream(cfg.seed, 1, epoch as u64));
        let mut total = 0.0;
        let mut steps = 0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let key = mix64(mix64(cfg.seed, 2, epoch as u64), step as u64, 0);
            let sigmas = sample_sigmas(&cfg.sigma_range, cfg.t_noise, mix64(key, 0, 0))?;
            images.clear();
            labels.clear();
            for &i in batch {
                images.extend_from_slice(shots.image(i));
                labels.push(shots.labels[i]);
            }
            let lg = prompt_gradient(
                vlm,
                &prompts,
                &images,
                Some(&labels),
                &sigmas,
                cfg.tau,
                LossKind::CrossEntropy,
                mix64(key, 1, 0),
            )
            .map_err(|e| with_context(e, &format!("epoch {epoch} step {step}")))?;
            for (v, g) in velocity.iter_mut().zip(&lg.gradient) {
                *v = cfg.momentum * *v + g;
            }
            prompts.axpy(-cfg.learning_rate, &velocity);
            total += lg.loss;
            steps += 1;
        }
        let mean = total / steps as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: mean loss is {mean}")));
        }
        loss_trace.push(mean);
    }
    Ok(FewShotResult { prompts, loss_trace })
}

/// `H(q_bar)` of `prompts` on the noisy copies [`zero_shot_adapt`] would use.
pub fn noisy_entropy(vlm: &ToyVlm, prompts: &PromptState, image: &[f64], cfg: &ZeroShotConfig) -> Result<f64> {
    cfg.validate()?;
    let (sigmas, noise_seed) = cfg.copies()?;
    Ok(prompt_gradient(vlm, prompts, image, None, &sigmas, cfg.tau, LossKind::MeanProbEntropy, noise_seed)?.loss)
}

/// Starting from `init`, takes `cfg.steps` gradient steps on the entropy of
/// the mean prediction over `t_copies` noisy copies of `image`.
///
/// The copies are drawn once, from `cfg.seed`, and reused by every step.
pub fn zero_shot_adapt(vlm: &ToyVlm, init: &PromptState, image: &[f64], cfg: &ZeroShotConfig) -> Result<PromptState> {
    cfg.validate()?;
    let (sigmas, noise_seed) = cfg.copies()?;
    let mut prompts = init.clone();
    for step in 0..cfg.steps {
        let lg = prompt_gradient(
            vlm,
            &prompts,
            image,
            None,
            &sigmas,
            cfg.tau,
            LossKind::MeanProbEntropy,
            noise_seed,
        )
        .map_err(|e| with_context(e, &format!("adaptation step {step}")))?;
        prompts.axpy(-cfg.learning_rate, &lg.gradient);
    }
    Ok(prompts)
}

/// Test-time adaptation on top of few-shot prompts.
pub fn combined_promptsmooth(
    vlm: &ToyVlm,
    few_shot: &PromptState,
    image: &[f64],
    cfg: &ZeroShotConfig,
) -> Result<PromptState> {
    zero_shot_adapt(vlm, few_shot, image, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{synth_dataset, ToyDims};

    #[test]
    fn singleton_range() {
        assert_eq!(sample_sigmas(&[0.25], 5, 3).unwrap(), vec![0.25; 5]);
        assert!(sample_sigmas(&[], 5, 3).is_err());
    }

    #[test]
    fn sigma_draws_are_deterministic_members() {
        let range = default_sigma_range();
        let a = sample_sigmas(&range, 100, 7).unwrap();
        assert_eq!(a, sample_sigmas(&range, 100, 7).unwrap());
        assert!(a.iter().all(|s| range.contains(s)));
    }

    #[test]
    fn sigma_frequencies_concentrate() {
        let range = default_sigma_range();
        let draws = sample_sigmas(&range, 10_000, 11).unwrap();
        let band = 3.0 * (10_000.0f64 * 0.25 * 0.75).sqrt();
        for s in &range {
            let c = draws.iter().filter(|d| *d == s).count() as f64;
            assert!((c - 2500.0).abs() <= band, "{s}: {c}");
        }
    }

    fn setup() -> (ToyVlm, SynthDataset) {
        let data = synth_dataset(4, 64, 20, 2.0, 1).unwrap();
        let vlm = ToyVlm::aligned(ToyDims::default(), &data.class_means, -0.3, 1).unwrap();
        (vlm, data)
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (vlm, data) = setup();
        let init = PromptState::random(5, 16, 2).unwrap();
        let cfg = FewShotConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = few_shot_train(&vlm, &init, &data, &cfg).unwrap();
        assert_eq!(out.prompts, init);
        assert!(out.loss_trace.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_leaves_model_alone() {
        let (vlm, data) = setup();
        let before = vlm.clone();
        let init = PromptState::random(5, 16, 2).unwrap();
        let cfg = FewShotConfig {
            epochs: 3,
            seed: 5,
            ..Default::default()
        };
        let a = few_shot_train(&vlm, &init, &data, &cfg).unwrap();
        let b = few_shot_train(&vlm, &init, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(vlm, before);
        assert_ne!(a.prompts, init);
        assert!(a.loss_trace.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn zero_learning_rate_and_zero_steps_are_identity() {
        let (vlm, data) = setup();
        let init = PromptState::random(5, 16, 2).unwrap();
        let cfg = ZeroShotConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert_eq!(zero_shot_adapt(&vlm, &init, data.image(0), &cfg).unwrap(), init);
        let cfg = ZeroShotConfig::default().with_steps(0);
        assert_eq!(combined_promptsmooth(&vlm, &init, data.image(0), &cfg).unwrap(), init);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let bad = FewShotConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().is_config());
        let bad = ZeroShotConfig {
            sigma_range: vec![],
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().is_config());
    }
}
