//! Zero-shot classification head: prompt rendering, cosine similarity against
//! per-class text features, temperature softmax, and an adapter that turns an
//! image encoder plus a prompt set into a [`BaseClassifier`].

use serde::{Deserialize, Serialize};

use crate::error::{ClassifierError, Error, Result};
use crate::linalg::{argmax, dot, norm};
use crate::smoothing::BaseClassifier;

/// Tolerance on the unit-norm contract of [`Embedding`].
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// A unit-norm feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `raw` to unit length.
    ///
    /// Fails for fewer than two coordinates, non-finite entries or a zero
    /// vector.
    pub fn normalize(mut raw: Vec<f64>) -> Result<Self> {
        check_shape(&raw)?;
        let n = norm(&raw);
        if n == 0.0 {
            return Err(Error::domain("cannot normalize a zero vector"));
        }
        if !n.is_finite() {
            return Err(Error::NonFinite("embedding norm overflowed".into()));
        }
        raw.iter_mut().for_each(|x| *x /= n);
        Ok(Embedding(raw))
    }

    /// Wraps a vector that is already unit length (within [`UNIT_TOLERANCE`]).
    pub fn from_unit(v: Vec<f64>) -> Result<Self> {
        check_shape(&v)?;
        let n = norm(&v);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::domain(format!("embedding norm {n} is not 1")));
        }
        Ok(Embedding(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn check_shape(v: &[f64]) -> Result<()> {
    if v.len() < 2 {
        return Err(Error::dim(format!("embedding needs d >= 2, got {}", v.len())));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("embedding coordinate {i} is {}", v[i])));
    }
    Ok(())
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Embedding::from_unit(v)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Softmax inverse temperature `tau > 0`; logits are `tau * similarity`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const DEFAULT: Temperature = Temperature(100.0);

    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Temperature(tau))
        } else {
            Err(Error::domain(format!("temperature must be positive, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::DEFAULT
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Temperature::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> Self {
        t.0
    }
}

/// Substitutes `class_name` for the single `{}` placeholder in `template`.
///
/// ```
/// let p = smoothcert::vlmhead::render_prompt("An H&E image patch of {}", "Tumor").unwrap();
/// assert_eq!(p, "An H&E image patch of Tumor");
/// ```
pub fn render_prompt(template: &str, class_name: &str) -> Result<String> {
    match template.matches("{}").count() {
        1 => Ok(template.replacen("{}", class_name, 1)),
        n => Err(Error::domain(format!(
            "template must contain exactly one {{}} placeholder, found {n}"
        ))),
    }
}

/// Per-class text features with the names and template they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPromptSet {
    embeddings: Vec<Embedding>,
    class_names: Vec<String>,
    template: String,
}

impl ClassPromptSet {
    pub fn new(embeddings: Vec<Embedding>, class_names: Vec<String>, template: String) -> Result<Self> {
        if embeddings.len() < 2 {
            return Err(Error::domain("a prompt set needs at least two classes"));
        }
        if class_names.len() != embeddings.len() {
            return Err(Error::dim(format!(
                "{} class names for {} embeddings",
                class_names.len(),
                embeddings.len()
            )));
        }
        let d = embeddings[0].dim();
        if let Some(k) = embeddings.iter().position(|e| e.dim() != d) {
            return Err(Error::dim(format!(
                "class {k} embedding has d={}, class 0 has d={d}",
                embeddings[k].dim()
            )));
        }
        render_prompt(&template, "")?;
        Ok(ClassPromptSet {
            embeddings,
            class_names,
            template,
        })
    }

    /// A prompt set with placeholder names `class0`, `class1`, ...
    pub fn unnamed(embeddings: Vec<Embedding>) -> Result<Self> {
        let names = (0..embeddings.len()).map(|k| format!("class{k}")).collect();
        ClassPromptSet::new(embeddings, names, "{}".into())
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].dim()
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    /// The rendered text prompt for every class.
    pub fn prompts(&self) -> Vec<String> {
        self.class_names
            .iter()
            .map(|name| self.template.replacen("{}", name, 1))
            .collect()
    }
}

/// `u.v / (|u| |v|)`, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let denom = (dot(u, u) * dot(v, v)).sqrt();
    (dot(u, v) / denom).clamp(-1.0, 1.0)
}

/// Cosine similarity of `v` with every class feature.
pub fn similarities(v: &Embedding, prompts: &ClassPromptSet) -> Result<Vec<f64>> {
    if v.dim() != prompts.dim() {
        return Err(Error::dim(format!(
            "image embedding has d={}, text embeddings have d={}",
            v.dim(),
            prompts.dim()
        )));
    }
    Ok(prompts
        .embeddings
        .iter()
        .map(|u| cosine(u.as_slice(), v.as_slice()))
        .collect())
}

/// Max-subtracted softmax of `tau * s`.
pub fn softmax_scaled(s: &[f64], tau: Temperature) -> Vec<f64> {
    let tau = tau.get();
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = s.iter().map(|&x| (tau * (x - max)).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

/// Class probabilities `softmax(tau * cos(u_k, v))`.
pub fn zero_shot_probs(v: &Embedding, prompts: &ClassPromptSet, tau: Temperature) -> Result<Vec<f64>> {
    Ok(softmax_scaled(&similarities(v, prompts)?, tau))
}

/// The most probable class; ties go to the lowest index.
///
/// Decided on the raw similarities, which the softmax preserves in order, so
/// the answer does not depend on `tau` and cannot be disturbed by underflow of
/// small probabilities.
pub fn zero_shot_classify(v: &Embedding, prompts: &ClassPromptSet, _tau: Temperature) -> Result<usize> {
    Ok(argmax(&similarities(v, prompts)?))
}

/// Maps a raw input vector to a unit-norm embedding.
pub trait ImageEncoder: Send + Sync {
    fn input_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn encode(&self, image: &[f64]) -> Result<Embedding>;
}

impl<E: ImageEncoder + ?Sized> ImageEncoder for &E {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn embed_dim(&self) -> usize {
        (**self).embed_dim()
    }
    fn encode(&self, image: &[f64]) -> Result<Embedding> {
        (**self).encode(image)
    }
}

/// Encoder followed by [`zero_shot_classify`], usable as a smoothing base
/// classifier.
#[derive(Debug, Clone)]
pub struct ZeroShotClassifier<E> {
    encoder: E,
    prompts: ClassPromptSet,
    tau: Temperature,
}

impl<E: ImageEncoder> ZeroShotClassifier<E> {
    pub fn new(encoder: E, prompts: ClassPromptSet, tau: Temperature) -> Result<Self> {
        if encoder.embed_dim() != prompts.dim() {
            return Err(Error::dim(format!(
                "encoder emits d={}, prompts have d={}",
                encoder.embed_dim(),
                prompts.dim()
            )));
        }
        Ok(ZeroShotClassifier {
            encoder,
            prompts,
            tau,
        })
    }

    pub fn prompts(&self) -> &ClassPromptSet {
        &self.prompts
    }

    pub fn classify(&self, image: &[f64]) -> Result<usize> {
        zero_shot_classify(&self.encoder.encode(image)?, &self.prompts, self.tau)
    }

    pub fn probs(&self, image: &[f64]) -> Result<Vec<f64>> {
        zero_shot_probs(&self.encoder.encode(image)?, &self.prompts, self.tau)
    }
}

impl<E: ImageEncoder> BaseClassifier for ZeroShotClassifier<E> {
    fn num_classes(&self) -> usize {
        self.prompts.num_classes()
    }

    fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    fn evaluate(&self, batch: &[f64], labels: &mut Vec<usize>)
        -> std::result::Result<(), ClassifierError> {
        let d = self.input_dim();
        if !batch.len().is_multiple_of(d) {
            return Err(ClassifierError::Input(format!(
                "batch of {} values is not a multiple of {d}",
                batch.len()
            )));
        }
        for image in batch.chunks_exact(d) {
            let label = self
                .classify(image)
                .map_err(|e| ClassifierError::Input(e.to_string()))?;
            labels.push(label);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Embedding {
        Embedding::normalize(v.to_vec()).unwrap()
    }

    fn set(vs: &[&[f64]]) -> ClassPromptSet {
        ClassPromptSet::unnamed(vs.iter().map(|v| unit(v)).collect()).unwrap()
    }

    #[test]
    fn identical_features_give_uniform_probs() {
        let row: &[f64] = &[1.0, 2.0, 3.0];
        let p = set(&[row; 4]);
        let probs = zero_shot_probs(&unit(&[0.3, -1.0, 2.0]), &p, Temperature::DEFAULT).unwrap();
        for q in &probs {
            assert!((q - 0.25).abs() < 1e-15);
        }
        assert_eq!(zero_shot_classify(&unit(&[0.3, -1.0, 2.0]), &p, Temperature::DEFAULT).unwrap(), 0);
    }

    #[test]
    fn two_class_logistic_value() {
        let p = softmax_scaled(&[0.3, 0.1], Temperature::new(100.0).unwrap());
        let expected = 1.0 / (1.0 + (-20.0f64).exp());
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[1] / 2.061_153_618_190_203_6e-9 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_match_wins() {
        let p = set(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let v = unit(&[0.0, 0.0, 1.0]);
        assert_eq!(zero_shot_classify(&v, &p, Temperature::DEFAULT).unwrap(), 2);
        assert_eq!(cosine(v.as_slice(), v.as_slice()), 1.0);
    }

    #[test]
    fn argmax_ignores_temperature() {
        let p = set(&[&[1.0, 0.2], &[0.9, 0.5], &[-0.3, 1.0]]);
        let v = unit(&[0.8, 0.45]);
        let s = similarities(&v, &p).unwrap();
        for tau in [1e-3, 1.0, 100.0, 1e4] {
            let probs = zero_shot_probs(&v, &p, Temperature::new(tau).unwrap()).unwrap();
            assert_eq!(argmax(&probs), argmax(&s));
        }
    }

    #[test]
    fn softmax_survives_extreme_temperature() {
        let probs = softmax_scaled(&[1.0, -1.0, 0.999], Temperature::new(1e4).unwrap());
        assert!(probs.iter().all(|&p| p >= 0.0 && p.is_finite()));
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Embedding::normalize(vec![0.0, 0.0]).is_err());
        assert!(Embedding::normalize(vec![1.0]).is_err());
        assert!(Embedding::normalize(vec![f64::NAN, 1.0]).is_err());
        assert!(Embedding::from_unit(vec![1.0, 1.0]).is_err());
        assert!(Temperature::new(0.0).is_err());
        assert!(render_prompt("no placeholder", "x").is_err());
        assert!(render_prompt("{} and {}", "x").is_err());
        let p = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(similarities(&unit(&[1.0, 0.0, 0.0]), &p).is_err());
    }

    #[test]
    fn prompt_rendering() {
        let p = ClassPromptSet::new(
            vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])],
            vec!["Tumor".into(), "Stroma".into()],
            "An H&E image patch of {}".into(),
        )
        .unwrap();
        assert_eq!(
            p.prompts(),
            vec!["An H&E image patch of Tumor", "An H&E image patch of Stroma"]
        );
    }
}
