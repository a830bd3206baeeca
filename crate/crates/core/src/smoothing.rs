//! Randomized smoothing: Monte Carlo evaluation of a base classifier under
//! isotropic Gaussian noise, the CERTIFY and PREDICT procedures and the
//! certified l2 radius.
//!
//! # Noise streams
//!
//! Noise is generated in fixed blocks of [`NOISE_BLOCK`] samples. Block `b` of
//! a run draws its Gaussian coordinates, row-major, from a ChaCha8 stream
//! seeded with `mix64(seed, phase, b)` (see [`crate::seed::mix64`]). The
//! `batch_size` argument only controls how many rows are handed to the
//! classifier per call, so counts are bit-identical for every batch size and
//! for serial and parallel evaluation alike.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ClassifierError, Error, Result};
use crate::linalg::{argmax, dot};
use crate::seed;
use crate::stats::{
    binom_two_sided_pvalue, clopper_pearson_lower, phi_inv, ConfidenceLevel, Probability,
};

/// Samples per independently seeded noise block.
pub const NOISE_BLOCK: usize = 1024;

/// A label-producing classifier `f: R^D -> {0..K-1}`.
pub trait BaseClassifier: Send + Sync {
    fn num_classes(&self) -> usize;

    fn input_dim(&self) -> usize;

    /// Classifies a row-major `rows x input_dim` batch, appending one label
    /// per row to `labels`. Must be deterministic in its input.
    fn evaluate(&self, batch: &[f64], labels: &mut Vec<usize>)
        -> std::result::Result<(), ClassifierError>;

    /// Whether `evaluate` may be called from several threads at once. When
    /// false the engine evaluates blocks one after another.
    fn supports_concurrent_evaluation(&self) -> bool {
        true
    }
}

impl<C: BaseClassifier + ?Sized> BaseClassifier for &C {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn evaluate(&self, batch: &[f64], labels: &mut Vec<usize>)
        -> std::result::Result<(), ClassifierError> {
        (**self).evaluate(batch, labels)
    }
    fn supports_concurrent_evaluation(&self) -> bool {
        (**self).supports_concurrent_evaluation()
    }
}

/// Which Monte Carlo draw of a procedure a noise stream belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Phase {
    /// The `n0` samples that pick the candidate class.
    Select = 0,
    /// The `n` samples that estimate its probability. PREDICT uses the same
    /// phase, so on a shared seed it sees exactly the counts CERTIFY saw.
    Estimate = 1,
}

fn default_batch_size() -> usize {
    NOISE_BLOCK
}

/// Smoothing noise and Monte Carlo parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation of the per-coordinate noise, in input units.
    pub sigma: f64,
    /// Selection samples.
    pub n0: u64,
    /// Estimation samples.
    pub n: u64,
    pub alpha: ConfidenceLevel,
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl NoiseSpec {
    pub fn new(sigma: f64, n0: u64, n: u64, alpha: f64, seed: u64) -> Result<Self> {
        let spec = NoiseSpec {
            sigma,
            n0,
            n,
            alpha: ConfidenceLevel::new(alpha)?,
            seed,
            batch_size: NOISE_BLOCK,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::domain(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.n0 == 0 || self.n == 0 {
            return Err(Error::domain("n0 and n must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// A certified prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub label: usize,
    /// Certified l2 radius, in input units.
    pub radius: f64,
    pub pa_lower: Probability,
    /// Per-class counts from the estimation draw.
    pub counts: Vec<u64>,
}

/// Result of CERTIFY.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CertifyOutcome {
    Abstain,
    Certified(Certificate),
}

impl CertifyOutcome {
    pub fn label(&self) -> Option<usize> {
        match self {
            CertifyOutcome::Abstain => None,
            CertifyOutcome::Certified(c) => Some(c.label),
        }
    }

    pub fn radius(&self) -> Option<f64> {
        match self {
            CertifyOutcome::Abstain => None,
            CertifyOutcome::Certified(c) => Some(c.radius),
        }
    }

    pub fn is_abstain(&self) -> bool {
        matches!(self, CertifyOutcome::Abstain)
    }
}

/// Result of PREDICT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    Abstain,
    Label(usize),
}

fn check_input(f: &dyn BaseClassifier, x: &[f64]) -> Result<()> {
    if x.len() != f.input_dim() {
        return Err(Error::dim(format!(
            "input has {} coordinates, classifier expects {}",
            x.len(),
            f.input_dim()
        )));
    }
    if f.num_classes() < 2 {
        return Err(Error::domain("classifier must have at least two classes"));
    }
    Ok(())
}

fn count_block(
    f: &dyn BaseClassifier,
    x: &[f64],
    sigma: f64,
    first: usize,
    rows: usize,
    block_seed: u64,
    batch_size: usize,
) -> Result<Vec<u64>> {
    let dim = x.len();
    let k = f.num_classes();
    let mut rng = seed::rng(block_seed);
    let mut noisy = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        for &xi in x {
            let z: f64 = StandardNormal.sample(&mut rng);
            noisy.push(xi + sigma * z);
        }
    }
    let mut counts = vec![0u64; k];
    let mut labels = Vec::with_capacity(batch_size.min(rows));
    for (chunk_index, chunk) in noisy.chunks(batch_size * dim).enumerate() {
        let chunk_first = first + chunk_index * batch_size;
        labels.clear();
        f.evaluate(chunk, &mut labels).map_err(|source| Error::Classifier {
            sample_index: chunk_first,
            source,
        })?;
        let expected = chunk.len() / dim;
        if labels.len() != expected {
            return Err(Error::Classifier {
                sample_index: chunk_first,
                source: ClassifierError::Protocol(format!(
                    "classifier returned {} labels for {expected} inputs",
                    labels.len()
                )),
            });
        }
        for (offset, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::Classifier {
                    sample_index: chunk_first + offset,
                    source: ClassifierError::LabelOutOfRange {
                        label,
                        num_classes: k,
                    },
                });
            }
            counts[label] += 1;
        }
    }
    Ok(counts)
}

/// Classifies `count` noisy copies `x + sigma * z`, `z ~ N(0, I)`, and returns
/// per-class counts. See the module docs for the seeding rule.
pub fn sample_under_noise(
    f: &dyn BaseClassifier,
    x: &[f64],
    sigma: f64,
    count: u64,
    seed: u64,
    phase: Phase,
    batch_size: usize,
) -> Result<Vec<u64>> {
    check_input(f, x)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!("sigma must be positive, got {sigma}")));
    }
    if count == 0 {
        return Err(Error::domain("sample count must be at least 1"));
    }
    let batch_size = batch_size.clamp(1, NOISE_BLOCK);
    let count = count as usize;
    let blocks = count.div_ceil(NOISE_BLOCK);
    let run_block = |b: usize| {
        let first = b * NOISE_BLOCK;
        let rows = NOISE_BLOCK.min(count - first);
        let block_seed = seed::mix64(seed, phase as u64, b as u64);
        count_block(f, x, sigma, first, rows, block_seed, batch_size)
    };
    let per_block: Vec<Result<Vec<u64>>> = if f.supports_concurrent_evaluation() && blocks > 1 {
        (0..blocks).into_par_iter().map(run_block).collect()
    } else {
        (0..blocks).map(run_block).collect()
    };
    let mut total = vec![0u64; f.num_classes()];
    for block in per_block {
        for (t, c) in total.iter_mut().zip(block?) {
            *t += c;
        }
    }
    Ok(total)
}

/// Builds the certificate for class `selected` from estimation counts:
/// `pa_lower = clopper_pearson_lower(counts[selected], n, alpha)`, and the
/// radius `sigma * Phi^-1(pa_lower)` when `pa_lower > 1/2`.
///
/// The radius is the two-sided formula of [`certified_radius`] with the upper
/// bound on the runner-up taken as `1 - pa_lower`.
pub fn certificate_from_counts(
    selected: usize,
    counts: &[u64],
    sigma: f64,
    alpha: ConfidenceLevel,
) -> Result<CertifyOutcome> {
    if selected >= counts.len() {
        return Err(Error::domain(format!(
            "selected class {selected} outside {} classes",
            counts.len()
        )));
    }
    let n: u64 = counts.iter().sum();
    let pa_lower = clopper_pearson_lower(counts[selected], n, alpha)?;
    if pa_lower.get() > 0.5 {
        Ok(CertifyOutcome::Certified(Certificate {
            label: selected,
            radius: sigma * phi_inv(pa_lower.get()),
            pa_lower,
            counts: counts.to_vec(),
        }))
    } else {
        Ok(CertifyOutcome::Abstain)
    }
}

/// CERTIFY: select the top class on `n0` samples, bound its probability on
/// `n` fresh samples, and certify it if the lower bound exceeds one half.
pub fn certify(f: &dyn BaseClassifier, x: &[f64], spec: &NoiseSpec) -> Result<CertifyOutcome> {
    spec.validate()?;
    let selection = sample_under_noise(f, x, spec.sigma, spec.n0, spec.seed, Phase::Select, spec.batch_size)?;
    let selected = argmax(&selection);
    let counts = sample_under_noise(f, x, spec.sigma, spec.n, spec.seed, Phase::Estimate, spec.batch_size)?;
    certificate_from_counts(selected, &counts, spec.sigma, spec.alpha)
}

/// PREDICT: return the top class of `n` noisy samples if a two-sided binomial
/// test rejects a tie with the runner-up at level `alpha`.
pub fn predict(
    f: &dyn BaseClassifier,
    x: &[f64],
    sigma: f64,
    n: u64,
    alpha: ConfidenceLevel,
    seed: u64,
    batch_size: usize,
) -> Result<Prediction> {
    if n < 2 {
        return Err(Error::domain("predict needs at least two samples"));
    }
    let counts = sample_under_noise(f, x, sigma, n, seed, Phase::Estimate, batch_size)?;
    Ok(prediction_from_counts(&counts, alpha))
}

pub(crate) fn prediction_from_counts(counts: &[u64], alpha: ConfidenceLevel) -> Prediction {
    let top = argmax(counts);
    let runner_up = counts
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &c)| c)
        .max()
        .unwrap_or(0);
    let n_a = counts[top];
    let half = Probability::new(0.5).expect("constant");
    match binom_two_sided_pvalue(n_a, n_a + runner_up, half) {
        Ok(p) if p.get() <= alpha.alpha() => Prediction::Label(top),
        _ => Prediction::Abstain,
    }
}

/// `sigma/2 * (Phi^-1(pa_lower) - Phi^-1(pb_upper))`, clamped at zero.
pub fn certified_radius(sigma: f64, pa_lower: Probability, pb_upper: Probability) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!("sigma must be positive, got {sigma}")));
    }
    let (pa, pb) = (pa_lower.get(), pb_upper.get());
    for (name, v) in [("pa_lower", pa), ("pb_upper", pb)] {
        if v <= 0.0 || v >= 1.0 {
            return Err(Error::domain(format!("{name} = {v} must lie strictly inside (0, 1)")));
        }
    }
    if pa <= pb {
        return Ok(0.0);
    }
    Ok((0.5 * sigma * (phi_inv(pa) - phi_inv(pb))).max(0.0))
}

/// Always answers the same class.
#[derive(Debug, Clone)]
pub struct ConstantClassifier {
    pub label: usize,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl BaseClassifier for ConstantClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn evaluate(&self, batch: &[f64], labels: &mut Vec<usize>)
        -> std::result::Result<(), ClassifierError> {
        labels.extend(std::iter::repeat_n(self.label, batch.len() / self.input_dim));
        Ok(())
    }
}

/// `argmax_k (W x + b)_k` with ties to the lowest class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// Row-major `num_classes x input_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub input_dim: usize,
}

impl LinearClassifier {
    pub fn new(weights: Vec<f64>, bias: Vec<f64>, input_dim: usize) -> Result<Self> {
        if input_dim == 0 || bias.len() < 2 || weights.len() != bias.len() * input_dim {
            return Err(Error::dim(format!(
                "{} weights and {} biases do not form a {}-input classifier with >= 2 classes",
                weights.len(),
                bias.len(),
                input_dim
            )));
        }
        Ok(LinearClassifier {
            weights,
            bias,
            input_dim,
        })
    }

    /// The binary rule `f(x) = 1[w.x + b > 0]`, as scores `(0, w.x + b)`.
    pub fn binary(w: &[f64], b: f64) -> Result<Self> {
        let mut weights = vec![0.0; w.len()];
        weights.extend_from_slice(w);
        LinearClassifier::new(weights, vec![0.0, b], w.len())
    }

    pub fn classify(&self, x: &[f64]) -> usize {
        let scores: Vec<f64> = self
            .weights
            .chunks_exact(self.input_dim)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect();
        argmax(&scores)
    }
}

impl BaseClassifier for LinearClassifier {
    fn num_classes(&self) -> usize {
        self.bias.len()
    }
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn evaluate(&self, batch: &[f64], labels: &mut Vec<usize>)
        -> std::result::Result<(), ClassifierError> {
        if !batch.len().is_multiple_of(self.input_dim) {
            return Err(ClassifierError::Input(format!(
                "batch of {} values is not a multiple of {}",
                batch.len(),
                self.input_dim
            )));
        }
        labels.extend(batch.chunks_exact(self.input_dim).map(|x| self.classify(x)));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::phi;
    use proptest::prelude::*;

    fn constant() -> ConstantClassifier {
        ConstantClassifier {
            label: 0,
            num_classes: 3,
            input_dim: 2,
        }
    }

    fn linear() -> LinearClassifier {
        LinearClassifier::binary(&[1.0, 0.0], 0.0).unwrap()
    }

    fn prob(v: f64) -> Probability {
        Probability::new(v).unwrap()
    }

    fn alpha(v: f64) -> ConfidenceLevel {
        ConfidenceLevel::new(v).unwrap()
    }

    #[test]
    fn constant_classifier_counts() {
        let counts = sample_under_noise(&constant(), &[0.1, 0.2], 0.5, 500, 3, Phase::Select, 64).unwrap();
        assert_eq!(counts, vec![500, 0, 0]);
    }

    #[test]
    fn linear_counts_match_gaussian_projection() {
        let counts = sample_under_noise(&linear(), &[0.5, 0.0], 0.25, 10_000, 17, Phase::Estimate, 1000).unwrap();
        assert_eq!(counts.iter().sum::<u64>(), 10_000);
        let p = phi(2.0);
        let se = (p * (1.0 - p) / 10_000.0).sqrt();
        let frac = counts[1] as f64 / 10_000.0;
        assert!((frac - p).abs() <= 3.0 * se, "{frac} vs {p}");
    }

    #[test]
    fn counts_independent_of_batch_size() {
        let f = linear();
        let reference = sample_under_noise(&f, &[0.1, 0.3], 0.5, 3_000, 9, Phase::Estimate, 1).unwrap();
        for batch in [7, 100, 1024, 5000] {
            let got = sample_under_noise(&f, &[0.1, 0.3], 0.5, 3_000, 9, Phase::Estimate, batch).unwrap();
            assert_eq!(got, reference, "batch {batch}");
        }
    }

    #[test]
    fn phases_draw_different_noise() {
        let f = linear();
        let a = sample_under_noise(&f, &[0.0, 0.0], 1.0, 2_000, 5, Phase::Select, 256).unwrap();
        let b = sample_under_noise(&f, &[0.0, 0.0], 1.0, 2_000, 5, Phase::Estimate, 256).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_bad_arguments() {
        let f = linear();
        assert!(sample_under_noise(&f, &[0.0, 0.0], 0.0, 10, 1, Phase::Select, 8).is_err());
        assert!(sample_under_noise(&f, &[0.0, 0.0], 0.1, 0, 1, Phase::Select, 8).is_err());
        assert!(matches!(
            sample_under_noise(&f, &[0.0], 0.1, 10, 1, Phase::Select, 8),
            Err(Error::Dimension(_))
        ));
        assert!(NoiseSpec::new(0.25, 0, 10, 0.001, 0).is_err());
        assert!(NoiseSpec::new(-1.0, 1, 10, 0.001, 0).is_err());
        assert!(NoiseSpec::new(0.25, 1, 10, 1.0, 0).is_err());
    }

    struct Failing;
    impl BaseClassifier for Failing {
        fn num_classes(&self) -> usize {
            2
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn evaluate(&self, _: &[f64], _: &mut Vec<usize>) -> std::result::Result<(), ClassifierError> {
            Err(ClassifierError::Input("boom".into()))
        }
    }

    struct OutOfRange;
    impl BaseClassifier for OutOfRange {
        fn num_classes(&self) -> usize {
            2
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn evaluate(&self, batch: &[f64], labels: &mut Vec<usize>) -> std::result::Result<(), ClassifierError> {
            labels.extend(batch.iter().map(|_| 7));
            Ok(())
        }
    }

    #[test]
    fn classifier_failures_propagate_with_context() {
        let spec = NoiseSpec::new(0.5, 10, 100, 0.001, 1).unwrap();
        match certify(&Failing, &[0.0], &spec) {
            Err(Error::Classifier { sample_index, .. }) => assert_eq!(sample_index, 0),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            certify(&OutOfRange, &[0.0], &spec),
            Err(Error::Classifier {
                source: ClassifierError::LabelOutOfRange { label: 7, .. },
                ..
            })
        ));
    }

    #[test]
    fn certify_linear_example() {
        let spec = NoiseSpec::new(0.25, 100, 10_000, 0.001, 2024).unwrap();
        let out = certify(&linear(), &[0.5, 0.0], &spec).unwrap();
        let CertifyOutcome::Certified(c) = out else {
            panic!("abstained")
        };
        assert_eq!(c.label, 1);
        assert!(c.radius <= 0.5 && c.radius >= 0.8 * 0.5, "radius {}", c.radius);
        assert!(c.pa_lower.get() > 0.5);
    }

    #[test]
    fn certify_constant_closed_form() {
        let spec = NoiseSpec::new(0.5, 100, 1_000, 0.001, 0).unwrap();
        let out = certify(&constant(), &[0.0, 0.0], &spec).unwrap();
        // 40-digit reference: Phi^-1(0.001^(1/1000)) = 2.4632626147808087748
        let want = 0.5 * 2.463_262_614_780_808_7;
        assert_eq!(out.label(), Some(0));
        assert!((out.radius().unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn certify_abstains_on_boundary() {
        let f = linear();
        let mut abstained = 0;
        for seed in 0..40 {
            let spec = NoiseSpec::new(0.25, 100, 1_000, 0.001, seed).unwrap();
            if certify(&f, &[0.0, 0.0], &spec).unwrap().is_abstain() {
                abstained += 1;
            }
        }
        assert!(abstained >= 38, "{abstained}/40");
    }

    #[test]
    fn predict_examples() {
        let a = alpha(0.001);
        for n in [11, 50, 1000] {
            let got = predict(&constant(), &[0.0, 0.0], 0.3, n, a, 1, 256).unwrap();
            assert_eq!(got, Prediction::Label(0), "n={n}");
        }
        let mut abstained = 0;
        for seed in 0..40 {
            if predict(&linear(), &[0.0, 0.0], 0.25, 1000, a, seed, 256).unwrap() == Prediction::Abstain {
                abstained += 1;
            }
        }
        assert!(abstained >= 36, "{abstained}/40");
        assert!(predict(&constant(), &[0.0, 0.0], 0.3, 1, a, 1, 256).is_err());
    }

    #[test]
    fn radius_examples() {
        let r = certified_radius(0.25, prob(0.8), prob(0.2)).unwrap();
        // 0.125 * (Phi^-1(0.8) - Phi^-1(0.2)) at 40 digits: 0.21040530839322857112
        assert!((r - 0.210_405_308_393_228_57).abs() < 1e-12, "{r}");
        for p in [0.1, 0.5, 0.93] {
            assert_eq!(certified_radius(0.7, prob(p), prob(p)).unwrap(), 0.0);
        }
        let r = certified_radius(0.5, prob(0.9), prob(0.1)).unwrap();
        assert!((r - 0.640_775_782_772_300_3).abs() < 1e-12);
        assert!((r - 0.5 * phi_inv(0.9)).abs() < 1e-12);
        assert_eq!(certified_radius(0.5, prob(0.3), prob(0.6)).unwrap(), 0.0);
        assert!(certified_radius(0.5, prob(1.0), prob(0.1)).is_err());
        assert!(certified_radius(0.5, prob(0.9), prob(0.0)).is_err());
        assert!(certified_radius(0.0, prob(0.9), prob(0.1)).is_err());
    }

    #[test]
    fn one_sided_certificate_equals_two_sided_formula() {
        let counts = [12, 9_900, 88];
        let out = certificate_from_counts(1, &counts, 0.5, alpha(0.001)).unwrap();
        let c = match out {
            CertifyOutcome::Certified(c) => c,
            CertifyOutcome::Abstain => panic!(),
        };
        let pa = c.pa_lower.get();
        let two_sided = certified_radius(0.5, prob(pa), prob(1.0 - pa)).unwrap();
        assert!((c.radius - two_sided).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn radius_monotone_in_bounds(pa in 0.01f64..0.99, pb in 0.01f64..0.99, d in 1e-4f64..0.009) {
            let base = 0.5 * (phi_inv(pa) - phi_inv(pb));
            prop_assert!(0.5 * (phi_inv(pa + d) - phi_inv(pb)) > base);
            prop_assert!(0.5 * (phi_inv(pa) - phi_inv(pb + d)) < base);
        }

        #[test]
        fn stricter_alpha_never_grows_radius(top in 0u64..2000, rest in 0u64..200,
                                             a1 in 1e-6f64..0.2, a2 in 1e-6f64..0.2) {
            let counts = [rest, top];
            let (strict, loose) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
            prop_assume!(top + rest > 0);
            let r = |a: f64| certificate_from_counts(1, &counts, 0.3, alpha(a)).unwrap().radius().unwrap_or(0.0);
            prop_assert!(r(strict) <= r(loose));
        }

        #[test]
        fn predict_never_contradicts_certify(seed in 0u64..10_000, offset in -0.3f64..0.3) {
            let f = linear();
            let x = [offset, 0.2];
            let spec = NoiseSpec::new(0.25, 50, 400, 0.001, seed).unwrap();
            let cert = certify(&f, &x, &spec).unwrap();
            let pred = predict(&f, &x, spec.sigma, spec.n, spec.alpha, seed, spec.batch_size).unwrap();
            if let Some(label) = cert.label() {
                prop_assert!(pred == Prediction::Label(label) || pred == Prediction::Abstain);
            }
        }
    }
}
