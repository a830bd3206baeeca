use std::path::Path;

use smoothcert::container::Tensor;
use smoothcert::harness::run::{Model, RECORDS_FILE};
use smoothcert::harness::{
    certified_accuracy_curve, multi_sigma_envelope, CertRecord, Method, ModelConfig, RunConfig, Runner,
};
use smoothcert::promptlearn::{combined_promptsmooth, noisy_entropy};
use smoothcert::smoothing::{Certificate, CertifyOutcome};
use smoothcert::stats::Probability;

fn quiet() {
    std::env::set_var("SMOOTHCERT_QUIET", "1");
}

fn small(method: Method) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 5,
        method,
        max_samples: Some(12),
        record_timing: false,
        workers: Some(2),
        ..RunConfig::default()
    };
    cfg.noise.sigmas = vec![0.25, 0.5];
    cfg.noise.n = 1_000;
    cfg
}

#[test]
fn interrupted_runs_resume_to_identical_records() {
    quiet();
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Method::ZeroShot);
    let full = dir.path().join("full");
    let resumed = dir.path().join("resumed");
    let reference = Runner::new(&cfg).unwrap().run(Some(&full)).unwrap();
    assert_eq!(reference.len(), 24);

    Runner::new(&cfg).unwrap().run(Some(&resumed)).unwrap();
    let text = std::fs::read_to_string(resumed.join(RECORDS_FILE)).unwrap();
    let mut kept: String = text.lines().take(7).map(|l| format!("{l}\n")).collect();
    kept.push_str(&text.lines().nth(7).unwrap()[..20]);
    std::fs::write(resumed.join(RECORDS_FILE), kept).unwrap();

    let again = Runner::new(&RunConfig {
        workers: Some(1),
        ..cfg.clone()
    })
    .unwrap()
    .run(Some(&resumed))
    .unwrap();
    assert_eq!(again, reference);
    assert_eq!(
        std::fs::read(full.join(RECORDS_FILE)).unwrap(),
        std::fs::read(resumed.join(RECORDS_FILE)).unwrap()
    );
}

#[test]
fn resuming_with_another_configuration_is_refused() {
    quiet();
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Method::NoPl);
    Runner::new(&cfg).unwrap().run(Some(dir.path())).unwrap();
    let other = RunConfig { seed: 6, ..cfg };
    let err = Runner::new(&other).unwrap().run(Some(dir.path())).unwrap_err();
    assert!(err.is_config(), "{err}");
}

fn write_constant_model(dir: &Path) -> ModelConfig {
    let weights = dir.join("w.csmt");
    let bias = dir.join("b.csmt");
    Tensor::f32_from_f64(vec![4, 64], &[0.0; 256]).unwrap().write(&weights).unwrap();
    Tensor::f32_from_f64(vec![4], &[0.0, 0.0, 1.0, 0.0]).unwrap().write(&bias).unwrap();
    ModelConfig::Linear {
        weights,
        bias: Some(bias),
    }
}

#[test]
fn a_constant_classifier_certifies_every_record_alike() {
    quiet();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        model: write_constant_model(dir.path()),
        record_timing: false,
        ..RunConfig::default()
    };
    cfg.noise.n = 200;
    cfg.noise.n0 = 10;
    let records = Runner::new(&cfg).unwrap().run(None).unwrap();
    assert_eq!(records.len(), 500 * 4);
    for s in 0..4 {
        let radii: Vec<f64> = records
            .iter()
            .filter(|r| r.sigma_index == s)
            .map(|r| r.outcome.as_ref().unwrap().radius().expect("never abstains"))
            .collect();
        assert!(radii.iter().all(|r| *r == radii[0] && *r > 0.0));
    }
    assert!(records.iter().all(|r| r.clean_prediction == Some(2)));
}

#[test]
fn learned_prompts_only_apply_to_the_toy_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        method: Method::Combined,
        model: write_constant_model(dir.path()),
        ..RunConfig::default()
    };
    assert!(cfg.validate().unwrap_err().is_config());
}

fn step_record(sigma: f64, sigma_index: usize, correct: bool, radius: f64) -> CertRecord {
    CertRecord {
        sample_index: 0,
        true_label: 0,
        sigma,
        sigma_index,
        outcome: Some(CertifyOutcome::Certified(Certificate {
            label: if correct { 0 } else { 1 },
            radius,
            pa_lower: Probability::new(0.99).unwrap(),
            counts: vec![],
        })),
        clean_prediction: Some(0),
        entropy: None,
        wall_time_ms: None,
        error: None,
    }
}

#[test]
fn envelope_switches_noise_level_where_curves_cross() {
    let grid = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
    let small_sigma = [step_record(0.25, 0, true, 0.35), step_record(0.25, 0, true, 2.0)];
    let large_sigma: Vec<CertRecord> = (0..4).map(|i| step_record(0.5, 1, i > 0, 2.0)).collect();
    let a = certified_accuracy_curve(&small_sigma, &grid).unwrap();
    let b = certified_accuracy_curve(&large_sigma, &grid).unwrap();
    let envelope = multi_sigma_envelope(&[a.clone(), b.clone()]).unwrap();
    let used: Vec<f64> = envelope.iter().map(|p| p.sigma_used).collect();
    assert_eq!(used, vec![0.25, 0.25, 0.25, 0.5, 0.5, 0.5]);
    for ((e, p), q) in envelope.iter().zip(&a).zip(&b) {
        assert!(e.certified_accuracy >= p.certified_accuracy && e.certified_accuracy >= q.certified_accuracy);
    }
}

#[test]
fn combined_prompts_lower_the_noisy_entropy_of_few_shot_prompts() {
    quiet();
    let runner = Runner::new(&RunConfig {
        method: Method::FewShot,
        ..RunConfig::default()
    })
    .unwrap();
    let Model::Toy(vlm) = runner.model() else { unreachable!() };
    let few_shot = &runner.few_shot().unwrap().prompts;
    let (mut before, mut after) = (0.0, 0.0);
    for i in (0..500).step_by(5) {
        let image = runner.data().test.image(i);
        let cfg = runner.adapt_config(i);
        before += noisy_entropy(vlm, few_shot, image, &cfg).unwrap();
        let combined = combined_promptsmooth(vlm, few_shot, image, &cfg).unwrap();
        after += noisy_entropy(vlm, &combined, image, &cfg).unwrap();
    }
    assert!(after <= before, "combined {after} vs few-shot {before}");
}
