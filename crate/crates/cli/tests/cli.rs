use std::path::Path;
use std::process::{Command, Output};

use smoothcert::container::Tensor;
use smoothcert::harness::read_records;

const BIN: &str = env!("CARGO_BIN_EXE_smoothcert");
const SERVER: &str = env!("CARGO_BIN_EXE_smoothcert-linear-server");

fn smoothcert(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("SMOOTHCERT_QUIET", "1").output().unwrap()
}

fn path(p: &Path) -> String {
    p.display().to_string()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    path(&p)
}

fn manifest_config(root: &Path, extra: &str) -> String {
    format!(
        r#"
seed = 3
max_samples = 8
record_timing = false
{extra}
[dataset]
kind = "manifest"
path = "{}"
[model]
kind = "toy"
path = "{}"
[noise]
sigmas = [0.25, 0.5]
n = 500
[few_shot]
epochs = 2
"#,
        path(&root.join("data/manifest.json")),
        path(&root.join("model"))
    )
}

#[test]
fn synthetic_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let out = smoothcert(&["synth-data", "--out", &path(root)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("data/manifest.json").exists());

    let cfg = write_config(root, "run.toml", &manifest_config(root, ""));
    let run_dir = root.join("nopl");
    let out = smoothcert(&["--config", &cfg, "certify", "--out", &path(&run_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_records(&run_dir.join("records.jsonl")).unwrap().len(), 16);

    let out = smoothcert(&["--config", &cfg, "report", "--out", &path(&run_dir), "--format", "csv,text-table"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("Certified Accuracy at ℓ2 radius (%)"));
    let csv = std::fs::read_to_string(run_dir.join("report.csv")).unwrap();
    assert!(csv.starts_with("method,sigma_used,radius,certified_acc,clean_acc\nNO_PL,"));
    assert!(run_dir.join("per_sigma.csv").exists());

    let prompts_dir = root.join("prompts");
    let out = smoothcert(&["--config", &cfg, "train-prompts", "--out", &path(&prompts_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(prompts_dir.join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);

    let extra = format!(
        "method = \"COMBINED\"\n[prompt]\nfew_shot_prompts = \"{}\"",
        path(&prompts_dir.join("prompts.csmt"))
    );
    let cfg = write_config(root, "combined.toml", &manifest_config(root, &extra));
    let out = smoothcert(&["--config", &cfg, "--workers", "2", "certify", "--out", &path(&root.join("comb"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_errors_exit_with_one_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "[noise]\nalpha = 2.0\n");
    let out = Command::new(BIN).args(["--config", &cfg, "certify"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise.alpha"));
    let out = smoothcert(&["certify", "--method", "BEST"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "ext.toml",
        "[model]\nkind = \"external\"\ncommand = [\"/nonexistent/server\"]\ninput_dim = 64\n",
    );
    let out = smoothcert(&["--config", &cfg, "certify", "--out", &path(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_check_passes_on_a_small_sample() {
    let out = smoothcert(&["oracle-check", "--count", "20"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn external_and_in_process_linear_runs_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let weights: Vec<f64> = (0..4 * 64).map(|i| ((i * 37 % 101) as f64 - 50.0) / 50.0).collect();
    Tensor::f32_from_f64(vec![4, 64], &weights).unwrap().write(&root.join("w.csmt")).unwrap();
    let common = "seed = 9\nmax_samples = 6\nrecord_timing = false\n[noise]\nn = 300\n";
    let linear = write_config(
        root,
        "linear.toml",
        &format!("{common}[model]\nkind = \"linear\"\nweights = \"{}\"\n", path(&root.join("w.csmt"))),
    );
    let external = write_config(
        root,
        "external.toml",
        &format!(
            "{common}[model]\nkind = \"external\"\ncommand = [\"{SERVER}\", \"--weights\", \"{}\"]\ninput_dim = 64\n",
            path(&root.join("w.csmt"))
        ),
    );
    for (cfg, dir) in [(&linear, "a"), (&external, "b")] {
        let out = smoothcert(&["--config", cfg, "certify", "--out", &path(&root.join(dir))]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(
        read_records(&root.join("a/records.jsonl")).unwrap(),
        read_records(&root.join("b/records.jsonl")).unwrap()
    );
}
