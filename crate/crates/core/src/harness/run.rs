//! Certification runs: one record per (test sample, noise level).

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Tensor;
use crate::error::{Error, Result};
use crate::extproto::{ExternalClassifier, F32Inputs};
use crate::promptlearn::{few_shot_train, noisy_entropy, zero_shot_adapt, FewShotResult, ZeroShotConfig};
use crate::seed::mix64;
use crate::smoothing::{certify, BaseClassifier, CertifyOutcome, LinearClassifier, NoiseSpec};
use crate::toymodel::{PromptState, ToyDims, ToyVlm};

use super::config::{DatasetConfig, Method, ModelConfig, RunConfig};
use super::dataset::{load_manifest, synthetic, Data};
use super::log;

/// Third `mix64` argument of the per-image adaptation seed. Certification
/// seeds use the noise-level index there.
pub const ADAPT_TAG: u64 = u64::MAX;
const FEW_SHOT_TAG: u64 = u64::MAX - 1;
const INIT_TAG: u64 = u64::MAX - 2;
const SELECT_TAG: u64 = u64::MAX - 3;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertRecord {
    /// Row of the test set.
    pub sample_index: usize,
    pub true_label: usize,
    pub sigma: f64,
    pub sigma_index: usize,
    /// Missing when the sample failed; see `error`.
    pub outcome: Option<CertifyOutcome>,
    pub clean_prediction: Option<usize>,
    /// Entropy of the mean noisy prediction under the prompts used (toy
    /// models only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CertRecord {
    pub fn key(&self) -> (usize, usize) {
        (self.sample_index, self.sigma_index)
    }

    /// Certified with the right label at radius `r` or more.
    pub fn certified_at(&self, r: f64) -> bool {
        match &self.outcome {
            Some(CertifyOutcome::Certified(c)) => c.label == self.true_label && c.radius >= r,
            _ => false,
        }
    }

    pub fn clean_correct(&self) -> bool {
        self.clean_prediction == Some(self.true_label)
    }
}

pub enum Model {
    Toy(ToyVlm),
    External(ExternalClassifier),
    Linear(F32Inputs<LinearClassifier>),
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Model::Toy(_) => f.write_str("Model::Toy"),
            Model::External(e) => write!(f, "Model::External({e:?})"),
            Model::Linear(_) => f.write_str("Model::Linear"),
        }
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    match &cfg.dataset {
        DatasetConfig::Synthetic(s) => synthetic(s),
        DatasetConfig::Manifest { path } => load_manifest(path),
    }
}

fn check_shape(what: &str, input_dim: usize, num_classes: usize, data: &Data) -> Result<()> {
    if input_dim != data.test.input_dim || num_classes != data.class_names.len() {
        return Err(Error::dim(format!(
            "{what} takes {input_dim} inputs and {num_classes} classes, dataset has {} and {}",
            data.test.input_dim,
            data.class_names.len()
        )));
    }
    Ok(())
}

pub fn load_model(cfg: &RunConfig, data: &Data) -> Result<Model> {
    match &cfg.model {
        ModelConfig::Toy(t) => {
            let vlm = match &t.path {
                Some(path) => ToyVlm::load(path)?,
                None => {
                    let dims = ToyDims {
                        input_dim: data.test.input_dim,
                        embed_dim: t.embed_dim,
                        token_dim: t.token_dim,
                        num_classes: data.class_names.len(),
                    };
                    ToyVlm::aligned(dims, &data.test.class_means, t.domain_shift, t.init_seed)?
                }
            };
            let d = vlm.dims();
            check_shape("toy model", d.input_dim, d.num_classes, data)?;
            Ok(Model::Toy(vlm))
        }
        ModelConfig::External(spec) => {
            let ext = ExternalClassifier::spawn(spec).map_err(|source| Error::Classifier {
                sample_index: 0,
                source,
            })?;
            check_shape("external model", ext.input_dim(), ext.num_classes(), data)?;
            Ok(Model::External(ext))
        }
        ModelConfig::Linear { weights, bias } => {
            let w = Tensor::read(weights)?;
            let [k, d] = w.dims() else {
                return Err(Error::Format {
                    path: weights.clone(),
                    message: "weights must be a K x D matrix".into(),
                });
            };
            let (k, d) = (*k as usize, *d as usize);
            let b = match bias {
                Some(path) => {
                    let b = Tensor::read(path)?;
                    b.expect_dims(&[k as u32], "bias")?;
                    b.to_f64()
                }
                None => vec![0.0; k],
            };
            let linear = LinearClassifier::new(w.to_f64(), b, d)?;
            check_shape("linear model", d, k, data)?;
            Ok(Model::Linear(F32Inputs(linear)))
        }
    }
}

/// Few-shot training for the run's seed.
pub fn train_few_shot(cfg: &RunConfig, vlm: &ToyVlm, data: &Data) -> Result<FewShotResult> {
    let train = data.train.as_ref().ok_or_else(|| {
        Error::config("dataset", "few-shot training needs training images")
    })?;
    let init = PromptState::init(
        cfg.prompt.few_shot_init,
        vlm,
        cfg.prompt.context_tokens,
        mix64(cfg.seed, INIT_TAG, 0),
    )?;
    let mut fs = cfg.few_shot.clone();
    fs.seed = mix64(cfg.seed, FEW_SHOT_TAG, cfg.few_shot.seed);
    few_shot_train(vlm, &init, train, &fs)
}

/// A configured run with its data, model and shared prompts loaded.
pub struct Runner {
    cfg: RunConfig,
    data: Data,
    model: Model,
    /// Prompts every sample starts from (toy models only).
    base_prompts: Option<PromptState>,
    few_shot: Option<FewShotResult>,
}

impl Runner {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = load_data(cfg)?;
        let model = load_model(cfg, &data)?;
        let mut few_shot = None;
        let base_prompts = match &model {
            Model::Toy(vlm) => Some(match cfg.method {
                Method::NoPl => PromptState::hand_crafted(vlm, cfg.prompt.context_tokens)?,
                Method::ZeroShot => PromptState::init(
                    cfg.prompt.zero_shot_init,
                    vlm,
                    cfg.prompt.context_tokens,
                    mix64(cfg.seed, INIT_TAG, 1),
                )?,
                Method::FewShot | Method::Combined => match &cfg.prompt.few_shot_prompts {
                    Some(path) => {
                        let p = PromptState::from_tensor(&Tensor::read(path)?)?;
                        if p.token_dim() != vlm.dims().token_dim {
                            return Err(Error::dim(format!(
                                "{} holds {}-wide tokens, the model uses {}",
                                path.display(),
                                p.token_dim(),
                                vlm.dims().token_dim
                            )));
                        }
                        p
                    }
                    None => {
                        let result = train_few_shot(cfg, vlm, &data)?;
                        log(
                            "few_shot_trained",
                            &[
                                ("epochs", &result.loss_trace.len()),
                                ("first_loss", &result.loss_trace.first().copied().unwrap_or(f64::NAN)),
                                ("last_loss", &result.loss_trace.last().copied().unwrap_or(f64::NAN)),
                            ],
                        );
                        let p = result.prompts.clone();
                        few_shot = Some(result);
                        p
                    }
                },
            }),
            _ => None,
        };
        Ok(Runner {
            cfg: cfg.clone(),
            data,
            model,
            base_prompts,
            few_shot,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn data(&self) -> &Data {
        &self.data
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn few_shot(&self) -> Option<&FewShotResult> {
        self.few_shot.as_ref()
    }

    /// Test rows to certify: all of them, or a seeded subset of
    /// `max_samples` in ascending order.
    pub fn samples(&self) -> Vec<usize> {
        let n = self.data.test.len();
        match self.cfg.max_samples {
            Some(m) if m < n => {
                let mut rng = crate::seed::stream(self.cfg.seed, 0, SELECT_TAG);
                let mut picked = rand::seq::index::sample(&mut rng, n, m).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        }
    }

    /// Adaptation settings for test row `i`.
    pub fn adapt_config(&self, i: usize) -> ZeroShotConfig {
        self.cfg.zero_shot.with_seed(mix64(self.cfg.seed, i as u64, ADAPT_TAG))
    }

    /// The prompts test row `i` is certified with.
    pub fn prompts_for(&self, i: usize) -> Result<Option<PromptState>> {
        let (Model::Toy(vlm), Some(base)) = (&self.model, &self.base_prompts) else {
            return Ok(None);
        };
        Ok(Some(if self.cfg.method.adapts() {
            zero_shot_adapt(vlm, base, self.data.test.image(i), &self.adapt_config(i))?
        } else {
            base.clone()
        }))
    }

    fn certify_with(
        &self,
        f: &dyn BaseClassifier,
        i: usize,
        entropy: Option<f64>,
        todo: &[usize],
    ) -> Result<Vec<CertRecord>> {
        let x = self.data.test.image(i);
        let mut clean = Vec::with_capacity(1);
        f.evaluate(x, &mut clean).map_err(|source| Error::Classifier {
            sample_index: 0,
            source,
        })?;
        let noise = &self.cfg.noise;
        let mut out = Vec::with_capacity(todo.len());
        for &s in todo {
            let start = Instant::now();
            let spec = NoiseSpec {
                batch_size: noise.batch_size,
                ..NoiseSpec::new(noise.sigmas[s], noise.n0, noise.n, noise.alpha, mix64(self.cfg.seed, i as u64, s as u64))?
            };
            let outcome = certify(f, x, &spec)?;
            out.push(CertRecord {
                sample_index: i,
                true_label: self.data.test.labels[i],
                sigma: noise.sigmas[s],
                sigma_index: s,
                outcome: Some(outcome),
                clean_prediction: clean.first().copied(),
                entropy,
                wall_time_ms: self.cfg.record_timing.then(|| start.elapsed().as_secs_f64() * 1e3),
                error: None,
            });
        }
        Ok(out)
    }

    fn try_sample(&self, i: usize, todo: &[usize]) -> Result<Vec<CertRecord>> {
        match &self.model {
            Model::Toy(vlm) => {
                let prompts = self.prompts_for(i)?.expect("toy runs carry prompts");
                let entropy = noisy_entropy(vlm, &prompts, self.data.test.image(i), &self.adapt_config(i))?;
                let f = vlm.classifier(&prompts, self.cfg.zero_shot.tau)?;
                self.certify_with(&f, i, Some(entropy), todo)
            }
            Model::External(ext) => self.certify_with(ext, i, None, todo),
            Model::Linear(lin) => self.certify_with(lin, i, None, todo),
        }
    }

    /// Records for test row `i` at the noise-level indices `todo`. Failures
    /// become records carrying the error message.
    pub fn certify_sample(&self, i: usize, todo: &[usize]) -> Vec<CertRecord> {
        match self.try_sample(i, todo) {
            Ok(records) => records,
            Err(e) => {
                log("sample_failed", &[("sample", &i), ("error", &format!("{e:?}"))]);
                todo.iter()
                    .map(|&s| CertRecord {
                        sample_index: i,
                        true_label: self.data.test.labels[i],
                        sigma: self.cfg.noise.sigmas[s],
                        sigma_index: s,
                        outcome: None,
                        clean_prediction: None,
                        entropy: None,
                        wall_time_ms: None,
                        error: Some(e.to_string()),
                    })
                    .collect()
            }
        }
    }

    /// Certifies every selected sample at every noise level.
    ///
    /// With `out`, records are appended to `out/records.jsonl` as they are
    /// produced and samples already present there are skipped; the file is
    /// rewritten sorted once the run completes.
    pub fn run(&self, out: Option<&Path>) -> Result<Vec<CertRecord>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.workers.unwrap_or(0))
            .build()
            .map_err(|e| Error::config("workers", e.to_string()))?;
        let mut done = match out {
            Some(dir) => prepare_out_dir(dir, &self.cfg)?,
            None => Vec::new(),
        };
        let have: HashSet<(usize, usize)> = done.iter().map(CertRecord::key).collect();
        let num_sigmas = self.cfg.noise.sigmas.len();
        let work: Vec<(usize, Vec<usize>)> = self
            .samples()
            .into_iter()
            .map(|i| (i, (0..num_sigmas).filter(|&s| !have.contains(&(i, s))).collect::<Vec<_>>()))
            .filter(|(_, todo)| !todo.is_empty())
            .collect();
        log(
            "run_start",
            &[
                ("method", &self.cfg.method),
                ("samples", &self.samples().len()),
                ("sigmas", &num_sigmas),
                ("resumed_records", &done.len()),
                ("pending_samples", &work.len()),
            ],
        );

        let (tx, rx) = mpsc::channel::<CertRecord>();
        let writer = out.map(|dir| {
            let path = dir.join(RECORDS_FILE);
            thread::spawn(move || -> Result<()> {
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                let mut w = BufWriter::new(file);
                for record in rx {
                    let line = serde_json::to_string(&record).expect("records serialize");
                    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
                }
                Ok(())
            })
        });

        let fresh: Vec<CertRecord> = pool.install(|| {
            work.par_iter()
                .flat_map_iter(|(i, todo)| {
                    let records = self.certify_sample(*i, todo);
                    if writer.is_some() {
                        for r in &records {
                            let _ = tx.send(r.clone());
                        }
                    }
                    records
                })
                .collect()
        });
        drop(tx);
        if let Some(handle) = writer {
            handle.join().expect("record writer panicked")?;
        }

        done.extend(fresh);
        done.sort_by_key(CertRecord::key);
        if let Some(dir) = out {
            write_records(&dir.join(RECORDS_FILE), &done)?;
        }
        let failed = done.iter().filter(|r| r.error.is_some()).count();
        log("run_done", &[("records", &done.len()), ("failed", &failed)]);
        Ok(done)
    }
}

/// Loads and certifies in one call.
pub fn run_certification(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<CertRecord>> {
    Runner::new(cfg)?.run(out)
}

/// Reads complete records; a torn final line is ignored.
pub fn read_records(path: &Path) -> Result<Vec<CertRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut lines = BufReader::new(file).lines().peekable();
    let mut line_no = 0;
    while let Some(line) = lines.next() {
        line_no += 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => records.push(r),
            Err(_) if lines.peek().is_none() => break,
            Err(e) => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("line {line_no}: {e}"),
                })
            }
        }
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[CertRecord]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn prepare_out_dir(dir: &Path, cfg: &RunConfig) -> Result<Vec<CertRecord>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let run_path: PathBuf = dir.join(RUN_FILE);
    let run_json = serde_json::to_string_pretty(cfg).expect("config serializes") + "\n";
    let records_path = dir.join(RECORDS_FILE);
    if records_path.exists() {
        let previous = std::fs::read_to_string(&run_path).map_err(|e| Error::io(&run_path, e))?;
        let mut theirs: RunConfig = serde_json::from_str(&previous).map_err(|e| Error::Format {
            path: run_path.clone(),
            message: e.to_string(),
        })?;
        theirs.workers = cfg.workers;
        if &theirs != cfg {
            return Err(Error::config(
                "out",
                format!("{} holds records of a different configuration", dir.display()),
            ));
        }
        let records = read_records(&records_path)?;
        write_records(&records_path, &records)?;
        Ok(records)
    } else {
        std::fs::write(&run_path, run_json).map_err(|e| Error::io(&run_path, e))?;
        Ok(Vec::new())
    }
}
