use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smoothcert::harness::dataset::{synthetic, write_dataset};
use smoothcert::harness::run::{load_data, load_model, train_few_shot, Model, RUN_FILE};
use smoothcert::harness::{
    ablation_sweep, curves_by_sigma, emit_report, log, read_records, AblationKind, DatasetConfig, LabeledCurve,
    Method, ModelConfig, ReportFormat, RunConfig, Runner,
};
use smoothcert::smoothing::{certify, LinearClassifier, NoiseSpec};
use smoothcert::toymodel::{linear_cases, linear_oracle, ToyDims, ToyVlm};
use smoothcert::Error;

#[derive(Parser)]
#[command(name = "smoothcert", version, about = "Randomized-smoothing certification with noise-aware prompts")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as a manifest and the matching toy model.
    SynthData,
    /// Train few-shot prompts and save them with their loss trace.
    TrainPrompts,
    /// Certify the test set and stream records to `<out>/records.jsonl`.
    Certify {
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        max_samples: Option<usize>,
    },
    /// Build curves and reports from a records file.
    Report {
        /// Defaults to `<out>/records.jsonl`.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "text-table")]
        format: Vec<ReportFormat>,
        /// Row label; defaults to the run's method.
        #[arg(long)]
        label: Option<String>,
    },
    /// Sweep one setting and report a curve per value.
    Ablate {
        #[arg(long)]
        kind: AblationKind,
        /// Comma-separated values; defaults to the kind's standard grid.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
    },
    /// Check certificates of random linear classifiers against their exact radii.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0.25)]
        sigma: f64,
        #[arg(long, default_value_t = 10)]
        dim: usize,
    },
}

fn load_config(g: &Global) -> smoothcert::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if g.workers.is_some() {
        cfg.workers = g.workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> smoothcert::Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, text: &str) -> smoothcert::Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn synth_data(cfg: &RunConfig, out: &Path) -> smoothcert::Result<()> {
    let DatasetConfig::Synthetic(synth) = &cfg.dataset else {
        return Err(Error::Config {
            path: "dataset.kind".into(),
            message: "synth-data needs a synthetic dataset".into(),
        });
    };
    let ModelConfig::Toy(toy) = &cfg.model else {
        return Err(Error::Config {
            path: "model.kind".into(),
            message: "synth-data writes a toy model".into(),
        });
    };
    let data = synthetic(synth)?;
    let manifest = write_dataset(&out.join("data"), &data)?;
    let dims = ToyDims {
        input_dim: synth.input_dim,
        embed_dim: toy.embed_dim,
        token_dim: toy.token_dim,
        num_classes: synth.num_classes,
    };
    let vlm = ToyVlm::aligned(dims, &data.test.class_means, toy.domain_shift, toy.init_seed)?;
    let model_dir = out.join("model");
    vlm.save(&model_dir)?;
    log(
        "synth_data",
        &[
            ("manifest", &manifest.display()),
            ("model", &model_dir.display()),
            ("test", &data.test.len()),
            ("train", &data.train.as_ref().map_or(0, |t| t.len())),
        ],
    );
    Ok(())
}

fn train_prompts(cfg: &RunConfig, out: &Path) -> smoothcert::Result<()> {
    let data = load_data(cfg)?;
    let Model::Toy(vlm) = load_model(cfg, &data)? else {
        return Err(Error::Config {
            path: "model.kind".into(),
            message: "prompts can only be trained for the toy model".into(),
        });
    };
    let result = train_few_shot(cfg, &vlm, &data)?;
    create_dir(out)?;
    let prompts = out.join("prompts.csmt");
    result.prompts.to_tensor()?.write(&prompts)?;
    let mut trace = String::from("epoch,mean_loss\n");
    for (epoch, loss) in result.loss_trace.iter().enumerate() {
        writeln!(trace, "{epoch},{loss}").unwrap();
    }
    write_file(&out.join("loss_trace.csv"), &trace)?;
    log(
        "prompts_trained",
        &[
            ("path", &prompts.display()),
            ("first_loss", &result.loss_trace.first().copied().unwrap_or(f64::NAN)),
            ("last_loss", &result.loss_trace.last().copied().unwrap_or(f64::NAN)),
        ],
    );
    Ok(())
}

fn report(
    cfg: &RunConfig,
    out: &Path,
    records: Option<PathBuf>,
    formats: &[ReportFormat],
    label: Option<String>,
) -> smoothcert::Result<()> {
    let records_path = records.unwrap_or_else(|| out.join("records.jsonl"));
    let run_path = records_path.with_file_name(RUN_FILE);
    let run = if run_path.exists() {
        RunConfig::load(&run_path)?
    } else {
        cfg.clone()
    };
    let records = read_records(&records_path)?;
    let (per_sigma, envelope) = curves_by_sigma(&records, &run.noise.sigmas, &run.radii)?;
    let label = label.unwrap_or_else(|| run.method.to_string());
    create_dir(out)?;
    let per_sigma: Vec<LabeledCurve> = per_sigma
        .into_iter()
        .map(|points| LabeledCurve {
            method: label.clone(),
            points,
        })
        .collect();
    emit_report(&per_sigma, ReportFormat::Csv, &out.join("per_sigma.csv"))?;
    let curve = [LabeledCurve {
        method: label,
        points: envelope,
    }];
    for &format in formats {
        let path = out.join(format!("report.{}", format.extension()));
        emit_report(&curve, format, &path)?;
        log("report_written", &[("path", &path.display())]);
    }
    if formats.contains(&ReportFormat::TextTable) {
        print!("{}", smoothcert::harness::report::to_text_table(&curve));
    }
    Ok(())
}

fn oracle_check(count: usize, sigma: f64, dim: usize, seed: u64) -> smoothcert::Result<bool> {
    let (mut certified, mut unsound, mut loose) = (0usize, 0usize, 0usize);
    for (i, case) in linear_cases(count, dim, 3.0 * sigma, seed).iter().enumerate() {
        let f = LinearClassifier::binary(&case.w, case.b)?;
        let oracle = linear_oracle(&case.w, case.b, &case.x, sigma)?;
        let outcome = certify(&f, &case.x, &NoiseSpec::new(sigma, 100, 10_000, 0.001, i as u64)?)?;
        if let (Some(label), Some(radius)) = (outcome.label(), outcome.radius()) {
            certified += 1;
            if label != oracle.majority_class || radius > oracle.true_radius + 1e-9 {
                unsound += 1;
            }
            if radius < 0.5 * oracle.true_radius {
                loose += 1;
            }
        }
    }
    let tight = 1.0 - loose as f64 / certified.max(1) as f64;
    let ok = unsound == 0 && tight >= 0.99;
    log(
        "oracle_check",
        &[
            ("inputs", &count),
            ("certified", &certified),
            ("unsound", &unsound),
            ("tight_share", &tight),
            ("ok", &ok),
        ],
    );
    Ok(ok)
}

fn run(cli: Cli) -> smoothcert::Result<ExitCode> {
    let out = cli.global.out.clone();
    match cli.command {
        Command::OracleCheck { count, sigma, dim } => {
            let seed = cli.global.seed.unwrap_or(0);
            return Ok(if oracle_check(count, sigma, dim, seed)? {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            });
        }
        Command::SynthData => synth_data(&load_config(&cli.global)?, &out)?,
        Command::TrainPrompts => train_prompts(&load_config(&cli.global)?, &out)?,
        Command::Certify { method, max_samples } => {
            let mut cfg = load_config(&cli.global)?;
            if let Some(m) = method {
                cfg.method = m;
            }
            if max_samples.is_some() {
                cfg.max_samples = max_samples;
            }
            cfg.validate()?;
            let runner = Runner::new(&cfg)?;
            let records = runner.run(Some(&out))?;
            if records.iter().any(|r| r.error.is_some()) {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report { records, format, label } => {
            report(&load_config(&cli.global)?, &out, records, &format, label)?
        }
        Command::Ablate { kind, grid } => {
            let cfg = load_config(&cli.global)?;
            let grid = if grid.is_empty() {
                kind.default_grid()
            } else {
                grid.iter().map(|s| kind.parse_setting(s)).collect::<smoothcert::Result<_>>()?
            };
            ablation_sweep(&cfg, kind, &grid, Some(&out))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            log("error", &[("message", &e)]);
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
