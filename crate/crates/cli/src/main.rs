//! `lit4`: cost analysis, synthetic data, training, prediction and gradient
//! checks for the lightweight VQA model.
//!
//! Exit codes: 0 success, 1 internal failure, 2 usage/config/format/io
//! errors, 3 numeric failures (non-finite values, divergence, failed
//! gradient checks).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use lit4_core::archive::WeightArchive;
use lit4_core::config::{ModelConfig, ResolvedConfig};
use lit4_core::cost::{cost_report, verify_against_runtime};
use lit4_core::data::{AnswerVocab, Dataset};
use lit4_core::gradcheck::suite::{block_suite, end_to_end, op_suite, SuiteResult};
use lit4_core::gradcheck::GradCheckOptions;
use lit4_core::image::ImageInput;
use lit4_core::model::VqaModel;
use lit4_core::synth::{generate_synthetic, SynthConfig};
use lit4_core::text::{tokenize, Vocab};
use lit4_core::train::{evaluate, prepare, trace_csv, train, EvalMetrics};
use lit4_core::Error;

#[derive(Parser)]
#[command(name = "lit4", version, about = "Lightweight transformer VQA toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Tsv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and FLOP breakdown of a model config.
    Analyze {
        config: PathBuf,
        /// Image side length (defaults to the config's input size).
        #[arg(long)]
        input_size: Option<usize>,
        #[arg(long, value_enum, default_value = "tsv")]
        format: Format,
        /// Also build the model and compare the analytic parameter counts
        /// with the instantiated tensors.
        #[arg(long)]
        verify: bool,
    },
    /// Write a synthetic dataset (manifest, vocab, answers, images).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        test_count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 2)]
        max_present: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
    },
    /// Train from scratch; writes a weight archive and a loss trace.
    Train {
        config: PathBuf,
        /// Dataset manifest or the directory holding `manifest.json`.
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Loss trace CSV (defaults to `<out>.trace.csv`).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Answer one question about one image.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// L4IM raster.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        answers: PathBuf,
        /// Print the whole answer distribution.
        #[arg(long)]
        all: bool,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Model config for `--end-to-end`.
        config: Option<PathBuf>,
        /// Every tape op and network block.
        #[arg(long)]
        ops: bool,
        /// The whole model built from `config`.
        #[arg(long)]
        end_to_end: bool,
        /// Coordinates checked per tensor in end-to-end mode.
        #[arg(long, default_value_t = 4)]
        coords: usize,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Test hook: scale the backward of this op by 1.001.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } | Error::Diverged { .. } => 3,
            Error::Internal(_) | Error::Contract(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    let result = match cli.command {
        Command::Analyze {
            config,
            input_size,
            format,
            verify,
        } => analyze(&config, input_size, format, verify),
        Command::Synth {
            out,
            count,
            test_count,
            seed,
            classes,
            max_present,
            image_size,
        } => synth(
            &out,
            count,
            test_count,
            seed,
            SynthConfig {
                classes,
                max_present,
                image_size,
            },
        ),
        Command::Train {
            config,
            manifest,
            out,
            seed,
            trace,
            format,
        } => run_train(&config, &manifest, &out, seed, trace, format),
        Command::Predict {
            config,
            weights,
            image,
            question,
            vocab,
            answers,
            all,
            format,
        } => predict(&config, &weights, &image, &question, &vocab, &answers, all, format),
        Command::Gradcheck {
            config,
            ops,
            end_to_end,
            coords,
            format,
            corrupt,
        } => gradcheck(config.as_deref(), ops, end_to_end, coords, format, corrupt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// `LIT4_THREADS` caps the worker pool.
fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var("LIT4_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("LIT4_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("cannot start {n} worker threads: {e}")))
}

fn load_config(path: &Path) -> Result<ResolvedConfig, Failure> {
    let cfg = ModelConfig::load(path).map_err(|e| with_path(path, e))?;
    cfg.resolve().map_err(|e| with_path(path, e))
}

fn with_path(path: &Path, e: Error) -> Failure {
    let mut f = Failure::from(e);
    f.message = format!("{}: {}", path.display(), f.message);
    f
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serialises"));
}

fn analyze(path: &Path, input_size: Option<usize>, format: Format, verify: bool) -> CliResult {
    let cfg = load_config(path)?;
    let report = cost_report(&cfg, input_size)?;
    let comparison = if verify {
        let store = VqaModel::new(&cfg)?.init::<f32>(cfg.train.seed)?;
        Some(verify_against_runtime(&report, &store))
    } else {
        None
    };
    match format {
        Format::Json => {
            let mut v: serde_json::Value = serde_json::from_str(&report.to_json()).expect("report json");
            if let Some(c) = &comparison {
                v["runtime_check"] = serde_json::to_value(c).expect("comparison serialises");
            }
            print_json(&v);
        }
        Format::Tsv | Format::Text => {
            print!("{}", report.to_tsv());
            if let Some(c) = &comparison {
                println!(
                    "# runtime check: analytic {} runtime {} -> {}",
                    c.analytic_total,
                    c.runtime_total,
                    if c.matches() { "match" } else { "MISMATCH" }
                );
            }
        }
    }
    if comparison.is_some_and(|c| !c.matches()) {
        return Err(Failure {
            code: 1,
            message: "analytic parameter count disagrees with the instantiated model".into(),
        });
    }
    Ok(())
}

fn synth(out: &Path, count: usize, test_count: usize, seed: u64, cfg: SynthConfig) -> CliResult {
    let ds = generate_synthetic(count, test_count, &cfg, seed)?;
    ds.save(out)?;
    println!(
        "wrote {} train and {} test samples ({} answers) to {}",
        ds.train.len(),
        ds.test.len(),
        ds.answers.len(),
        out.display()
    );
    Ok(())
}

/// Checks that a dataset fits the model and pads smaller images.
fn fit_dataset(ds: &mut Dataset, cfg: &ResolvedConfig) -> CliResult {
    if ds.answers.len() != cfg.fusion.n_answers {
        return Err(Error::config(
            "head.answers",
            format!(
                "dataset has {} answers, config expects {}",
                ds.answers.len(),
                cfg.fusion.n_answers
            ),
        )
        .into());
    }
    if ds.vocab.len() > cfg.text.vocab_size {
        return Err(Error::config(
            "text_encoder.vocab_size",
            format!(
                "dataset vocabulary has {} tokens, config allows {}",
                ds.vocab.len(),
                cfg.text.vocab_size
            ),
        )
        .into());
    }
    let size = cfg.image.input_size();
    for s in ds.train.iter_mut().chain(ds.test.iter_mut()) {
        if s.image.size() < size {
            s.image = s.image.padded_to(size)?;
        }
    }
    Ok(())
}

fn run_train(
    config: &Path,
    manifest: &Path,
    out: &Path,
    seed: Option<u64>,
    trace: Option<PathBuf>,
    format: Format,
) -> CliResult {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let mut ds = Dataset::load(manifest).map_err(|e| with_path(manifest, e))?;
    fit_dataset(&mut ds, &cfg)?;
    let model = VqaModel::new(&cfg)?;
    let mut store = model.init::<f32>(cfg.train.seed)?;
    let train_data = prepare(&ds.train, &ds.vocab, cfg.text.max_len)?;
    let rows = train(&model, &mut store, &train_data, &cfg.train)?;

    WeightArchive::from_store(&store).save(out)?;
    let trace_path = trace.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".trace.csv");
        PathBuf::from(p)
    });
    std::fs::write(&trace_path, trace_csv(&rows)).map_err(|e| with_path(&trace_path, e.into()))?;

    let train_metrics = evaluate(&model, &store, &train_data)?;
    let test_metrics = if ds.test.is_empty() {
        None
    } else {
        Some(evaluate(
            &model,
            &store,
            &prepare(&ds.test, &ds.vocab, cfg.text.max_len)?,
        )?)
    };
    let final_loss = rows.last().map(|r| r.loss);
    match format {
        Format::Json => print_json(&json!({
            "steps": rows.len(),
            "final_loss": final_loss,
            "weights": out.display().to_string(),
            "trace": trace_path.display().to_string(),
            "train": train_metrics,
            "test": test_metrics,
        })),
        _ => {
            println!("steps\t{}", rows.len());
            if let Some(l) = final_loss {
                println!("final_loss\t{l:.6}");
            }
            print_metrics("train", &train_metrics);
            match &test_metrics {
                Some(m) => print_metrics("test", m),
                None => println!("test\tno held-out samples"),
            }
            println!("weights\t{}", out.display());
            println!("trace\t{}", trace_path.display());
        }
    }
    Ok(())
}

fn print_metrics(split: &str, m: &EvalMetrics) {
    println!("{split}\toverall_accuracy\t{:.4}", m.overall_accuracy);
    println!("{split}\taverage_accuracy\t{:.4}", m.average_accuracy);
    for (t, a) in &m.per_type_accuracy {
        let c = &m.per_type[t];
        println!("{split}\t{t}\t{a:.4}\t({}/{})", c.correct, c.total);
    }
}

#[allow(clippy::too_many_arguments)]
fn predict(
    config: &Path,
    weights: &Path,
    image: &Path,
    question: &str,
    vocab: &Path,
    answers: &Path,
    all: bool,
    format: Format,
) -> CliResult {
    let cfg = load_config(config)?;
    let model = VqaModel::new(&cfg)?;
    let mut store = model.init::<f32>(0)?;
    WeightArchive::load(weights)
        .and_then(|a| a.load_into(&mut store))
        .map_err(|e| with_path(weights, e))?;
    let vocab = Vocab::load(vocab)?;
    let answers = AnswerVocab::load(answers, Some(cfg.fusion.n_answers))?;
    let mut img = ImageInput::load(image).map_err(|e| with_path(image, e))?;
    if img.size() < cfg.image.input_size() {
        img = img.padded_to(cfg.image.input_size())?;
    }
    let seq = tokenize(question, &vocab, cfg.text.max_len)?;
    let dist = model.predict(&store, &seq, &img)?;
    let (id, p) = dist.top();
    let name = |i: usize| answers.answer(i).unwrap_or("?").to_string();
    match format {
        Format::Json => {
            let mut v = json!({ "answer": name(id), "id": id, "probability": p });
            if all {
                v["distribution"] = dist
                    .probs
                    .iter()
                    .enumerate()
                    .map(|(i, &q)| json!({ "answer": name(i), "probability": q }))
                    .collect();
            }
            print_json(&v);
        }
        _ => {
            println!("{}\t{p:.6}", name(id));
            if all {
                for (i, &q) in dist.probs.iter().enumerate() {
                    println!("{i}\t{}\t{q:.6}", name(i));
                }
            }
        }
    }
    Ok(())
}

fn gradcheck(
    config: Option<&Path>,
    ops: bool,
    e2e: bool,
    coords: usize,
    format: Format,
    corrupt: Option<String>,
) -> CliResult {
    if !ops && !e2e {
        return Err(usage("gradcheck needs --ops and/or --end-to-end"));
    }
    // The fault hook wants a 'static op name.
    let fault = corrupt.map(|op| (&*Box::leak(op.into_boxed_str()), 1.001));
    let opts = GradCheckOptions::default();
    let mut results: Vec<SuiteResult> = Vec::new();
    if ops {
        results.extend(op_suite(fault, &opts)?);
        results.extend(block_suite(fault, &opts)?);
    }
    if e2e {
        let path = config.ok_or_else(|| usage("--end-to-end needs a config path"))?;
        let cfg = load_config(path)?;
        let o = GradCheckOptions {
            max_coords: Some(coords.max(1)),
            ..opts.clone()
        };
        results.push(end_to_end(&cfg, fault, &o)?);
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    match format {
        Format::Json => print_json(&json!({
            "tolerance": opts.tolerance,
            "passed": failed.is_empty(),
            "checks": results.iter().map(|r| json!({
                "name": r.name,
                "max_rel_err": r.report.max_rel_err(),
                "worst_input": r.report.worst().map(|w| w.0),
                "coords": r.report.coords_checked,
                "passed": r.passed(),
            })).collect::<Vec<_>>(),
        })),
        _ => {
            println!("check\tmax_rel_err\tstatus");
            for r in &results {
                println!(
                    "{}\t{:.3e}\t{}",
                    r.name,
                    r.report.max_rel_err(),
                    if r.passed() { "PASS" } else { "FAIL" }
                );
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: format!("gradient check failed: {}", failed.join(", ")),
        })
    }
}
