use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use tempofit::config::RunConfig;
use tempofit::dataset::{load_examples, write_labels, DatasetManifest, Example, ManifestEntry};
use tempofit::gradcheck::{grad_check, model_cases, CheckOptions, DEFAULT_TOLERANCE};
use tempofit::metrics::{count_params, report_from_probs, DEFAULT_TOP_K};
use tempofit::model::Model;
use tempofit::synthetic::{self, SyntheticConfig, CLASS_NAMES};
use tempofit::training::{
    fit_with_early_stopping, load_checkpoint, save_checkpoint, split_dataset, Bucket, Precision, TrainConfig,
};
use tempofit::videoio::{preprocess, read_frame_dir, write_fseq, write_frame_png, DEFAULT_FRAMES};
use tempofit::{write_atomic, Real};

/// Movement recognition from sampled video frames.
#[derive(Parser)]
#[command(name = "tempofit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample, resize and normalize frame directories into FSEQ files.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FRAMES)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        side_small: usize,
        #[arg(long, default_value_t = 224)]
        side_large: usize,
        /// Resize straight to --side-large.
        #[arg(long)]
        single_stage: bool,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Train with early stopping; writes the best checkpoint and a CSV log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Score a checkpoint; writes metric and confusion-matrix CSVs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        topk: usize,
        /// Seed of the training run whose split is evaluated.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "metrics.csv")]
        report: PathBuf,
        #[arg(long, default_value = "confusion.csv")]
        confusion: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Finite-difference check of every block in the configured model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Elements checked per tensor.
        #[arg(long, default_value_t = 16)]
        samples: usize,
        /// Corrupts the analytic gradient of the named case.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Print total, trainable and non-trainable parameter counts.
    CountParams {
        #[arg(long)]
        config: PathBuf,
        /// List every tensor.
        #[arg(long)]
        verbose: bool,
    },
    /// Generate the moving-square toy dataset.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 25)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write PNG frame directories instead of FSEQ files.
        #[arg(long)]
        png: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Test,
    Val,
    Train,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("TEMPOFIT_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.trim().parse().with_context(|| format!("TEMPOFIT_THREADS={value}"))?;
    ensure!(threads >= 1, "TEMPOFIT_THREADS must be at least 1");
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Preprocess { manifest, out_dir, frames, side_small, side_large, single_stage, labels } => {
            let small = if single_stage { side_large } else { side_small };
            cmd_preprocess(&manifest, &out_dir, frames, small, side_large, labels.as_deref())
        }
        Command::Train { config, manifest, out, log, labels } => {
            cmd_train(&config, &manifest, &out, &log, labels.as_deref())
        }
        Command::Eval { checkpoint, manifest, split, topk, seed, report, confusion, labels } => {
            cmd_eval(&checkpoint, &manifest, split, topk, seed, &report, &confusion, labels.as_deref())
        }
        Command::Gradcheck { config, seed, tolerance, samples, corrupt } => {
            cmd_gradcheck(&config, seed, tolerance, samples, corrupt.as_deref())
        }
        Command::CountParams { config, verbose } => cmd_count_params(&config, verbose),
        Command::Synth { out_dir, per_class, seed, png } => cmd_synth(&out_dir, per_class, seed, png),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn output_name(index: usize, source: &Path) -> String {
    let stem = source.file_stem().and_then(|s| s.to_str()).unwrap_or("sample");
    format!("{index:05}_{stem}.fseq")
}

fn cmd_preprocess(
    manifest_path: &Path,
    out_dir: &Path,
    frames: usize,
    side_small: usize,
    side_large: usize,
    labels: Option<&Path>,
) -> Result<()> {
    ensure!(frames >= 1 && side_small >= 1 && side_large >= 1, "frames and sides must be positive");
    let manifest = DatasetManifest::load(manifest_path, labels).context("loading manifest")?;
    std::fs::create_dir_all(out_dir)?;
    let results: Vec<Result<PathBuf>> = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let stack = read_frame_dir(&entry.path)?;
            let seq = preprocess(&stack, frames, side_small, side_large)?;
            let out = out_dir.join(output_name(i, &entry.path));
            write_fseq(&seq, &out)?;
            Ok(out)
        })
        .collect();

    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for (entry, result) in manifest.entries.iter().zip(results) {
        match result {
            Ok(path) => entries.push(ManifestEntry { path, label: entry.label }),
            Err(e) => errors.push(format!("{}: {e:#}", entry.path.display())),
        }
    }
    let out_manifest = DatasetManifest { classes: manifest.classes.clone(), entries };
    write_text(&out_dir.join("manifest.csv"), &out_manifest.to_csv(out_dir)?)?;
    write_labels(&manifest.classes, &out_dir.join("labels.txt"))?;
    println!("preprocessed {} of {} samples into {}", out_manifest.entries.len(), manifest.entries.len(), out_dir.display());
    if !errors.is_empty() {
        for e in &errors {
            eprintln!("failed: {e}");
        }
        bail!("{} of {} samples failed", errors.len(), manifest.entries.len());
    }
    Ok(())
}

fn split_indices(labels: &[usize], classes: usize, seed: u64, split: Bucket) -> Result<Vec<usize>> {
    Ok(split_dataset(labels, classes, seed)?.indices(split))
}

fn cast_examples<F: Real>(data: Vec<Example>) -> Vec<Example<F>> {
    data.into_iter().map(|e| Example { input: e.input.cast(), label: e.label }).collect()
}

fn check_inputs(data: &[Example], expected: &[usize], what: &str) -> Result<()> {
    if let Some(e) = data.iter().find(|e| e.input.shape() != expected) {
        bail!("{what} sample has shape {:?}; the model expects {expected:?}", e.input.shape());
    }
    Ok(())
}

fn cmd_train(config_path: &Path, manifest_path: &Path, out: &Path, log: &Path, labels: Option<&Path>) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    config.require_train_keys()?;
    let labels = labels.map(Path::to_path_buf).or_else(|| config.labels.clone());
    let manifest = DatasetManifest::load(manifest_path, labels.as_deref()).context("loading manifest")?;
    manifest.check_paths()?;
    ensure!(
        manifest.num_classes() == config.model.num_classes,
        "config has num_classes = {} but the labels file lists {}",
        config.model.num_classes,
        manifest.num_classes()
    );
    let seed = config.train.seed;
    let split = split_dataset(&manifest.labels(), manifest.num_classes(), seed)?;
    let train = load_examples(&manifest, &split.indices(Bucket::Train))?;
    let val = load_examples(&manifest, &split.indices(Bucket::Val))?;
    let expected = config.model.input_shape();
    check_inputs(&train, &expected, "training")?;
    check_inputs(&val, &expected, "validation")?;
    eprintln!("train {} / val {} / test {} samples", train.len(), val.len(), split.indices(Bucket::Test).len());

    let (params, log_csv, best) = match config.train.precision {
        Precision::F32 => train_at::<f32>(&config, train, val)?,
        Precision::F64 => train_at::<f64>(&config, train, val)?,
    };
    save_checkpoint(&params, &config.model, out)?;
    write_text(log, &log_csv)?;
    println!(
        "best epoch {}: val_loss {:.6} val_acc {:.4}",
        best.epoch, best.val_loss, best.val_acc
    );
    Ok(())
}

fn train_at<F: Real>(
    config: &RunConfig,
    train: Vec<Example>,
    val: Vec<Example>,
) -> Result<(tempofit::nn::ParamStore<f32>, String, tempofit::training::EpochRow)> {
    let train = cast_examples::<F>(train);
    let val = cast_examples::<F>(val);
    let tc: &TrainConfig = &config.train;
    let mut model = Model::<F>::new(&config.model, tc.seed)?;
    let log = fit_with_early_stopping(&mut model, &train, &val, tc, |r| {
        eprintln!(
            "epoch {:>3}  train_loss {:.5}  train_acc {:.4}  val_loss {:.5}  val_acc {:.4}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        );
    })?;
    eprintln!("stopped: {}", log.stop_reason);
    Ok((model.params.cast(), log.to_csv(), log.best_row().clone()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    manifest_path: &Path,
    split: SplitArg,
    topk: usize,
    seed: u64,
    report_path: &Path,
    confusion_path: &Path,
    labels: Option<&Path>,
) -> Result<()> {
    let (params, model_config) =
        load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let model = Model::from_params(&model_config, &params).context("checkpoint does not match its config")?;
    let manifest = DatasetManifest::load(manifest_path, labels).context("loading manifest")?;
    manifest.check_paths()?;
    ensure!(
        manifest.num_classes() == model_config.num_classes,
        "checkpoint has {} classes but the labels file lists {}",
        model_config.num_classes,
        manifest.num_classes()
    );
    let labels = manifest.labels();
    let indices = match split {
        SplitArg::All => (0..labels.len()).collect(),
        SplitArg::Test => split_indices(&labels, manifest.num_classes(), seed, Bucket::Test)?,
        SplitArg::Val => split_indices(&labels, manifest.num_classes(), seed, Bucket::Val)?,
        SplitArg::Train => split_indices(&labels, manifest.num_classes(), seed, Bucket::Train)?,
    };
    let data = load_examples(&manifest, &indices)?;
    check_inputs(&data, &model_config.input_shape(), "evaluation")?;
    ensure!(topk >= 1, "--topk must be at least 1");
    let k = topk.min(model_config.num_classes);
    if k < topk {
        eprintln!("note: --topk {topk} exceeds {} classes; using {k}", model_config.num_classes);
    }
    let probs: Vec<Vec<f32>> = data.par_iter().map(|e| model.forward(&e.input)).collect::<tempofit::Result<_>>()?;
    let truth: Vec<usize> = data.iter().map(|e| e.label).collect();
    let (report, cm) = report_from_probs(&probs, &truth, model_config.num_classes, k)?;
    write_text(report_path, &report.to_csv(&manifest.classes))?;
    write_text(confusion_path, &cm.to_csv(&manifest.classes)?)?;
    println!(
        "samples {}  accuracy {:.4}  top_{k} {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}",
        report.samples,
        report.accuracy,
        report.top_k_accuracy,
        report.weighted.precision,
        report.weighted.recall,
        report.weighted.f1
    );
    Ok(())
}

fn cmd_gradcheck(config_path: &Path, seed: u64, tolerance: f64, samples: usize, corrupt: Option<&str>) -> Result<()> {
    ensure!(tolerance >= 0.0, "tolerance must be non-negative");
    let config = RunConfig::load(config_path)?;
    config.require_model_keys()?;
    let options = CheckOptions { max_per_tensor: samples.max(1), sample_seed: seed, ..Default::default() };
    let mut failed = Vec::new();
    for mut case in model_cases(&config.model, seed)? {
        if corrupt == Some(case.name.as_str()) {
            case = case.corrupted();
        }
        let report = grad_check(&case, tolerance, &options)?;
        let status = if report.passed { "PASS" } else { "FAIL" };
        let worst = report.worst().map(|t| t.name.as_str()).unwrap_or("-");
        println!("{status}  {:<28} max_rel_error {:.3e}  worst {worst}", report.name, report.max_rel_error);
        if !report.passed {
            failed.push(report.name);
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for: {}", failed.join(", "));
    }
    Ok(())
}

fn cmd_count_params(config_path: &Path, verbose: bool) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    config.require_model_keys()?;
    let model = Model::<f32>::new(&config.model, 0)?;
    if verbose {
        for p in model.params.iter() {
            let flag = if p.trainable { "trainable" } else { "frozen" };
            println!("{:<40} {:>10} {flag}", p.name, p.value.len());
        }
    }
    let count = count_params(&model);
    println!("total: {}", count.total);
    println!("trainable: {}", count.trainable);
    println!("non_trainable: {}", count.non_trainable);
    Ok(())
}

fn cmd_synth(out_dir: &Path, per_class: usize, seed: u64, png: bool) -> Result<()> {
    let config = SyntheticConfig { per_class, seed, ..Default::default() };
    let clips = synthetic::generate(&config)?;
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(clips.len());
    for (i, (seq, label)) in clips.iter().enumerate() {
        let name = format!("{i:04}_{}", CLASS_NAMES[*label]);
        let path = if png {
            let dir = out_dir.join(&name);
            std::fs::create_dir_all(&dir)?;
            for t in 0..seq.len() {
                write_frame_png(&synthetic::to_raw_frame(seq, t)?, &dir.join(format!("frame_{t:03}.png")))?;
            }
            dir
        } else {
            let path = out_dir.join(format!("{name}.fseq"));
            write_fseq(seq, &path)?;
            path
        };
        entries.push(ManifestEntry { path, label: *label });
    }
    let classes: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    let manifest = DatasetManifest { classes: classes.clone(), entries };
    write_text(&out_dir.join("manifest.csv"), &manifest.to_csv(out_dir)?)?;
    write_labels(&classes, &out_dir.join("labels.txt"))?;
    println!("wrote {} clips to {}", manifest.entries.len(), out_dir.display());
    Ok(())
}
