//! Command-line front end: data generation, three-stage cross-validated
//! training, holdout evaluation, and ensemble prediction.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
//! error, 5 inference error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ordigrade::config::{load_config, DataSection, RunConfig};
use ordigrade::data::{
    generate_synthetic, image_to_tensor, load_kaggle_csv, save_dataset, Dataset, GradedSample,
    SyntheticConfig,
};
use ordigrade::ensemble::{ensemble_predict, predictions_to_csv, raw_column_names, EnsembleConfig};
use ordigrade::metrics::report;
use ordigrade::nn::{load_checkpoint, ThreeHeadModel};
use ordigrade::preprocess::{preprocess, PreprocessConfig};
use ordigrade::train::run_cv;
use ordigrade::{Error, Result};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_TRAIN: u8 = 4;
const EXIT_INFER: u8 = 5;

#[derive(Parser)]
#[command(name = "ordigrade", about = "Ordinal fundus-image grading pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graded-image dataset on disk.
    GenData(GenDataArgs),
    /// Run the full three-stage cross-validated training protocol.
    Train(TrainArgs),
    /// Evaluate the trained fold ensemble on the untouched holdout split.
    Evaluate(EvalArgs),
    /// Predict grades for a directory of images.
    Predict(PredictArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for labels.csv and the PNG images.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Source domain preset: `a` or `b`.
    #[arg(long, default_value = "a")]
    domain: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    /// Overwrite the output directory if it already exists.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the number of fold worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overwrite the output directory if it already exists.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory holding the trained checkpoints; defaults to the
    /// configured output directory.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Evaluate a single fold's checkpoint instead of the full ensemble.
    #[arg(long)]
    fold: Option<usize>,
    /// Disable test-time augmentation (identity transform only).
    #[arg(long)]
    no_tta: bool,
    /// Override the trimmed-mean fraction.
    #[arg(long)]
    trim: Option<f64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Directory of PNG/JPEG images to grade.
    #[arg(long)]
    images: PathBuf,
    /// Output CSV path; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include one raw-score column per (model, transform) pair.
    #[arg(long)]
    emit_raw: bool,
    #[arg(long)]
    no_tta: bool,
    #[arg(long)]
    trim: Option<f64>,
    #[arg(long)]
    fold: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Predict(args) => cmd_predict(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, err)) => {
            eprintln!("error: {err}");
            ExitCode::from(code)
        }
    }
}

type CmdResult = std::result::Result<(), (u8, Error)>;

fn code_for(err: &Error, phase: u8) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_)
        | Error::MissingImage { .. }
        | Error::GradeOutOfRange { .. }
        | Error::CsvParse { .. } => EXIT_DATA,
        _ => phase,
    }
}

fn phase<T>(result: Result<T>, code: u8) -> std::result::Result<T, (u8, Error)> {
    result.map_err(|e| {
        let c = code_for(&e, code);
        (c, e)
    })
}

/// ORDIGRADE_SEED overrides the configured seed.
fn effective_seed(cfg: &RunConfig) -> std::result::Result<u64, (u8, Error)> {
    match std::env::var("ORDIGRADE_SEED") {
        Ok(v) => v.parse().map_err(|_| {
            (EXIT_CONFIG, Error::Config(format!("ORDIGRADE_SEED is not an integer: '{v}'")))
        }),
        Err(_) => Ok(cfg.seed),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> CmdResult {
    let mut cfg = match args.domain.as_str() {
        "a" => SyntheticConfig::domain_a(args.n, args.seed),
        "b" => SyntheticConfig::domain_b(args.n, args.seed),
        other => {
            return Err((
                EXIT_CONFIG,
                Error::Config(format!("unknown domain '{other}', expected 'a' or 'b'")),
            ))
        }
    };
    cfg.image_size = args.image_size;
    if args.out.exists() && !args.force {
        return Err((
            EXIT_CONFIG,
            Error::Config(format!(
                "output directory {} exists; pass --force to overwrite",
                args.out.display()
            )),
        ));
    }
    let dataset: Dataset<f64> = phase(generate_synthetic(&cfg), EXIT_DATA)?;
    let manifest = format!(
        "domain={}\nn={}\nseed={}\nimage_size={}\n",
        cfg.domain_tag, cfg.n, cfg.seed, cfg.image_size
    );
    phase(
        save_dataset(&dataset, &args.out, &ordigrade::data::CsvSchema::default(), &manifest),
        EXIT_DATA,
    )?;
    println!("wrote {} samples to {}", dataset.len(), args.out.display());
    Ok(())
}

fn preprocess_dataset(ds: Dataset<f64>, size: usize) -> Result<Dataset<f64>> {
    let pp = PreprocessConfig { crop_threshold: 7.0 / 255.0, target_size: (size, size) };
    let tag = ds.domain_tag.clone();
    let mut samples = Vec::with_capacity(ds.len());
    for s in ds.samples {
        samples.push(GradedSample {
            pixels: preprocess(&s.pixels, &pp)?,
            id: s.id,
            grade: s.grade,
        });
    }
    Dataset::new(samples, &tag)
}

/// Pretraining-domain and main-domain datasets per the config, after any
/// configured preprocessing.
fn load_datasets(cfg: &RunConfig, seed: u64) -> Result<(Dataset<f64>, Dataset<f64>)> {
    match &cfg.data {
        DataSection::Synthetic { n_pretrain, n_main, image_size, preprocess_size } => {
            let mut a = SyntheticConfig::domain_a(*n_pretrain, seed);
            a.image_size = *image_size;
            let mut b = SyntheticConfig::domain_b(*n_main, seed.wrapping_add(1));
            b.image_size = *image_size;
            let mut pre = generate_synthetic(&a)?;
            let mut main = generate_synthetic(&b)?;
            if let Some(size) = preprocess_size {
                pre = preprocess_dataset(pre, *size)?;
                main = preprocess_dataset(main, *size)?;
            }
            Ok((pre, main))
        }
        DataSection::Csv {
            pretrain_labels,
            pretrain_images,
            main_labels,
            main_images,
            preprocess_size,
            ..
        } => {
            let schema = cfg.data.csv_schema();
            let pre = load_kaggle_csv(pretrain_labels, pretrain_images, &schema, "pretrain")?;
            let main = load_kaggle_csv(main_labels, main_images, &schema, "main")?;
            Ok((
                preprocess_dataset(pre, *preprocess_size)?,
                preprocess_dataset(main, *preprocess_size)?,
            ))
        }
    }
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let cfg = phase(load_config(&args.config), EXIT_CONFIG)?;
    let seed = effective_seed(&cfg)?;
    if cfg.output_dir.exists() && !args.force {
        return Err((
            EXIT_CONFIG,
            Error::Config(format!(
                "output directory {} exists; pass --force to overwrite",
                cfg.output_dir.display()
            )),
        ));
    }
    let mut train_cfg = cfg.train.to_train_config(seed);
    if let Some(jobs) = args.jobs {
        train_cfg.jobs = jobs;
    }
    phase(train_cfg.validate(), EXIT_CONFIG)?;
    let (pre, main) = phase(load_datasets(&cfg, seed), EXIT_DATA)?;
    println!(
        "training: {} pretrain samples, {} main samples, {} folds",
        pre.len(),
        main.len(),
        train_cfg.n_folds
    );
    let outcome = phase(run_cv(&pre, &main, &train_cfg, &cfg.output_dir), EXIT_TRAIN)?;
    for (fold, q) in outcome.fold_qwks.iter().enumerate() {
        println!("fold {fold}: validation qwk {q:.4}");
    }
    println!(
        "cross-validation qwk: {:.4} +/- {:.4}",
        outcome.mean_qwk, outcome.std_qwk
    );
    println!("checkpoints and run_manifest.csv in {}", cfg.output_dir.display());
    Ok(())
}

fn ensemble_settings(
    cfg: &RunConfig,
    no_tta: bool,
    trim: Option<f64>,
    emit_raw: bool,
) -> Result<EnsembleConfig> {
    let mut ens = cfg.ensemble.to_ensemble_config()?;
    if no_tta {
        ens.tta = vec![ordigrade::augment::Transform::Identity];
    }
    if let Some(t) = trim {
        ens.trim = t;
    }
    ens.emit_raw = ens.emit_raw || emit_raw;
    ens.validate()?;
    Ok(ens)
}

fn load_fold_models(
    run_dir: &Path,
    n_folds: usize,
    fold: Option<usize>,
) -> Result<Vec<ThreeHeadModel<f64>>> {
    let folds: Vec<usize> = match fold {
        Some(f) => {
            if f >= n_folds {
                return Err(Error::Config(format!(
                    "fold {f} out of range for {n_folds} folds"
                )));
            }
            vec![f]
        }
        None => (0..n_folds).collect(),
    };
    folds
        .iter()
        .map(|f| load_checkpoint(&run_dir.join(format!("stage_post_fold_{f}.ckpt"))))
        .collect()
}

fn cmd_evaluate(args: EvalArgs) -> CmdResult {
    let cfg = phase(load_config(&args.config), EXIT_CONFIG)?;
    let seed = effective_seed(&cfg)?;
    let run_dir = args.run_dir.unwrap_or_else(|| cfg.output_dir.clone());
    let ens = phase(ensemble_settings(&cfg, args.no_tta, args.trim, false), EXIT_CONFIG)?;
    let train_cfg = cfg.train.to_train_config(seed);
    let (_, main) = phase(load_datasets(&cfg, seed), EXIT_DATA)?;
    // The split is a pure function of the dataset, fold count, fraction and
    // seed, so the holdout recomputed here is the one training never saw.
    let split = phase(
        ordigrade::data::split_folds(&main, train_cfg.n_folds, train_cfg.holdout_fraction, seed),
        EXIT_DATA,
    )?;
    let holdout_samples: Vec<_> = main
        .samples
        .iter()
        .filter(|s| split.holdout_ids.contains(&s.id))
        .cloned()
        .collect();
    let holdout = phase(Dataset::new(holdout_samples, &main.domain_tag), EXIT_DATA)?;
    let models = phase(load_fold_models(&run_dir, train_cfg.n_folds, args.fold), EXIT_INFER)?;
    let records = phase(ensemble_predict(&models, &holdout, &ens), EXIT_INFER)?;
    let truth: Vec<u8> = holdout.samples.iter().map(|s| s.grade.value()).collect();
    let pred: Vec<u8> = records.iter().map(|r| r.grade.value()).collect();
    let mode = phase(cfg.metrics.to_mode(), EXIT_CONFIG)?;
    let rep = phase(report(&truth, &pred, mode), EXIT_INFER)?;
    print!("{}", rep.to_key_value());
    let metrics_path = run_dir.join("holdout_metrics.txt");
    if let Err(e) = std::fs::write(&metrics_path, rep.to_key_value()) {
        return Err((EXIT_INFER, Error::io(&metrics_path, e)));
    }
    Ok(())
}

fn load_image_dir(dir: &Path) -> Result<Vec<(String, ordigrade::Tensor64)>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("jpg") | Some("jpeg")
            )
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Data(format!("no images found in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(entries.len());
    for path in entries {
        let img = image::open(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?
            .to_rgb8();
        let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        out.push((id, image_to_tensor(&img)));
    }
    Ok(out)
}

fn cmd_predict(args: PredictArgs) -> CmdResult {
    let cfg = phase(load_config(&args.config), EXIT_CONFIG)?;
    let seed = effective_seed(&cfg)?;
    let run_dir = args.run_dir.unwrap_or_else(|| cfg.output_dir.clone());
    let ens = phase(
        ensemble_settings(&cfg, args.no_tta, args.trim, args.emit_raw),
        EXIT_CONFIG,
    )?;
    let train_cfg = cfg.train.to_train_config(seed);
    let models = phase(load_fold_models(&run_dir, train_cfg.n_folds, args.fold), EXIT_INFER)?;

    let size = match &cfg.data {
        DataSection::Synthetic { preprocess_size, image_size, .. } => {
            preprocess_size.unwrap_or(*image_size)
        }
        DataSection::Csv { preprocess_size, .. } => *preprocess_size,
    };
    let images = phase(load_image_dir(&args.images), EXIT_DATA)?;
    let pp = PreprocessConfig { crop_threshold: 7.0 / 255.0, target_size: (size, size) };
    let mut samples = Vec::with_capacity(images.len());
    for (id, pixels) in images {
        let pixels = phase(preprocess(&pixels, &pp), EXIT_DATA)?;
        samples.push(GradedSample { id, pixels, grade: ordigrade::data::Grade::new(0).unwrap() });
    }
    let dataset = phase(Dataset::new(samples, "predict"), EXIT_DATA)?;
    let records = phase(ensemble_predict(&models, &dataset, &ens), EXIT_INFER)?;
    let raw_names =
        ens.emit_raw.then(|| raw_column_names(models.len(), &ens.tta));
    let csv = predictions_to_csv(&records, raw_names.as_deref());
    match args.out {
        Some(path) => {
            if let Err(e) = std::fs::write(&path, csv) {
                return Err((EXIT_INFER, Error::io(&path, e)));
            }
            println!("wrote {} predictions to {}", records.len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
