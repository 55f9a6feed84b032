//! Command-line front end: synthesize data, train, cross-validate, evaluate,
//! explain, extract shallow features, and count parameters.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use image::RgbImage;
use serde_json::json;

use adenet::data::{
    crop_insulators, kfold, load_manifest, load_sidecar, stratified_holdout, synth_dataset,
    to_gray_square, DataError, DatasetManifest, SplitPlan, SynthConfig,
};
use adenet::explain::{gradcam, heatmap_csv, localization_score, overlay, Upsample};
use adenet::metrics::{
    aggregate_folds, confusion, emit_report, emit_roc_csv, metrics_from_confusion, roc_auc,
    ConfusionMatrix2, MetricsReport, ReportFormat,
};
use adenet::model::{
    build_adenet, build_lenet5, count_params, load_checkpoint, save_checkpoint, ModelGraph,
};
use adenet::shallow::{
    extract_features_batch, forest_predict, save_forest, train_forest, ForestConfig,
};
use adenet::tensor::Tensor;
use adenet::train::{evaluate, train, EarlyStopping, OptimizerKind, TrainConfig, TrainError, TrainSample};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "adenet", version, about = "Insulator-defect classification toolkit")]
struct Cli {
    /// Master seed for every stochastic stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Make outputs bit-reproducible (zeroes wall-clock fields in reports).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Emit diagnostics as JSON lines on stderr.
    #[arg(long, global = true)]
    json_logs: bool,
    /// Flat key=value file providing flag defaults (command line wins).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Arch {
    Adenet,
    AdenetNobn,
    Lenet5,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TargetClass {
    Damaged,
    Undamaged,
    Predicted,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutputFormat {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic insulator dataset with ground-truth defect boxes.
    Synth {
        /// Number of images.
        #[arg(long, default_value_t = 600)]
        n: usize,
        /// Fraction of images containing a defect.
        #[arg(long, default_value_t = 1.0 / 3.0)]
        damaged_ratio: f64,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 80)]
        image_size: u32,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on a stratified holdout split.
    Train {
        /// Dataset directory (containing manifest.csv) or a manifest path.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Arch::Adenet)]
        arch: Arch,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, value_enum, default_value_t = Optimizer::Adam)]
        optimizer: Optimizer,
        #[arg(long, default_value_t = 1e-3)]
        lr: f32,
        /// Fraction of each class kept for training; the rest validates.
        #[arg(long, default_value_t = 0.8)]
        train_frac: f64,
        #[arg(long)]
        early_stopping: bool,
        #[arg(long, default_value_t = 3)]
        patience: usize,
        /// Weight the loss by inverse class frequency.
        #[arg(long)]
        class_weights: bool,
        /// Checkpoint output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validation metrics report (JSON) path; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Training history (JSON) path.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Stratified k-fold cross-validation; reports the fold-mean metrics and
    /// the pooled confusion matrix.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Arch::Adenet)]
        arch: Arch,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, value_enum, default_value_t = Optimizer::Adam)]
        optimizer: Optimizer,
        #[arg(long, default_value_t = 1e-3)]
        lr: f32,
        #[arg(long)]
        class_weights: bool,
        /// Also run the batch-norm-free variant and report the delta.
        #[arg(long)]
        ablate_bn: bool,
        /// Report output path; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
        format: OutputFormat,
        /// Report output path; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Optional ROC curve CSV output.
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Render a Grad-CAM overlay for one crop.
    Gradcam {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Record index within the manifest.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value_t = TargetClass::Damaged)]
        target: TargetClass,
        #[arg(long, default_value_t = 0.4)]
        alpha: f32,
        /// Nearest-neighbor upsampling for exact-cell debugging.
        #[arg(long)]
        nearest: bool,
        /// Overlay PNG output path.
        #[arg(long)]
        out: PathBuf,
        /// Optional raw-heatmap CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Extract the 68-feature shallow descriptors to a CSV cache.
    Features {
        #[arg(long)]
        data: PathBuf,
        /// Feature cache CSV output.
        #[arg(long)]
        out: PathBuf,
        /// Also train a random forest on the features and save it as JSON.
        #[arg(long)]
        forest: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trees: usize,
    },
    /// Print the trainable / non-trainable parameter counts for an
    /// architecture.
    Params {
        #[arg(long, value_enum, default_value_t = Arch::Adenet)]
        arch: Arch,
    },
}

/// An error carrying its process exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }
    fn data(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: msg.into(),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::NumericAbort { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

macro_rules! from_data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::data(e.to_string())
            }
        }
    )*};
}
from_data_error!(
    adenet::nn::NnError,
    adenet::metrics::MetricsError,
    adenet::model::CheckpointError,
    adenet::explain::ExplainError,
    adenet::shallow::ShallowError,
    std::io::Error,
    serde_json::Error
);

struct Logger {
    json: bool,
}

impl Logger {
    fn info(&self, msg: &str) {
        if self.json {
            eprintln!("{}", json!({"level": "info", "msg": msg}));
        } else {
            eprintln!("{msg}");
        }
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("ADENET_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    let argv: Vec<String> = std::env::args().collect();
    let cli = match parse_with_config(&argv) {
        Ok(cli) => cli,
        Err(e) => return e,
    };
    let log = Logger {
        json: cli.json_logs,
    };
    match run(cli, &log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log.info(&format!("error: {}", e.message));
            ExitCode::from(e.code)
        }
    }
}

/// Parse argv, honoring `--config file` of flat key=value pairs: the pairs
/// are spliced in right after the subcommand so explicit flags override them.
fn parse_with_config(argv: &[String]) -> Result<Cli, ExitCode> {
    let parse = |args: &[String]| -> Result<Cli, ExitCode> {
        Cli::try_parse_from(args).map_err(|e| {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            ExitCode::from(code)
        })
    };
    let first = parse(argv)?;
    let Some(config_path) = first.config.clone() else {
        return Ok(first);
    };
    let text = std::fs::read_to_string(&config_path).map_err(|e| {
        eprintln!("error: cannot read config {}: {e}", config_path.display());
        ExitCode::from(EXIT_USAGE)
    })?;
    let mut extra = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            eprintln!(
                "error: config line {} is not key=value: {line:?}",
                ln + 1
            );
            return Err(ExitCode::from(EXIT_USAGE));
        };
        let (key, value) = (key.trim(), value.trim());
        if value == "true" {
            extra.push(format!("--{key}"));
        } else {
            extra.push(format!("--{key}"));
            extra.push(value.to_string());
        }
    }
    // splice the defaults directly after the subcommand token
    let names = [
        "synth", "train", "cv", "eval", "gradcam", "features", "params",
    ];
    let pos = argv
        .iter()
        .position(|a| names.contains(&a.as_str()))
        .expect("a parsed Cli always has a subcommand");
    let mut merged: Vec<String> = argv[..=pos].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&argv[pos + 1..]);
    parse(&merged)
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.csv")
    } else {
        data.to_path_buf()
    }
}

fn build_model(arch: Arch, seed: u64) -> ModelGraph {
    match arch {
        Arch::Adenet => build_adenet(3, true, seed),
        Arch::AdenetNobn => build_adenet(3, false, seed),
        Arch::Lenet5 => build_lenet5(seed),
    }
}

/// One (1, 3, h, w) tensor per crop, pixels scaled to [0,1].
fn crop_tensor(crop: &RgbImage) -> Tensor<f32> {
    let (w, h) = (crop.width() as usize, crop.height() as usize);
    let mut t = Tensor::zeros(1, 3, h, w);
    for (px, py, p) in crop.enumerate_pixels() {
        for ch in 0..3 {
            t.set(0, ch, py as usize, px as usize, p.0[ch] as f32 / 255.0);
        }
    }
    t
}

fn make_samples(crops: &[(RgbImage, u8)], arch: Arch) -> Vec<TrainSample> {
    crops
        .iter()
        .map(|(img, label)| TrainSample {
            x: match arch {
                Arch::Lenet5 => to_gray_square(img, 32),
                _ => crop_tensor(img),
            },
            label: *label as usize,
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn train_config(
    epochs: usize,
    batch_size: usize,
    optimizer: Optimizer,
    lr: f32,
    early_stopping: bool,
    patience: usize,
    class_weights: bool,
    seed: u64,
    deterministic: bool,
) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        optimizer: match optimizer {
            Optimizer::Adam => OptimizerKind::adam(lr),
            Optimizer::Sgd => OptimizerKind::SgdMomentum { lr, momentum: 0.9 },
        },
        early_stopping: EarlyStopping {
            enabled: early_stopping,
            patience,
        },
        class_weights,
        seed,
        deterministic,
        stop_at_train_accuracy: None,
    }
}

fn write_or_print(path: &Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli, log: &Logger) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            n,
            damaged_ratio,
            image_size,
            out,
        } => {
            if !(0.0..=1.0).contains(&damaged_ratio) {
                return Err(CliError::usage(format!(
                    "--damaged-ratio must be in [0,1], got {damaged_ratio}"
                )));
            }
            let config = SynthConfig {
                n_images: n,
                damaged_ratio,
                image_size,
                ..Default::default()
            };
            let manifest = synth_dataset(&config, cli.seed, &out)?;
            log.info(&format!(
                "wrote {n} images and {}",
                manifest.display()
            ));
            Ok(())
        }

        Command::Train {
            data,
            arch,
            epochs,
            batch_size,
            optimizer,
            lr,
            train_frac,
            early_stopping,
            patience,
            class_weights,
            out,
            report,
            history,
        } => {
            let manifest = load_manifest(&manifest_path(&data))?;
            let crops = crop_insulators(&manifest)?;
            let samples = make_samples(&crops, arch);
            let plan = stratified_holdout(&manifest, train_frac, cli.seed)?;
            let (train_idx, val_idx) = plan.splits().pop().expect("holdout has one split");
            let train_set: Vec<TrainSample> =
                train_idx.iter().map(|&i| samples[i].clone()).collect();
            let val_set: Vec<TrainSample> =
                val_idx.iter().map(|&i| samples[i].clone()).collect();
            log.info(&format!(
                "training {arch:?} on {} crops, validating on {}",
                train_set.len(),
                val_set.len()
            ));

            let mut model = build_model(arch, cli.seed);
            let config = train_config(
                epochs,
                batch_size,
                optimizer,
                lr,
                early_stopping,
                patience,
                class_weights,
                cli.seed,
                cli.deterministic,
            );
            let hist = train(&mut model, &train_set, &val_set, &config)?;
            let (val_loss, report_data, _) = evaluate(&model, &val_set, batch_size)?;
            log.info(&format!(
                "done: val_loss={val_loss:.4} val_macro_f1={:.4}{}",
                report_data.macro_f1,
                if hist.stopped_early {
                    " (stopped early)"
                } else {
                    ""
                }
            ));
            if let Some(ckpt) = out {
                save_checkpoint(&model, &ckpt)?;
                log.info(&format!("checkpoint -> {}", ckpt.display()));
            }
            if let Some(hp) = history {
                std::fs::write(&hp, serde_json::to_string_pretty(&hist)?)?;
            }
            write_or_print(&report, &serde_json::to_string_pretty(&report_data)?)?;
            Ok(())
        }

        Command::Cv {
            data,
            arch,
            k,
            epochs,
            batch_size,
            optimizer,
            lr,
            class_weights,
            ablate_bn,
            report,
        } => {
            if k < 2 {
                return Err(CliError::usage(format!("--k must be at least 2, got {k}")));
            }
            let manifest = load_manifest(&manifest_path(&data))?;
            let crops = crop_insulators(&manifest)?;
            let config = train_config(
                epochs,
                batch_size,
                optimizer,
                lr,
                false,
                3,
                class_weights,
                cli.seed,
                cli.deterministic,
            );

            let mut out = run_cv(arch, &manifest, &crops, k, &config, cli.seed, log)?;
            if ablate_bn {
                let other = match arch {
                    Arch::Adenet => Arch::AdenetNobn,
                    Arch::AdenetNobn => Arch::Adenet,
                    Arch::Lenet5 => {
                        return Err(CliError::usage(
                            "--ablate-bn only applies to the adenet architectures",
                        ))
                    }
                };
                let ablated = run_cv(other, &manifest, &crops, k, &config, cli.seed, log)?;
                let (t0, n0) = count_params(&build_model(arch, cli.seed));
                let (t1, n1) = count_params(&build_model(other, cli.seed));
                out["ablation"] = json!({
                    "variant": format!("{other:?}"),
                    "report": ablated,
                    "trainable_param_delta": t1 as i64 - t0 as i64,
                    "non_trainable_param_delta": n1 as i64 - n0 as i64,
                });
            }
            write_or_print(&report, &serde_json::to_string_pretty(&out)?)?;
            Ok(())
        }

        Command::Eval {
            data,
            model,
            format,
            report,
            roc,
        } => {
            let manifest = load_manifest(&manifest_path(&data))?;
            let crops = crop_insulators(&manifest)?;
            let net = load_checkpoint(&model)?;
            let arch = if net.in_channels == 1 {
                Arch::Lenet5
            } else {
                Arch::Adenet
            };
            let samples = make_samples(&crops, arch);
            let (loss, rep, scores) = evaluate(&net, &samples, 16)?;
            log.info(&format!("eval loss={loss:.4} accuracy={:.4}", rep.accuracy));
            if let Some(roc_path) = roc {
                let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
                let (_, curve) = roc_auc(&scores, &labels)?;
                emit_roc_csv(&curve, &roc_path)?;
            }
            match report {
                Some(p) => emit_report(
                    &rep,
                    match format {
                        OutputFormat::Json => ReportFormat::Json,
                        OutputFormat::Csv => ReportFormat::Csv,
                    },
                    &p,
                )?,
                None => println!("{}", serde_json::to_string_pretty(&rep)?),
            }
            Ok(())
        }

        Command::Gradcam {
            data,
            model,
            index,
            target,
            alpha,
            nearest,
            out,
            csv,
        } => {
            let mpath = manifest_path(&data);
            let manifest = load_manifest(&mpath)?;
            if index >= manifest.records.len() {
                return Err(CliError::usage(format!(
                    "--index {index} out of range ({} records)",
                    manifest.records.len()
                )));
            }
            let crops = crop_insulators(&manifest)?;
            let (crop_img, _) = &crops[index];
            let net = load_checkpoint(&model)?;
            let x = crop_tensor(crop_img);
            let target_class = match target {
                TargetClass::Damaged => 1,
                TargetClass::Undamaged => 0,
                TargetClass::Predicted => {
                    let (probs, _) = net.predict(&x)?;
                    usize::from(probs.data[1] >= 0.5)
                }
            };
            let mode = if nearest {
                Upsample::Nearest
            } else {
                Upsample::Bilinear
            };
            let hm = gradcam(&net, &x, target_class, mode)?;
            overlay(&hm, crop_img, alpha, &out)?;
            log.info(&format!(
                "overlay (target class {target_class}) -> {}",
                out.display()
            ));
            if let Some(csv_path) = csv {
                let mut f = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
                heatmap_csv(&hm, &mut f)?;
            }
            // report defect enrichment when the generator sidecar is present
            let sidecar = mpath.parent().unwrap_or(Path::new(".")).join("defects.jsonl");
            if sidecar.exists() {
                if let Some(entry) = load_sidecar(&sidecar)?
                    .into_iter()
                    .find(|d| d.record_index == index)
                {
                    let rec = &manifest.records[index];
                    let [bx, by, bw, bh] = entry.defect_bbox;
                    let score = localization_score(
                        &hm,
                        (bx - rec.bbox.x) as usize,
                        (by - rec.bbox.y) as usize,
                        bw as usize,
                        bh as usize,
                    )?;
                    println!("{}", json!({ "localization_score": score }));
                }
            }
            Ok(())
        }

        Command::Features {
            data,
            out,
            forest,
            trees,
        } => {
            let manifest = load_manifest(&manifest_path(&data))?;
            let crops = crop_insulators(&manifest)?;
            let images: Vec<RgbImage> = crops.iter().map(|(img, _)| img.clone()).collect();
            let labels: Vec<u8> = crops.iter().map(|(_, l)| *l).collect();
            let rows = extract_features_batch(&images)?;
            adenet::shallow::write_feature_cache(&out, &rows, &labels)?;
            log.info(&format!("{} feature rows -> {}", rows.len(), out.display()));
            if let Some(fpath) = forest {
                let cfg = ForestConfig {
                    n_trees: trees,
                    seed: cli.seed,
                    ..Default::default()
                };
                let model = train_forest(&rows, &labels, &cfg)?;
                let correct = rows
                    .iter()
                    .zip(&labels)
                    .filter(|(r, l)| forest_predict(&model, r).unwrap().0 == **l)
                    .count();
                log.info(&format!(
                    "forest training accuracy {:.4}",
                    correct as f64 / rows.len() as f64
                ));
                save_forest(&model, &fpath)?;
            }
            Ok(())
        }

        Command::Params { arch } => {
            let model = build_model(arch, cli.seed);
            let (trainable, non_trainable) = count_params(&model);
            println!("trainable={trainable} non_trainable={non_trainable}");
            Ok(())
        }
    }
}

/// Train k fold models and assemble the fold-mean report plus the pooled
/// confusion matrix.
fn run_cv(
    arch: Arch,
    manifest: &DatasetManifest,
    crops: &[(RgbImage, u8)],
    k: usize,
    config: &TrainConfig,
    seed: u64,
    log: &Logger,
) -> Result<serde_json::Value, CliError> {
    let samples = make_samples(crops, arch);
    let plan = kfold(manifest, k, seed)?;
    let SplitPlan::KFold { .. } = &plan else {
        unreachable!("kfold returns a KFold plan")
    };
    let mut fold_reports: Vec<MetricsReport> = Vec::new();
    let mut pooled = ConfusionMatrix2::new(0, 0, 0, 0);
    let mut all_scores: Vec<f64> = Vec::new();
    let mut all_labels: Vec<usize> = Vec::new();
    for (fold, (train_idx, val_idx)) in plan.splits().into_iter().enumerate() {
        let train_set: Vec<TrainSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
        let val_set: Vec<TrainSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
        let mut model = build_model(arch, seed.wrapping_add(fold as u64));
        let mut fold_config = config.clone();
        fold_config.seed = seed.wrapping_add(fold as u64);
        train(&mut model, &train_set, &val_set, &fold_config)?;
        let (_, report, scores) = evaluate(&model, &val_set, config.batch_size)?;
        log.info(&format!(
            "{arch:?} fold {}/{k}: accuracy={:.4} macro_f1={:.4}",
            fold + 1,
            report.accuracy,
            report.macro_f1
        ));
        let labels: Vec<usize> = val_set.iter().map(|s| s.label).collect();
        let preds: Vec<usize> = scores.iter().map(|&s| usize::from(s >= 0.5)).collect();
        pooled.add(&confusion(&labels, &preds)?);
        all_scores.extend(scores);
        all_labels.extend(labels);
        fold_reports.push(report);
    }
    let fold_mean = aggregate_folds(&fold_reports)?;
    let mut pooled_report = metrics_from_confusion(&pooled)?;
    if let Ok((auc, _)) = roc_auc(&all_scores, &all_labels) {
        pooled_report.roc_auc = Some(auc);
    }
    Ok(json!({
        "arch": format!("{arch:?}"),
        "k": k,
        "fold_mean": fold_mean,
        "folds": fold_reports,
        "pooled_confusion": pooled,
        "pooled": pooled_report,
    }))
}
