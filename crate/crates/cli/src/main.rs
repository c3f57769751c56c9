//! Command-line front end: dataset generation, training, inference,
//! evaluation, padding-strategy ablation and schedule dumps.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime/numeric error.

mod config;
mod svg;

use clap::{Args, Parser, Subcommand};
use noise2box::denoiser::{Checkpoint, MlpDenoiser, OracleDenoiser};
use noise2box::diffusion::{self, NoiseSchedule};
use noise2box::evalmetrics::{self, EvalReport, FPPI_TARGETS, TP_IOU};
use noise2box::pipeline::{self, LossTarget, Prediction};
use noise2box::synthdata::{self, Sample};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use config::{FileConfig, Overrides};

#[derive(Debug)]
pub enum AppError {
    Usage(String),
    Runtime(String),
}

impl AppError {
    fn code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Usage(m) | AppError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<noise2box::pipeline::PipelineError> for AppError {
    fn from(e: noise2box::pipeline::PipelineError) -> Self {
        match e {
            noise2box::pipeline::PipelineError::BadConfig(m) => AppError::Usage(m),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

impl From<noise2box::synthdata::DatasetError> for AppError {
    fn from(e: noise2box::synthdata::DatasetError) -> Self {
        AppError::Runtime(e.to_string())
    }
}

impl From<noise2box::diffusion::ScheduleError> for AppError {
    fn from(e: noise2box::diffusion::ScheduleError) -> Self {
        AppError::Runtime(e.to_string())
    }
}

impl From<noise2box::evalmetrics::EvalError> for AppError {
    fn from(e: noise2box::evalmetrics::EvalError) -> Self {
        AppError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "noise2box",
    version,
    about = "Diffusion-based noise-to-box lesion detection on synthetic CT phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset (manifest + raster).
    GenData(GenDataArgs),
    /// Train the perceptron denoiser; writes a checkpoint and a loss curve.
    Train(TrainArgs),
    /// Refine random boxes into detections; writes a predictions file.
    Infer(InferArgs),
    /// Score a predictions file against a dataset's ground truth.
    Eval(EvalArgs),
    /// Compare padding strategies over several seeds.
    Ablate(AblateArgs),
    /// Dump the cosine noise schedule as CSV.
    Schedule(ScheduleArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of images.
    #[arg(long)]
    count: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path; the loss curve lands next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Padding strategy: none, duplicate, uniform, gaussian, center_aligned.
    #[arg(long)]
    strategy: Option<String>,
    /// Padded target count per image.
    #[arg(long)]
    n_targets: Option<usize>,
    #[arg(long)]
    lambda_scale: Option<f64>,
    /// Which set the loss matches against: original or perturbated.
    #[arg(long)]
    loss_target: Option<String>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    /// Predictions output path.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint path (required unless --denoiser oracle).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Denoiser implementation: mlp (default) or oracle.
    #[arg(long, default_value = "mlp")]
    denoiser: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda_conf: Option<f64>,
    #[arg(long)]
    proposals: Option<usize>,
    /// Disable non-maximum suppression on the final detections.
    #[arg(long)]
    no_nms: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    preds: PathBuf,
    /// Report output path (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Also write the FROC curve as CSV (threshold,fppi,sensitivity).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset directory used for evaluation.
    #[arg(long)]
    eval_data: PathBuf,
    /// Comma-separated strategy names.
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory for the comparison table and chart.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = diffusion::DEFAULT_T)]
    t_max: usize,
    /// Also print the inference ladder for this step count.
    #[arg(long)]
    steps: Option<usize>,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Predictions file schema shared by `infer` and `eval`.
#[derive(Debug, Serialize, Deserialize)]
struct PredictionsFile {
    version: u32,
    predictions: Vec<Prediction>,
}

const PREDICTIONS_VERSION: u32 = 1;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Schedule(args) => cmd_schedule(args),
    }
}

fn load_dataset(dir: &Path) -> Result<Vec<Sample>, AppError> {
    if !dir.join("manifest.json").is_file() {
        return Err(AppError::Usage(format!(
            "dataset directory {} does not contain a manifest.json",
            dir.display()
        )));
    }
    let (_, samples) = synthdata::read_dataset(dir)?;
    Ok(samples)
}

fn write_text(path: &Path, text: &str) -> Result<(), AppError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| AppError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, text)
        .map_err(|e| AppError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    text
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), AppError> {
    if args.count > 0 && args.size < 48 {
        return Err(AppError::Usage(format!(
            "--size must be at least 48 pixels (lesions up to 32 px must fit), got {}",
            args.size
        )));
    }
    let indices: Vec<usize> = (0..args.count).collect();
    let samples: Vec<Sample> = pipeline::parallel_map(&indices, args.threads, |(_, &i)| {
        synthdata::generate_sample(
            &mut synthdata::sample_rng(args.seed, i),
            args.size,
            synthdata::sample_id(i),
        )
    });
    synthdata::write_dataset(&args.out, &samples, args.seed)?;
    let lesions: usize = samples.iter().map(|s| s.lesions.len()).sum();
    println!(
        "wrote {} images ({} lesions) to {}",
        samples.len(),
        lesions,
        args.out.display()
    );
    Ok(())
}

fn parse_loss_target(name: &str) -> Result<LossTarget, AppError> {
    match name {
        "original" => Ok(LossTarget::Original),
        "perturbated" => Ok(LossTarget::Perturbated),
        other => Err(AppError::Usage(format!(
            "unknown loss target {other:?}; valid: original, perturbated"
        ))),
    }
}

fn loss_csv_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

fn cmd_train(args: TrainArgs) -> Result<(), AppError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let flags = Overrides {
        seed: args.seed,
        iterations: args.iterations,
        batch_size: args.batch_size,
        strategy: args.strategy.clone(),
        n_targets: args.n_targets,
        lambda_scale: args.lambda_scale,
        loss_target: args
            .loss_target
            .as_deref()
            .map(parse_loss_target)
            .transpose()?,
        ..Overrides::default()
    };
    let (train_cfg, _) = config::resolve(&file, &flags)?;
    let dataset = load_dataset(&args.data)?;

    let result = pipeline::train_loop_threaded(&dataset, &train_cfg, args.threads)?;

    let ckpt = Checkpoint::new(
        &result.params,
        train_cfg.seed,
        train_cfg.t_max,
        train_cfg.b_scale,
    );
    ckpt.save(&args.out)
        .map_err(|e| AppError::Runtime(e.to_string()))?;

    let mut csv = String::from("iteration,loss\n");
    for (i, loss) in result.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{loss}\n"));
    }
    let loss_path = loss_csv_path(&args.out);
    write_text(&loss_path, &csv)?;

    println!(
        "trained {} iterations on {} images; final loss {:.6}",
        train_cfg.iterations,
        dataset.len(),
        result.losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("checkpoint: {}", args.out.display());
    println!("loss curve: {}", loss_path.display());
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<(), AppError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let flags = Overrides {
        seed: args.seed,
        steps: args.steps,
        lambda_conf: args.lambda_conf,
        n_proposals: args.proposals,
        no_nms: args.no_nms,
        ..Overrides::default()
    };
    let (train_cfg, infer_cfg) = config::resolve(&file, &flags)?;
    let dataset = load_dataset(&args.data)?;

    let preds = match args.denoiser.as_str() {
        "oracle" => {
            let sched = NoiseSchedule::cosine(train_cfg.t_max, diffusion::DEFAULT_S_OFFSET)?;
            pipeline::infer_dataset(
                &OracleDenoiser,
                &dataset,
                &infer_cfg,
                &sched,
                train_cfg.b_scale,
                args.threads,
            )?
        }
        "mlp" => {
            let ckpt_path = args.ckpt.as_deref().ok_or_else(|| {
                AppError::Usage("--ckpt is required unless --denoiser oracle".into())
            })?;
            if !ckpt_path.is_file() {
                return Err(AppError::Usage(format!(
                    "checkpoint {} does not exist",
                    ckpt_path.display()
                )));
            }
            let ckpt =
                Checkpoint::load(ckpt_path).map_err(|e| AppError::Runtime(e.to_string()))?;
            let (t_max, b_scale) = (ckpt.t_max, ckpt.b_scale);
            let params = ckpt.into_params();
            let sched = NoiseSchedule::cosine(t_max, diffusion::DEFAULT_S_OFFSET)?;
            let den = MlpDenoiser { params: &params };
            pipeline::infer_dataset(
                &den,
                &dataset,
                &infer_cfg,
                &sched,
                b_scale,
                args.threads,
            )?
        }
        other => {
            return Err(AppError::Usage(format!(
                "unknown denoiser {other:?}; valid: mlp, oracle"
            )))
        }
    };

    let out = PredictionsFile {
        version: PREDICTIONS_VERSION,
        predictions: preds,
    };
    write_text(&args.out, &to_pretty_json(&out))?;
    println!(
        "wrote {} predictions over {} images to {}",
        out.predictions.len(),
        dataset.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), AppError> {
    let dataset = load_dataset(&args.data)?;
    if !args.preds.is_file() {
        return Err(AppError::Usage(format!(
            "predictions file {} does not exist",
            args.preds.display()
        )));
    }
    let text = std::fs::read_to_string(&args.preds)
        .map_err(|e| AppError::Runtime(format!("cannot read {}: {e}", args.preds.display())))?;
    let preds_file: PredictionsFile = serde_json::from_str(&text)
        .map_err(|e| AppError::Runtime(format!("malformed predictions file: {e}")))?;

    let report = evaluate_against(&preds_file.predictions, &dataset)?;
    write_text(&args.out, &to_pretty_json(&report))?;
    if let Some(csv_path) = &args.csv {
        write_text(&csv_path.clone(), &curve_csv(&report))?;
    }
    print_report(&report);
    Ok(())
}

fn evaluate_against(preds: &[Prediction], dataset: &[Sample]) -> Result<EvalReport, AppError> {
    let gt_by_image: Vec<(String, Vec<noise2box::geometry::Box>)> = dataset
        .iter()
        .map(|s| (s.image_id.clone(), s.gt_boxes.clone()))
        .collect();
    Ok(evalmetrics::evaluate(preds, &gt_by_image, TP_IOU, &FPPI_TARGETS)?)
}

fn curve_csv(report: &EvalReport) -> String {
    let mut csv = String::from("threshold,fppi,sensitivity\n");
    for p in &report.curve {
        csv.push_str(&format!("{},{},{}\n", p.threshold, p.fppi, p.sensitivity));
    }
    csv
}

fn print_report(report: &EvalReport) {
    for (target, sens) in report.fppi_targets.iter().zip(&report.sensitivities) {
        println!("sensitivity@{target} FPPI: {sens:.4}");
    }
    println!("average sensitivity: {:.4}", report.average_sensitivity);
}

fn cmd_ablate(args: AblateArgs) -> Result<(), AppError> {
    if args.strategies.is_empty() || args.seeds.is_empty() {
        return Err(AppError::Usage(
            "--strategies and --seeds must be non-empty".into(),
        ));
    }
    let file = FileConfig::load(args.config.as_deref())?;
    let train_data = load_dataset(&args.data)?;
    let eval_data = load_dataset(&args.eval_data)?;

    let mut rows: Vec<(String, u64, f64)> = Vec::new();
    for strategy in &args.strategies {
        for &seed in &args.seeds {
            let flags = Overrides {
                strategy: Some(strategy.clone()),
                seed: Some(seed),
                iterations: args.iterations,
                ..Overrides::default()
            };
            let (train_cfg, infer_cfg) = config::resolve(&file, &flags)?;
            let result = pipeline::train_loop_threaded(&train_data, &train_cfg, args.threads)?;
            let sched = NoiseSchedule::cosine(train_cfg.t_max, diffusion::DEFAULT_S_OFFSET)?;
            let den = MlpDenoiser {
                params: &result.params,
            };
            let preds = pipeline::infer_dataset(
                &den,
                &eval_data,
                &infer_cfg,
                &sched,
                train_cfg.b_scale,
                args.threads,
            )?;
            let report = evaluate_against(&preds, &eval_data)?;
            println!(
                "strategy {strategy}, seed {seed}: avg sensitivity {:.4}",
                report.average_sensitivity
            );
            rows.push((strategy.clone(), seed, report.average_sensitivity));
        }
    }

    std::fs::create_dir_all(&args.out)
        .map_err(|e| AppError::Runtime(format!("cannot create {}: {e}", args.out.display())))?;

    let mut runs_csv = String::from("strategy,seed,avg_sensitivity\n");
    for (s, seed, v) in &rows {
        runs_csv.push_str(&format!("{s},{seed},{v}\n"));
    }
    write_text(&args.out.join("ablate_runs.csv"), &runs_csv)?;

    let mut summary_csv = String::from("strategy,mean,sd\n");
    let mut labels = Vec::new();
    let mut means = Vec::new();
    let mut sds = Vec::new();
    for strategy in &args.strategies {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|(s, _, _)| s == strategy)
            .map(|(_, _, v)| *v)
            .collect();
        let (mean, sd) = mean_sd(&vals);
        summary_csv.push_str(&format!("{strategy},{mean},{sd}\n"));
        labels.push(strategy.clone());
        means.push(mean);
        sds.push(sd);
    }
    write_text(&args.out.join("ablate_summary.csv"), &summary_csv)?;
    let chart = svg::bar_chart(
        "average sensitivity by padding strategy",
        &labels,
        &means,
        &sds,
    );
    write_text(&args.out.join("ablate.svg"), &chart)?;
    println!("ablation artifacts in {}", args.out.display());
    Ok(())
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cmd_schedule(args: ScheduleArgs) -> Result<(), AppError> {
    let sched = NoiseSchedule::cosine(args.t_max, diffusion::DEFAULT_S_OFFSET)
        .map_err(|e| AppError::Usage(e.to_string()))?;
    let mut csv = String::from("t,alpha_bar\n");
    for (t, ab) in sched.entries().iter().enumerate() {
        csv.push_str(&format!("{t},{ab}\n"));
    }
    match &args.out {
        Some(path) => {
            write_text(path, &csv)?;
            println!("wrote schedule for T={} to {}", args.t_max, path.display());
        }
        None => print!("{csv}"),
    }
    if let Some(steps) = args.steps {
        let ladder = diffusion::timestep_ladder(args.t_max, steps)
            .map_err(|e| AppError::Usage(e.to_string()))?;
        let rendered: Vec<String> = ladder.iter().map(|t| t.0.to_string()).collect();
        println!("ladder({steps}): {}", rendered.join(" "));
    }
    Ok(())
}
