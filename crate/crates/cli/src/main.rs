//! `gam`: synthetic data, training, localization and evaluation for
//! geometry-aided matching.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gam_core::bmnet::{init_params, load_params, save_params, Architecture, BmnetParams};
use gam_core::eval::{result_match_metrics, sweep_csv, sweep_report, SweepAxis};
use gam_core::geometry::RansacConfig;
use gam_core::matcher::BaselineMode;
use gam_core::pipeline::{summarize, LocalizationResult, LocalizeConfig, Localizer, MatchStrategy, Status};
use gam_core::query::{load_queries, save_queries, QuerySample};
use gam_core::sfm::{load_model, save_model, SfmModel};
use gam_core::synth::{generate_query, generate_scene, SceneConfig};
use gam_core::trainer::{train, training_log_csv, Mining, TrainConfig};
use gam_core::Error;
use rayon::prelude::*;
use serde_json::{json, Value};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NOT_LOCALIZED: u8 = 3;

#[derive(Parser)]
#[command(name = "gam", version, about = "Geometry-aided matching for visual localization")]
struct Cli {
    /// Log verbosity: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,

    /// Worker threads for per-query parallel work.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..=256))]
    threads: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic SfM model and, optionally, query samples.
    Synth(SynthArgs),
    /// Train network parameters on one or more models.
    Train(TrainArgs),
    /// Localize one query and write the result as JSON.
    Localize(LocalizeArgs),
    /// Localize every query of a file and report match and pose metrics.
    Eval(EvalArgs),
    /// Evaluate over a list of values for one localizer parameter.
    Sweep(SweepArgs),
    /// Summarize a model, query or parameter file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model (GAMM).
    #[arg(long)]
    out: PathBuf,
    /// Also write query samples (GAMQ) here.
    #[arg(long)]
    queries_out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    n_queries: usize,
    /// Random keypoints without ground truth added to each query.
    #[arg(long, default_value_t = 0)]
    clutter: usize,
    #[arg(long, default_value_t = 200)]
    points: usize,
    #[arg(long, default_value_t = 24)]
    images: usize,
    #[arg(long, default_value_t = 32)]
    descriptor_dim: usize,
    #[arg(long, default_value_t = 64)]
    global_dim: usize,
    #[arg(long, default_value_t = SceneConfig::default().distractor_fraction)]
    distractors: f64,
    #[arg(long, default_value_t = SceneConfig::default().inlier_descriptor_noise)]
    descriptor_noise: f64,
    #[arg(long, default_value_t = SceneConfig::default().distractor_noise)]
    distractor_noise: f64,
    #[arg(long, default_value_t = SceneConfig::default().keypoint_noise_px)]
    keypoint_noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    #[arg(long, default_value_t = 140)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 512)]
    n2d: usize,
    #[arg(long, default_value_t = 512)]
    n3d: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0.7)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train without Hungarian pooling (all edges enter the loss).
    #[arg(long)]
    no_hungarian: bool,
    /// Mine random negatives instead of kNN-ratio candidates.
    #[arg(long)]
    random_negatives: bool,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 5)]
    point_blocks: usize,
    #[arg(long, default_value_t = 18)]
    edge_blocks: usize,
    /// Output parameters (BMN1).
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch training log as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct MatchArgs {
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0.7)]
    ratio: f64,
    #[arg(long, default_value_t = 20)]
    top_r: usize,
    #[arg(long, default_value_t = 5)]
    expand_m: usize,
    #[arg(long, default_value_t = 8.0)]
    inlier_threshold: f64,
    #[arg(long, default_value_t = 12)]
    min_inliers: usize,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
    #[arg(long, default_value_t = 50)]
    early_stop: usize,
    #[arg(long)]
    max_scenes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace the network with a descriptor-only matcher.
    #[arg(long, value_parser = ["ratio", "cross", "distance"])]
    baseline: Option<String>,
    /// Threshold for --baseline (ratio or distance).
    #[arg(long, default_value_t = 0.7)]
    baseline_threshold: f64,
    /// Keep edges with w above this instead of Hungarian pooling.
    #[arg(long)]
    plain_threshold: Option<f64>,
    /// Record wall-clock stage timings (makes outputs run-dependent).
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Network parameters; required unless --baseline is given.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    query: PathBuf,
    /// Which query of the file to localize.
    #[arg(long, default_value_t = 0)]
    query_index: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    matching: MatchArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    matching: MatchArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    queries: PathBuf,
    /// One of k, ratio, top_r, m.
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    values: Vec<f64>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    matching: MatchArgs,
}

#[derive(Args)]
struct InspectArgs {
    file: PathBuf,
    /// Also write the summary as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self { code: EXIT_DATA, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self { code: EXIT_DATA, message: e.to_string() }
    }
}

type Outcome = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().filter_level(cli.log_level).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Localize(a) => localize_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Inspect(a) => inspect(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn check(condition: bool, message: &str) -> Result<(), Failure> {
    if condition {
        Ok(())
    } else {
        Err(Failure::usage(message))
    }
}

fn synth(a: SynthArgs) -> Outcome {
    let config = SceneConfig {
        n_points: a.points,
        n_images: a.images,
        descriptor_dim: a.descriptor_dim,
        global_dim: a.global_dim,
        inlier_descriptor_noise: a.descriptor_noise,
        distractor_fraction: a.distractors,
        distractor_noise: a.distractor_noise,
        keypoint_noise_px: a.keypoint_noise,
        seed: a.seed,
        ..SceneConfig::default()
    };
    config.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let model = generate_scene(&config)?;
    save_model(&model, &a.out)?;
    let mut written = 0;
    if let Some(path) = &a.queries_out {
        let samples = (0..a.n_queries as u64)
            .map(|i| generate_query(&model, &config, a.clutter, i))
            .collect::<gam_core::Result<Vec<_>>>()?;
        save_queries(&samples, path)?;
        written = samples.len();
    }
    println!(
        "model: {} images, {} points -> {}",
        model.images().len(),
        model.points().len(),
        a.out.display()
    );
    if let Some(path) = &a.queries_out {
        println!("queries: {written} -> {}", path.display());
    }
    Ok(0)
}

fn train_cmd(a: TrainArgs) -> Outcome {
    check(a.lr >= 0.0 && a.lr.is_finite(), "--lr must be non-negative")?;
    check((0.0..=1.0).contains(&a.ratio), "--ratio must lie in [0, 1]")?;
    let config = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        n2d: a.n2d,
        n3d: a.n3d,
        k: a.k,
        ratio: a.ratio,
        seed: a.seed,
        hungarian: !a.no_hungarian,
        mining: if a.random_negatives { Mining::Random } else { Mining::KnnRatio },
        architecture: Architecture {
            width: a.width,
            point_blocks: a.point_blocks,
            edge_blocks: a.edge_blocks,
        },
    };
    config.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let models = a.models.iter().map(load_model).collect::<gam_core::Result<Vec<_>>>()?;
    let (params, log) = train(&models, &config)?;
    save_params(&params, &a.out)?;
    if let Some(path) = &a.log {
        std::fs::write(path, training_log_csv(&log))?;
    }
    if let Some(last) = log.last() {
        println!(
            "trained {} epochs: loss {:.5}, precision {:.3}, recall {:.3}",
            last.epoch, last.mean_loss, last.precision, last.recall
        );
    }
    println!("parameters -> {}", a.out.display());
    Ok(0)
}

fn localize_config(m: &MatchArgs) -> Result<LocalizeConfig, Failure> {
    let strategy = match (&m.baseline, m.plain_threshold) {
        (Some(_), Some(_)) => return Err(Failure::usage("--baseline and --plain-threshold are exclusive")),
        (Some(mode), None) => MatchStrategy::Baseline {
            mode: mode.parse::<BaselineMode>().map_err(|e| Failure::usage(e.to_string()))?,
            threshold: m.baseline_threshold,
        },
        (None, Some(threshold)) => MatchStrategy::Plain { threshold },
        (None, None) => MatchStrategy::Gam,
    };
    let config = LocalizeConfig {
        k: m.k,
        ratio: m.ratio,
        top_r: m.top_r,
        expand_m: m.expand_m,
        ransac: RansacConfig {
            max_iterations: m.max_iters,
            inlier_threshold_px: m.inlier_threshold,
            min_inliers: m.min_inliers,
            seed: m.seed,
            ..RansacConfig::default()
        },
        early_stop_inliers: m.early_stop,
        max_scenes: m.max_scenes,
        strategy,
        timings: m.timings,
    };
    config.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(config)
}

/// Parameters from file, or untouched defaults when a baseline matcher
/// makes the network unnecessary.
fn params_for(path: &Option<PathBuf>, config: &LocalizeConfig) -> Result<BmnetParams, Failure> {
    match (path, config.strategy) {
        (Some(p), _) => Ok(load_params(p)?),
        (None, MatchStrategy::Baseline { .. }) => Ok(init_params(0)),
        (None, _) => Err(Failure::usage("--params is required unless --baseline is given")),
    }
}

fn result_json(r: &LocalizationResult, timings: bool) -> Value {
    let pose = r.pose.as_ref();
    let q = pose.map(|p| p.rotation.quaternion().coords);
    let t = pose.map(|p| p.translation);
    json!({
        "status": match r.status { Status::Ok => "ok", Status::Failed => "failed" },
        "qw": q.map(|q| q.w),
        "qx": q.map(|q| q.x),
        "qy": q.map(|q| q.y),
        "qz": q.map(|q| q.z),
        "tx": t.map(|t| t.x),
        "ty": t.map(|t| t.y),
        "tz": t.map(|t| t.z),
        "inliers": r.inlier_count,
        "scene_index": r.scene_index_used,
        "timings_ms": timings.then_some(r.timings_ms),
        "reason": r.reason,
    })
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure { code: EXIT_DATA, message: e.to_string() })?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_inputs(model: &Path, queries: &Path) -> Result<(SfmModel, Vec<QuerySample>), Failure> {
    let model = load_model(model)?;
    let samples = load_queries(queries)?;
    if samples.is_empty() {
        return Err(Failure { code: EXIT_DATA, message: "query file holds no queries".into() });
    }
    Ok((model, samples))
}

fn localize_cmd(a: LocalizeArgs) -> Outcome {
    let config = localize_config(&a.matching)?;
    let (model, samples) = load_inputs(&a.model, &a.query)?;
    let params = params_for(&a.params, &config)?;
    let sample = samples.get(a.query_index).ok_or_else(|| {
        Failure::usage(format!("--query-index {} but the file holds {} queries", a.query_index, samples.len()))
    })?;
    let timings = config.timings;
    let result = Localizer::new(&model, &params, config)?.localize(&sample.query)?;
    write_json(&a.out, &result_json(&result, timings))?;
    match result.status {
        Status::Ok => {
            println!("localized with {} inliers (scene {})", result.inlier_count, result.scene_index_used.unwrap_or(0));
            Ok(0)
        }
        Status::Failed => {
            println!("localization failed: {}", result.reason.as_deref().unwrap_or("unknown"));
            Ok(EXIT_NOT_LOCALIZED)
        }
    }
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let config = localize_config(&a.matching)?;
    let (model, samples) = load_inputs(&a.model, &a.queries)?;
    let params = params_for(&a.params, &config)?;
    let timings = config.timings;
    let localizer = Localizer::new(&model, &params, config)?;
    let results = samples
        .par_iter()
        .map(|s| localizer.localize(&s.query))
        .collect::<gam_core::Result<Vec<_>>>()?;
    let summary = summarize(&samples, &results);
    let reports: Vec<_> = results.iter().zip(&samples).map(|(r, s)| result_match_metrics(r, s)).collect();
    let matches = gam_core::eval::MatchReport::pooled(&reports);
    let report = json!({
        "queries": summary.queries,
        "localized": summary.localized,
        "matches": matches,
        "pose": summary.pose,
        "results": results.iter().map(|r| result_json(r, timings)).collect::<Vec<_>>(),
    });
    write_json(&a.out, &report)?;
    println!(
        "{}/{} localized; match precision {:.3}, recall {:.3}; median error {:.4} / {:.3} deg",
        summary.localized,
        summary.queries,
        matches.precision,
        matches.recall,
        summary.pose.median_translation,
        summary.pose.median_rotation_deg
    );
    for (t, r, f) in &summary.pose.recalls {
        println!("  recall at ({t}, {r} deg): {f:.3}");
    }
    Ok(0)
}

fn sweep_cmd(a: SweepArgs) -> Outcome {
    let axis: SweepAxis = a.axis.parse().map_err(|e: Error| Failure::usage(e.to_string()))?;
    let config = localize_config(&a.matching)?;
    for &v in &a.values {
        axis.apply(&config, v).map_err(|e| Failure::usage(e.to_string()))?;
    }
    let (model, samples) = load_inputs(&a.model, &a.queries)?;
    let params = params_for(&a.params, &config)?;
    let rows = if a.values.len() > 1 {
        a.values
            .par_iter()
            .map(|&v| sweep_report(&model, &params, &samples, &config, axis, &[v]))
            .collect::<gam_core::Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect()
    } else {
        sweep_report(&model, &params, &samples, &config, axis, &a.values)?
    };
    let csv = sweep_csv(&rows);
    std::fs::write(&a.out, &csv)?;
    print!("{csv}");
    Ok(0)
}

fn inspect(a: InspectArgs) -> Outcome {
    let head = std::fs::read(&a.file)?;
    let summary = if head.starts_with(b"BMN1") {
        let params = load_params(&a.file)?;
        let arch = params.architecture();
        json!({
            "kind": "parameters",
            "width": arch.width,
            "point_blocks": arch.point_blocks,
            "edge_blocks": arch.edge_blocks,
            "epsilon": params.epsilon,
            "parameters": params.parameter_count(),
        })
    } else if first_keyword(&head) == Some("GAMQ") {
        let samples = load_queries(&a.file)?;
        json!({
            "kind": "queries",
            "queries": samples.len(),
            "keypoints": samples.iter().map(|s| s.query.keypoints.len()).sum::<usize>(),
            "ground_truth_matches": samples.iter().map(|s| s.gt_correspondences.len()).sum::<usize>(),
        })
    } else if first_keyword(&head) == Some("GAMM") {
        let model = load_model(&a.file)?;
        let observations: usize = model.points().values().map(|p| p.track.len()).sum();
        json!({
            "kind": "model",
            "descriptor_dim": model.descriptor_dim(),
            "global_dim": model.global_dim(),
            "cameras": model.cameras().len(),
            "images": model.images().len(),
            "points": model.points().len(),
            "observations": observations,
        })
    } else {
        return Err(Failure { code: EXIT_DATA, message: format!("{}: unrecognized file type", a.file.display()) });
    };
    println!("{}", serde_json::to_string_pretty(&summary).expect("plain JSON"));
    if let Some(out) = &a.out {
        write_json(out, &summary)?;
    }
    Ok(0)
}

/// First token of a text file, skipping blank lines and `#` comments.
fn first_keyword(bytes: &[u8]) -> Option<&str> {
    let text = std::str::from_utf8(bytes).ok()?;
    text.lines()
        .filter_map(|l| l.split('#').next()?.split_whitespace().next())
        .next()
}
