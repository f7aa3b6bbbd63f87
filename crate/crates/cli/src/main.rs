use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tasa_core::bridge::VerifyMode;
use tasa_core::net::write_checkpoint;
use tasa_core::pipeline::{
    at, build_client, evaluate_dirs, load_bundle, read_json, resolve_concepts, run_pipeline, stage_detect, stage_lift,
    stage_refine, stage_select, train_on_crops, validate_config, write_json, write_masks, CropRecord, LiftParams,
    PipelineConfig, PipelineError, PipelineRun, PointsRecord, ScoresRecord, Stage, CROP_FILE,
};
use tasa_core::scene::write_mask;
use tasa_core::synth::{generate, write_fixture, SynthConfig};

// Training reallocates multi-megabyte tensors every step.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "tasa", version, about = "Task-aware 3D affordance segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank frames by blended task and affordance similarity and keep the top K.
    SelectFrames(SelectArgs),
    /// Propose, verify and segment manipulable points on the selected frames.
    Detect(DetectArgs),
    /// Back-project 2D masks, merge them by vote and grow the crop.
    Lift(LiftArgs),
    /// Train the refinement network on crops with ground truth.
    Train(TrainArgs),
    /// Predict a full-cloud mask from a crop.
    Refine(RefineArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Run select → detect → lift → refine → eval, persisting every artifact.
    Pipeline(PipelineArgs),
    /// Print the default configuration or check a config file.
    Config(ConfigArgs),
    /// Write a synthetic scene bundle with ground truth and an oracle transcript.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConfigOpt {
    /// JSON configuration; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    alpha_a: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Concept source; without it the bundle's stored concept embeddings are used.
    #[arg(long)]
    client: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigOpt,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// scores.json from select-frames.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    client: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Directory for the per-frame mask files (default: `masks` next to --out).
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long, value_parser = parse_verify)]
    verify: Option<VerifyMode>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    cfg: ConfigOpt,
}

#[derive(Args)]
struct LiftArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    points: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    depth_tol: Option<f64>,
    #[arg(long)]
    n_crop: Option<usize>,
    #[arg(long)]
    min_votes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    cfg: ConfigOpt,
}

#[derive(Args)]
struct TrainArgs {
    /// A bundle directory holding crop.json, or a directory of such bundles.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-step losses as JSON.
    #[arg(long)]
    losses: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigOpt,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    crop: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// `<task>.txt` files or `<task>/<id>.txt` directories.
    #[arg(long)]
    pred: PathBuf,
    /// `<task>.txt` ground-truth masks.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    client: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    stop_after: Option<Stage>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    cfg: ConfigOpt,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ConfigArgs {
    #[arg(long)]
    dump: bool,
    #[arg(long)]
    check: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Also render and write per-frame depth maps.
    #[arg(long)]
    depth: bool,
}

fn parse_verify(s: &str) -> Result<VerifyMode, String> {
    match s {
        "strict" => Ok(VerifyMode::Strict),
        "lenient" => Ok(VerifyMode::Lenient),
        _ => Err(format!("{s:?} is neither strict nor lenient")),
    }
}

fn load_config(opt: &ConfigOpt) -> Result<PipelineConfig, PipelineError> {
    match &opt.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| PipelineError::config("config", e)),
        None => Ok(PipelineConfig::default()),
    }
}

fn checked(cfg: PipelineConfig) -> Result<PipelineConfig, PipelineError> {
    let diags = validate_config(&cfg);
    if diags.is_empty() {
        Ok(cfg)
    } else {
        let msg = diags.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
        Err(PipelineError::config("config", msg))
    }
}

fn client_spec(flag: Option<String>, cfg: &PipelineConfig, stage: Stage) -> Result<String, PipelineError> {
    flag.or_else(|| cfg.client.clone())
        .ok_or_else(|| PipelineError::config(stage, "no client given (--client or the config's client field)"))
}

fn save<T: serde::Serialize>(value: &T, path: &Path, stage: &str) -> Result<(), PipelineError> {
    write_json(value, path).map_err(|e| PipelineError::data(stage, e))
}

fn load<T: serde::de::DeserializeOwned>(path: &Path, stage: Stage) -> Result<T, PipelineError> {
    read_json(path).map_err(|e| PipelineError::data(stage, e))
}

fn select(a: SelectArgs) -> Result<(), PipelineError> {
    let mut cfg = load_config(&a.cfg)?;
    cfg.alpha_a = a.alpha_a.unwrap_or(cfg.alpha_a);
    cfg.top_k = a.top_k.unwrap_or(cfg.top_k);
    let cfg = checked(cfg)?;
    let bundle = load_bundle(&a.bundle, Stage::Select)?;
    let client = a.client.or(cfg.client.clone()).map(|s| build_client(&s)).transpose()?;
    let concepts = resolve_concepts(&bundle, client.as_deref())?;
    let out = stage_select(&bundle, &concepts, &cfg.selection())?;
    log::info!(target: "tasa::stage", "stage=select frames={} dot_products={}", bundle.frames.len(), out.dot_products);
    save(&out.record, &a.out, "select")
}

fn detect(a: DetectArgs) -> Result<(), PipelineError> {
    let mut cfg = load_config(&a.cfg)?;
    cfg.verify_mode = a.verify.unwrap_or(cfg.verify_mode);
    let cfg = checked(cfg)?;
    let client = build_client(&client_spec(a.client, &cfg, Stage::Detect)?)?;
    let bundle = load_bundle(&a.bundle, Stage::Detect)?;
    let scores: ScoresRecord = load(&a.frames, Stage::Detect)?;
    let det = stage_detect(&bundle, &scores, client.as_ref(), cfg.verify_mode, a.workers)?;
    let masks_dir = a.masks.unwrap_or_else(|| a.out.parent().unwrap_or(Path::new(".")).join("masks"));
    write_masks(&det.masks, &masks_dir).map_err(|e| PipelineError::data("detect", e))?;
    log::info!(target: "tasa::stage", "stage=detect frames={} calls={:?}", scores.selected.len(), det.record.client_calls);
    save(&det.record, &a.out, "detect")
}

fn lift(a: LiftArgs) -> Result<(), PipelineError> {
    let mut cfg = load_config(&a.cfg)?;
    cfg.depth_tol = a.depth_tol.unwrap_or(cfg.depth_tol);
    cfg.n_crop = a.n_crop.unwrap_or(cfg.n_crop);
    cfg.min_votes = a.min_votes.unwrap_or(cfg.min_votes);
    let cfg = checked(cfg)?;
    let bundle = load_bundle(&a.bundle, Stage::Lift)?;
    let points: PointsRecord = load(&a.points, Stage::Lift)?;
    let crop = stage_lift(&bundle, &points, &a.masks, &LiftParams::from(&cfg), a.workers)?;
    log::info!(target: "tasa::stage", "stage=lift seeds={} crop={}", crop.seeds.len(), crop.indices.len());
    save(&crop, &a.out, "lift")
}

fn training_dirs(data: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    if data.join(CROP_FILE).is_file() {
        return Ok(vec![data.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(data)
        .map_err(|e| PipelineError::data("train", format!("{}: {e}", data.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CROP_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(PipelineError::data("train", format!("{} holds no bundle with a {CROP_FILE}", data.display())));
    }
    Ok(dirs)
}

fn train_cmd(a: TrainArgs) -> Result<(), PipelineError> {
    let cfg = checked(load_config(&a.cfg)?)?;
    let mut samples = Vec::new();
    for dir in training_dirs(&a.data)? {
        let bundle = load_bundle(&dir, Stage::Refine)?;
        let crop: CropRecord = load(&dir.join(CROP_FILE), Stage::Refine)?;
        samples.push((bundle, crop));
    }
    let (net, report) = train_on_crops(&samples, &cfg)?;
    log::info!(
        target: "tasa::stage",
        "stage=train samples={} steps={} final_loss={:?}",
        samples.len(),
        report.losses.len(),
        report.losses.last()
    );
    if let Some(p) = &a.losses {
        save(&report.losses, p, "train")?;
    }
    write_checkpoint(&net, &a.out).map_err(at(Stage::Refine))
}

fn refine(a: RefineArgs) -> Result<(), PipelineError> {
    let net = tasa_core::net::read_checkpoint(&a.model).map_err(at(Stage::Refine))?;
    let bundle = load_bundle(&a.bundle, Stage::Refine)?;
    let crop: CropRecord = load(&a.crop, Stage::Refine)?;
    let mask = stage_refine(&bundle, &crop, &net)?;
    write_mask(&mask, &a.out).map_err(at(Stage::Refine))
}

fn eval(a: EvalArgs) -> Result<(), PipelineError> {
    let report = evaluate_dirs(&a.pred, &a.gt)?;
    println!("mAP {:.4}  AP50 {:.4}  AP25 {:.4}  mIoU {:.4}", report.map, report.ap50, report.ap25, report.miou);
    save(&report, &a.out, "eval")
}

fn pipeline(a: PipelineArgs) -> Result<(), PipelineError> {
    let cfg = checked(load_config(&a.cfg)?)?;
    let client = build_client(&client_spec(a.client, &cfg, Stage::Detect)?)?;
    let outcome = run_pipeline(&PipelineRun {
        bundle: &a.bundle,
        config: &cfg,
        model: a.model.as_deref(),
        client: client.as_ref(),
        out_dir: &a.out_dir,
        stop_after: a.stop_after,
        workers: a.workers,
    })?;
    for s in &outcome.timing.stages {
        println!("{:<7} {:>10.1} ms  {:?}", s.stage, s.wall_ms, s.work);
    }
    if let Some(r) = &outcome.report {
        println!("mAP {:.4}  AP50 {:.4}  AP25 {:.4}  mIoU {:.4}", r.map, r.ap50, r.ap25, r.miou);
    }
    Ok(())
}

fn config(a: ConfigArgs) -> Result<(), PipelineError> {
    if a.dump {
        println!("{}", PipelineConfig::default().to_json_pretty());
        return Ok(());
    }
    let path = a.check.expect("clap enforces one of --dump / --check");
    let cfg = PipelineConfig::load(&path).map_err(|e| PipelineError::config("config", e))?;
    let diags = validate_config(&cfg);
    for d in &diags {
        println!("{d}");
    }
    if diags.is_empty() {
        println!("ok");
        Ok(())
    } else {
        Err(PipelineError::config("config", format!("{} problem(s) in {}", diags.len(), path.display())))
    }
}

fn synth(a: SynthArgs) -> Result<(), PipelineError> {
    let scene =
        generate(&SynthConfig { frames: a.frames, seed: a.seed, with_depth: a.depth, ..SynthConfig::default() });
    write_fixture(&scene, &a.out).map_err(|e| PipelineError::data("synth", e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SelectFrames(a) => select(a),
        Command::Detect(a) => detect(a),
        Command::Lift(a) => lift(a),
        Command::Train(a) => train_cmd(a),
        Command::Refine(a) => refine(a),
        Command::Eval(a) => eval(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Config(a) => config(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
