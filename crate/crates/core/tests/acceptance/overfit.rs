//! The full pipeline on the committed synthetic scene: lift a crop, train on it, refine
//! and evaluate, twice, with byte-identical artifacts.

use std::fs;
use std::path::Path;
use std::time::Instant;

use tasa_core::bridge::FixtureClient;
use tasa_core::metrics::iou;
use tasa_core::net::write_checkpoint;
use tasa_core::pipeline::{
    read_json, run_pipeline, train_on_crops, CropRecord, PipelineConfig, PipelineRun, Stage, CROP_FILE, MASK_FILE,
};
use tasa_core::scene::load_scene_bundle;
use tasa_core::synth::TRANSCRIPT_FILE;

use crate::{ensure, fixture, Outcome};

const MIN_MIOU: f64 = 0.9;
const MAX_SECONDS: f64 = 300.0;

struct Run {
    model: Vec<u8>,
    mask: Vec<u8>,
    crop_iou: f64,
    miou: f64,
    crop_len: usize,
    steps: usize,
    final_loss: f64,
    seconds: f64,
}

fn run_once(scene: &Path, work: &Path, cfg: &PipelineConfig) -> Result<Run, String> {
    let start = Instant::now();
    let client = FixtureClient::load(&scene.join(TRANSCRIPT_FILE))?;
    let stage1 = work.join("lift");
    let run = |out_dir: &Path, model: Option<&Path>, stop_after| {
        run_pipeline(&PipelineRun {
            bundle: scene,
            config: cfg,
            model,
            client: &client,
            out_dir,
            stop_after,
            workers: 1,
        })
        .map_err(|e| e.to_string())
    };
    run(&stage1, None, Some(Stage::Lift))?;
    let crop: CropRecord = read_json(&stage1.join(CROP_FILE))?;
    ensure!(crop.indices.len() <= 8192, "crop has {} points", crop.indices.len());

    let bundle = load_scene_bundle(scene).map_err(|e| e.to_string())?;
    let samples = [(bundle, crop)];
    let (net, report) = train_on_crops(&samples, cfg).map_err(|e| e.to_string())?;
    let model = work.join("model.bin");
    write_checkpoint(&net, &model).map_err(|e| e.to_string())?;

    let full = work.join("full");
    let outcome = run(&full, Some(&model), None)?;
    let seconds = start.elapsed().as_secs_f64();
    let mask = outcome.mask.ok_or("pipeline produced no mask")?;
    let eval = outcome.report.ok_or("pipeline produced no evaluation report")?;

    let (bundle, crop) = &samples[0];
    let gt = bundle.ground_truth().ok_or("fixture has no ground truth")?.map_err(|e| e.to_string())?;
    let pred: Vec<bool> = crop.indices.iter().map(|&i| mask.flags()[i]).collect();
    let want: Vec<bool> = crop.indices.iter().map(|&i| gt.flags()[i]).collect();
    Ok(Run {
        model: fs::read(&model).map_err(|e| e.to_string())?,
        mask: fs::read(full.join(MASK_FILE)).map_err(|e| e.to_string())?,
        crop_iou: iou(&pred, &want).map_err(|e| e.to_string())?,
        miou: eval.miou,
        crop_len: crop.indices.len(),
        steps: report.losses.len(),
        final_loss: report.losses.last().copied().unwrap_or(f64::NAN),
        seconds,
    })
}

pub fn end_to_end_overfit() -> Outcome {
    let scene = fixture("scene12");
    let cfg = PipelineConfig { top_k: 4, n_crop: 1024, ..PipelineConfig::default() };
    ensure!(cfg.network.steps <= 300, "configured for {} steps", cfg.network.steps);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = run_once(&scene, &tmp.path().join("a"), &cfg)?;
    ensure!(a.seconds < MAX_SECONDS, "run took {:.0}s", a.seconds);
    ensure!(
        a.crop_iou >= MIN_MIOU && a.miou >= MIN_MIOU,
        "IoU on the training crop {:.4}, scene mIoU {:.4} (need {MIN_MIOU})",
        a.crop_iou,
        a.miou
    );
    let b = run_once(&scene, &tmp.path().join("b"), &cfg)?;
    ensure!(a.model == b.model, "checkpoints differ between two runs with seed {}", cfg.network.seed);
    ensure!(a.mask == b.mask, "predicted masks differ between two runs with seed {}", cfg.network.seed);
    Ok(format!(
        "crop {} points, {} steps (final loss {:.4}): crop IoU {:.4}, scene mIoU {:.4}, {:.0}s per run; second run bit-identical",
        a.crop_len, a.steps, a.final_loss, a.crop_iou, a.miou, a.seconds
    ))
}
