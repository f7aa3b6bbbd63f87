//! Frame ranking against exhaustive recomputation, scripted double-check scenarios
//! and the selection/detection work counters.

use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tasa_core::bridge::{
    double_check, BridgeError, BridgeOp, BridgeRequest, BridgeResponse, FixtureClient, ManipulablePoint2D, Provenance,
    TransportError, VerifyMode, VlmClient,
};
use tasa_core::pipeline::{run_pipeline, stage_select, PipelineConfig, PipelineRun, Stage};
use tasa_core::scene::{
    concept_record_name, frame_record_name, load_scene_bundle, AffordanceConceptSet, CameraFrame, EmbeddingTable,
    EmbeddingVector, PointCloud, SceneBundle, TaskInstruction, EMBEDDING_DIM, TASK_RECORD,
};
use tasa_core::select::{rank_frames, FrameScore, SelectionConfig};
use tasa_core::synth::{CONCEPT, TRANSCRIPT_FILE};

use crate::{ensure, fixture, Outcome};

fn camera(id: &str, width: u32, height: u32) -> CameraFrame {
    CameraFrame {
        id: id.into(),
        intrinsics: [[100.0, 0.0, width as f64 / 2.0], [0.0, 100.0, height as f64 / 2.0], [0.0, 0.0, 1.0]],
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0, 0.0, 1.0],
        width,
        height,
        image_path: format!("images/{id}.png"),
        depth_path: None,
        depth: None,
    }
}

fn random_embedding(rng: &mut ChaCha8Rng, scale: f32) -> EmbeddingVector {
    EmbeddingVector::new((0..EMBEDDING_DIM).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect()).expect("nonzero")
}

fn as_f64(v: &EmbeddingVector) -> Vec<f64> {
    v.values().iter().map(|&x| x as f64).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(frame id, sim, S)` recomputed frame by frame from the raw vectors.
fn exhaustive(frames: &[(String, Vec<f64>)], task: &[f64], concepts: &[Vec<f64>]) -> Vec<(String, f64, f64)> {
    let norm = |v: &[f64]| dot(v, v).sqrt();
    frames
        .iter()
        .map(|(id, f)| {
            let sim = (dot(f, task) / (norm(f) * norm(task))).clamp(-1.0, 1.0);
            let s = concepts
                .iter()
                .map(|c| {
                    let own = dot(c, f).exp();
                    let total: f64 = frames.iter().map(|(_, g)| dot(c, g).exp()).sum();
                    own / total
                })
                .sum::<f64>()
                / concepts.len() as f64;
            (id.clone(), sim, s)
        })
        .collect()
}

fn order_by(scores: &[FrameScore], key: impl Fn(&FrameScore) -> f64) -> Vec<String> {
    let mut v: Vec<&FrameScore> = scores.iter().collect();
    v.sort_by(|a, b| key(b).total_cmp(&key(a)).then_with(|| a.frame_id.cmp(&b.frame_id)));
    v.into_iter().map(|s| s.frame_id.clone()).collect()
}

pub fn ranking_oracle() -> Outcome {
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1);
    let sets = 100;
    let mut worst = 0.0f64;
    for set in 0..sets {
        let n = rng.gen_range(1..=40);
        let k = rng.gen_range(1..=4);
        // Larger scales give peaked softmax weights.
        let scale = [0.02f32, 0.1, 0.3][set % 3];
        let mut ids: Vec<String> = (0..n).map(|i| format!("view_{:02}", (i * 7 + set) % 97)).collect();
        ids.sort();
        ids.dedup();
        ids.shuffle(&mut rng);
        let mut table = EmbeddingTable::new();
        let mut raw = Vec::new();
        for id in &ids {
            let e = random_embedding(&mut rng, scale);
            raw.push((id.clone(), as_f64(&e)));
            table.insert(frame_record_name(id), e);
        }
        let task = random_embedding(&mut rng, scale);
        table.insert(TASK_RECORD, task.clone());
        let concepts: Vec<EmbeddingVector> = (0..k).map(|_| random_embedding(&mut rng, scale)).collect();
        let bundle = SceneBundle {
            root: Default::default(),
            cloud: PointCloud::new("c", vec![[0.0; 3]], None).unwrap(),
            frames: ids.iter().map(|id| camera(id, 32, 24)).collect(),
            task: TaskInstruction::new("open it").unwrap(),
            ground_truth_mask: None,
            embeddings: table,
        };
        let concept_refs: Vec<&EmbeddingVector> = concepts.iter().collect();
        let craw: Vec<Vec<f64>> = concepts.iter().map(as_f64).collect();
        let oracle = exhaustive(&raw, &as_f64(&task), &craw);

        for alpha_a in [0.0, 0.25, 0.5, 0.8, 1.0, rng.gen_range(0.0..1.0)] {
            let cfg = SelectionConfig { alpha_a, top_k: 5 };
            let ranking = rank_frames(&bundle, &task, &concept_refs, &cfg).map_err(|e| e.to_string())?;
            ensure!(ranking.scores.len() == ids.len(), "set {set}: {} scores", ranking.scores.len());
            for s in &ranking.scores {
                let (_, sim, aff) = oracle.iter().find(|o| o.0 == s.frame_id).expect("oracle has every frame");
                let fin = alpha_a * sim + (1.0 - alpha_a) * aff;
                for (got, want, what) in
                    [(s.sim_clip, *sim, "sim"), (s.affordance_score, *aff, "S"), (s.final_score, fin, "final")]
                {
                    let d = (got - want).abs();
                    ensure!(d <= TOL, "set {set} frame {}: {what} {got} vs exhaustive {want}", s.frame_id);
                    worst = worst.max(d);
                }
            }
            let mut want: Vec<(String, f64)> =
                oracle.iter().map(|(id, sim, aff)| (id.clone(), alpha_a * sim + (1.0 - alpha_a) * aff)).collect();
            want.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let got: Vec<&str> = ranking.scores.iter().map(|s| s.frame_id.as_str()).collect();
            let want_ids: Vec<&str> = want.iter().map(|w| w.0.as_str()).collect();
            ensure!(got == want_ids, "set {set} alpha {alpha_a}: rank order differs from exhaustive");

            let ids_in_rank: Vec<String> = ranking.scores.iter().map(|s| s.frame_id.clone()).collect();
            if alpha_a == 1.0 {
                ensure!(
                    ids_in_rank == order_by(&ranking.scores, |s| s.sim_clip),
                    "set {set}: alpha_a = 1 order differs from sim_clip order"
                );
                ensure!(ranking.scores.iter().all(|s| s.final_score == s.sim_clip), "set {set}: final != sim");
            }
            if alpha_a == 0.0 {
                ensure!(
                    ids_in_rank == order_by(&ranking.scores, |s| s.affordance_score),
                    "set {set}: alpha_a = 0 order differs from S order"
                );
                ensure!(ranking.scores.iter().all(|s| s.final_score == s.affordance_score), "set {set}: final != S");
            }
        }
    }
    Ok(format!(
        "{sets} random embedding sets x 6 alpha values match exhaustive recomputation (max diff {worst:.1e}); alpha_a in {{0,1}} orderings exact"
    ))
}

/// Answers from a closure and records every request.
struct Scripted<F> {
    answer: F,
    log: Mutex<Vec<BridgeRequest>>,
}

impl<F: Fn(&BridgeRequest) -> Result<BridgeResponse, TransportError> + Send + Sync> Scripted<F> {
    fn new(answer: F) -> Self {
        Self { answer, log: Mutex::new(Vec::new()) }
    }

    fn ops(&self) -> Vec<BridgeOp> {
        self.log.lock().unwrap().iter().map(|r| r.op).collect()
    }

    fn fallback_concepts(&self) -> Vec<String> {
        self.log.lock().unwrap().iter().filter_map(|r| r.concept.clone()).collect()
    }
}

impl<F: Fn(&BridgeRequest) -> Result<BridgeResponse, TransportError> + Send + Sync> VlmClient for Scripted<F> {
    fn call(&self, req: &BridgeRequest) -> Result<BridgeResponse, TransportError> {
        self.log.lock().unwrap().push(req.clone());
        (self.answer)(req)
    }
}

/// The behavior of one scripted VLM.
#[derive(Clone, Default)]
struct Script {
    propose: Vec<[i64; 2]>,
    propose_fails: bool,
    /// Points verified true; others get false.
    accept: Vec<[i64; 2]>,
    /// Points whose verification fails in transport.
    verify_fails: Vec<[i64; 2]>,
    verify_malformed: bool,
    fallback: Vec<(&'static str, Vec<[i64; 2]>)>,
    fallback_fails: bool,
}

fn scripted(s: Script) -> Scripted<impl Fn(&BridgeRequest) -> Result<BridgeResponse, TransportError> + Send + Sync> {
    Scripted::new(move |req: &BridgeRequest| match req.op {
        BridgeOp::ProposePoints if s.propose_fails => Err(TransportError("connection reset".into())),
        BridgeOp::ProposePoints => Ok(BridgeResponse::with_points(req.op, s.propose.clone())),
        BridgeOp::VerifyPoint => {
            let p = req.point.expect("verify carries a point");
            if s.verify_malformed {
                Ok(BridgeResponse::new(BridgeOp::VerifyPoint))
            } else if s.verify_fails.contains(&p) {
                Ok(BridgeResponse::error(req.op, "timeout"))
            } else {
                Ok(BridgeResponse::verdict(s.accept.contains(&p)))
            }
        }
        BridgeOp::FallbackPoints if s.fallback_fails => Err(TransportError("fallback unavailable".into())),
        BridgeOp::FallbackPoints => {
            let c = req.concept.as_deref().expect("fallback carries a concept");
            let pts = s.fallback.iter().find(|(n, _)| *n == c).map(|(_, p)| p.clone()).unwrap_or_default();
            Ok(BridgeResponse::with_points(req.op, pts))
        }
        op => Ok(BridgeResponse::error(op, "unexpected op")),
    })
}

type Points = Result<Vec<ManipulablePoint2D>, BridgeError>;

struct Scenario {
    name: &'static str,
    script: Script,
    concepts: &'static [&'static str],
    mode: VerifyMode,
    check: fn(&Points, &[BridgeOp], &[String]) -> Result<(), String>,
}

fn coords(r: &Points) -> Vec<(u32, u32, Provenance)> {
    r.as_ref().map(|v| v.iter().map(|p| (p.x, p.y, p.provenance)).collect()).unwrap_or_default()
}

use BridgeOp::{FallbackPoints as F, ProposePoints as P, VerifyPoint as V};

fn scenarios() -> Vec<Scenario> {
    vec![
        Scenario {
            name: "one accepted, one rejected proposal: no fallback",
            script: Script { propose: vec![[10, 20], [30, 40]], accept: vec![[10, 20]], ..Script::default() },
            concepts: &["handle"],
            mode: VerifyMode::Strict,
            check: |r, ops, _| {
                ensure!(coords(r) == [(10, 20, Provenance::ReverseValidated)], "got {:?}", coords(r));
                ensure!(ops == [P, V, V], "ops {ops:?}");
                Ok(())
            },
        },
        Scenario {
            name: "empty proposal: fallback per concept",
            script: Script { fallback: vec![("handle", vec![[5, 6]])], ..Script::default() },
            concepts: &["handle"],
            mode: VerifyMode::Strict,
            check: |r, ops, _| {
                let v = r.as_ref().map_err(|e| e.to_string())?;
                ensure!(coords(r) == [(5, 6, Provenance::Fallback)], "got {:?}", coords(r));
                ensure!(v[0].concept.as_deref() == Some("handle"), "concept {:?}", v[0].concept);
                ensure!(ops == [P, F], "ops {ops:?}");
                Ok(())
            },
        },
        Scenario {
            name: "empty proposal and empty fallback: empty result",
            script: Script::default(),
            concepts: &["handle"],
            mode: VerifyMode::Strict,
            check: |r, ops, _| {
                ensure!(r.as_ref().is_ok_and(|v| v.is_empty()), "got {:?}", coords(r));
                ensure!(ops == [P, F], "ops {ops:?}");
                Ok(())
            },
        },
        Scenario {
            name: "all proposals rejected: still no fallback",
            script: Script { propose: vec![[1, 1], [2, 2]], ..Script::default() },
            concepts: &["handle"],
            mode: VerifyMode::Strict,
            check: |r, ops, _| {
                ensure!(r.as_ref().is_ok_and(|v| v.is_empty()), "got {:?}", coords(r));
                ensure!(!ops.contains(&F), "fallback issued: {ops:?}");
                Ok(())
            },
        },
        Scenario {
            name: "only out-of-bounds proposals count as an empty proposal",
            script: Script {
                propose: vec![[700, 20], [-1, 3]],
                fallback: vec![("handle", vec![[7, 7]])],
                ..Script::default()
            },
            concepts: &["handle"],
            mode: VerifyMode::Strict,
            check: |r, ops, _| {
                ensure!(coords(r) == [(7, 7, Provenance::Fallback)], "got {:?}", coords(r));
                ensure!(ops == [P, F], "ops {ops:?}");
                Ok(())
            },
        },
        Scenario {
            name: "strict mode: verification transport error rejects the point",
            script: Script {
                propose: vec![[3, 4], [8, 9]],
                accept: vec![[8, 9]],
                verify_fails: vec![[3, 4]],
                ..Script::default()
            },
            concepts: &["handle"],
            mode: VerifyMode::Strict,
            check: |r, ops, _| {
                ensure!(coords(r) == [(8, 9, Provenance::ReverseValidated)], "got {:?}", coords(r));
                ensure!(ops == [P, V, V], "ops {ops:?}");
                Ok(())
            },
        },
        Scenario {
            name: "lenient mode: verification transport error keeps the point as direct",
            script: Script { propose: vec![[3, 4]], verify_fails: vec![[3, 4]], ..Script::default() },
            concepts: &["handle"],
            mode: VerifyMode::Lenient,
            check: |r, ops, _| {
                ensure!(coords(r) == [(3, 4, Provenance::Direct)], "got {:?}", coords(r));
                ensure!(ops == [P, V], "ops {ops:?}");
                Ok(())
            },
        },
        Scenario {
            name: "strict mode: every verification failing yields an empty set without fallback",
            script: Script { propose: vec![[3, 4], [5, 5]], verify_fails: vec![[3, 4], [5, 5]], ..Script::default() },
            concepts: &["handle"],
            mode: VerifyMode::Strict,
            check: |r, ops, _| {
                ensure!(r.as_ref().is_ok_and(|v| v.is_empty()), "got {:?}", coords(r));
                ensure!(ops == [P, V, V], "ops {ops:?}");
                Ok(())
            },
        },
        Scenario {
            name: "proposal transport error surfaces with the op",
            script: Script { propose_fails: true, ..Script::default() },
            concepts: &["handle"],
            mode: VerifyMode::Strict,
            check: |r, ops, _| {
                ensure!(
                    matches!(r, Err(BridgeError::Transport { op: BridgeOp::ProposePoints, .. })),
                    "got {:?}",
                    r.as_ref().err()
                );
                ensure!(ops == [P], "ops {ops:?}");
                Ok(())
            },
        },
        Scenario {
            name: "fallback transport error surfaces",
            script: Script { fallback_fails: true, ..Script::default() },
            concepts: &["handle"],
            mode: VerifyMode::Strict,
            check: |r, _, _| {
                ensure!(
                    matches!(r, Err(BridgeError::Transport { op: BridgeOp::FallbackPoints, .. })),
                    "got {:?}",
                    r.as_ref().err()
                );
                Ok(())
            },
        },
        Scenario {
            name: "malformed verdict is an error even in strict mode",
            script: Script { propose: vec![[1, 2]], verify_malformed: true, ..Script::default() },
            concepts: &["handle"],
            mode: VerifyMode::Strict,
            check: |r, _, _| {
                ensure!(matches!(r, Err(BridgeError::MalformedResponse { .. })), "got {:?}", coords(r));
                Ok(())
            },
        },
        Scenario {
            name: "fallback union across concepts, deduplicated by pixel",
            script: Script {
                fallback: vec![("knob", vec![[4, 4], [9, 1]]), ("handle", vec![[9, 1], [2, 8]])],
                ..Script::default()
            },
            concepts: &["knob", "handle"],
            mode: VerifyMode::Strict,
            check: |r, ops, asked| {
                let v = r.as_ref().map_err(|e| e.to_string())?;
                let xy: Vec<(u32, u32)> = v.iter().map(|p| (p.x, p.y)).collect();
                ensure!(xy == [(2, 8), (4, 4), (9, 1)], "got {xy:?}");
                let shared = v.iter().find(|p| (p.x, p.y) == (9, 1)).unwrap();
                ensure!(shared.concept.as_deref() == Some("handle"), "shared point concept {:?}", shared.concept);
                ensure!(ops == [P, F, F], "ops {ops:?}");
                ensure!(asked == ["knob", "handle"], "fallback concepts {asked:?}");
                Ok(())
            },
        },
        Scenario {
            name: "duplicate accepted proposals collapse to one point, sorted by (x, y)",
            script: Script {
                propose: vec![[9, 9], [1, 5], [9, 9], [1, 2]],
                accept: vec![[9, 9], [1, 5], [1, 2]],
                ..Script::default()
            },
            concepts: &["handle"],
            mode: VerifyMode::Strict,
            check: |r, ops, _| {
                let xy: Vec<(u32, u32)> = coords(r).into_iter().map(|(x, y, _)| (x, y)).collect();
                ensure!(xy == [(1, 2), (1, 5), (9, 9)], "got {xy:?}");
                ensure!(ops == [P, V, V, V, V], "ops {ops:?}");
                Ok(())
            },
        },
    ]
}

pub fn double_check_protocol() -> Outcome {
    let frame = camera("frame_000", 640, 480);
    let task = TaskInstruction::new("open the bottom drawer").unwrap();
    let list = scenarios();
    for sc in &list {
        let concepts = AffordanceConceptSet::from_raw(sc.concepts.iter().copied()).map_err(|e| e.to_string())?;
        let client = scripted(sc.script.clone());
        let result = double_check(&client, &frame, &task, &concepts, sc.mode);
        (sc.check)(&result, &client.ops(), &client.fallback_concepts()).map_err(|e| format!("{}: {e}", sc.name))?;
        // Set-union semantics: reversing the concept order changes nothing but call order.
        if sc.concepts.len() > 1 {
            let rev = AffordanceConceptSet::from_raw(sc.concepts.iter().rev().copied()).unwrap();
            let again = double_check(&scripted(sc.script.clone()), &frame, &task, &rev, sc.mode);
            ensure!(again.as_ref().ok() == result.as_ref().ok(), "{}: result depends on concept order", sc.name);
        }
        // Fallback iff the in-bounds proposal is empty.
        let in_bounds = sc.script.propose.iter().any(|p| frame.contains_pixel(p[0], p[1]));
        if !sc.script.propose_fails && result.is_ok() {
            ensure!(
                client.ops().contains(&F) != in_bounds,
                "{}: fallback issued = {} with non-empty proposal = {in_bounds}",
                sc.name,
                client.ops().contains(&F)
            );
        }
    }
    Ok(format!("{} scripted scenarios (fallback iff P is empty, strict/lenient errors, union semantics)", list.len()))
}

fn fixture_config(top_k: usize) -> PipelineConfig {
    PipelineConfig { top_k, ..PipelineConfig::default() }
}

pub fn efficiency_telemetry() -> Outcome {
    let dir = fixture("scene100");
    let bundle = load_scene_bundle(&dir).map_err(|e| e.to_string())?;
    ensure!(bundle.frames.len() == 100, "fixture has {} frames", bundle.frames.len());

    // Selection cost over growing prefixes of the frame list.
    let concepts = vec![CONCEPT.to_string()];
    ensure!(bundle.embeddings.require(&concept_record_name(CONCEPT)).is_ok(), "fixture lacks the concept embedding");
    let mut per_frame = Vec::new();
    for n in [10, 25, 50, 100] {
        let mut sub = bundle.clone();
        sub.frames.truncate(n);
        let sel =
            stage_select(&sub, &concepts, &SelectionConfig { alpha_a: 0.5, top_k: 10 }).map_err(|e| e.to_string())?;
        per_frame.push((n, sel.dot_products));
    }
    let unit = per_frame[0].1 as f64 / per_frame[0].0 as f64;
    for &(n, d) in &per_frame {
        ensure!(d as f64 == unit * n as f64, "selection work {d} for N={n} is not linear ({unit} per frame)");
    }

    let client = FixtureClient::load(&dir.join(TRANSCRIPT_FILE))?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut calls = Vec::new();
    for k in [10, 100] {
        let cfg = fixture_config(k);
        let out = tmp.path().join(format!("k{k}"));
        let outcome = run_pipeline(&PipelineRun {
            bundle: &dir,
            config: &cfg,
            model: None,
            client: &client,
            out_dir: &out,
            stop_after: Some(Stage::Detect),
            workers: 1,
        })
        .map_err(|e| e.to_string())?;
        let detect = outcome.timing.stage("detect").ok_or("timing report lacks the detect stage")?;
        let select = outcome.timing.stage("select").ok_or("timing report lacks the select stage")?;
        ensure!(detect.work["frames"] == k as u64, "detect processed {} frames for K={k}", detect.work["frames"]);
        ensure!(select.work["frames"] == 100, "select saw {} frames", select.work["frames"]);
        ensure!(out.join("timing.json").is_file(), "timing.json not written");
        calls.push(detect.work["client_calls"]);
    }
    let ratio = calls[1] as f64 / calls[0] as f64;
    ensure!(ratio >= 5.0, "K=N used {} client calls, K=10 used {}: ratio {ratio:.2} < 5", calls[1], calls[0]);
    Ok(format!(
        "selection dot products {per_frame:?} = {unit} per frame; detect client calls K=10: {}, K=N=100: {} ({ratio:.1}x fewer)",
        calls[0], calls[1]
    ))
}
