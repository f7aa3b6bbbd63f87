//! Loss identities against hand-written formulas, and AP/mIoU behavior.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tasa_core::metrics::{bce, dice, evaluate, focal, soft_iou_loss, total_loss, LossConfig, LossWeights, ScoredMask};

use crate::{ensure, Outcome};

fn random_case(rng: &mut ChaCha8Rng, n: usize, soft: bool) -> (Vec<f64>, Vec<f64>) {
    let probs = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
    let labels = (0..n).map(|_| if soft { rng.gen_range(0.0..1.0) } else { rng.gen_bool(0.5) as u8 as f64 }).collect();
    (probs, labels)
}

pub fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1055);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = rng.gen_range(1..200);
        let (p, l) = random_case(&mut rng, n, case % 2 == 1);
        let f = focal(&p, &l, 0.0, 1.0).map_err(|e| e.to_string())?;
        let b = bce(&p, &l).map_err(|e| e.to_string())?;
        let d = (f - b).abs();
        ensure!(d <= 1e-12, "case {case}: focal(gamma=0, alpha_f=1) = {f}, bce = {b}");
        worst = worst.max(d);
    }

    for n in [1usize, 2, 5, 17, 100, 1000] {
        for pattern in 0..3 {
            let labels: Vec<f64> = (0..n)
                .map(|i| match pattern {
                    0 => 1.0,
                    1 => (i % 3 == 0) as u8 as f64,
                    _ => (i == n / 2) as u8 as f64,
                })
                .collect();
            let slack = 1.0 / (2.0 * n as f64 + 1.0);
            let d = dice(&labels, &labels).map_err(|e| e.to_string())?;
            let s = soft_iou_loss(&labels, &labels).map_err(|e| e.to_string())?;
            ensure!(d < slack && d >= 0.0, "n={n} pattern {pattern}: dice {d} not within slack {slack}");
            ensure!(s < slack && s >= 0.0, "n={n} pattern {pattern}: soft-IoU {s} not within slack {slack}");
        }
    }

    // Fixed 8-point case, with every term written out independently.
    let p: [f64; 8] = [0.9, 0.2, 0.7, 0.4, 0.05, 0.6, 0.85, 0.3];
    let l: [f64; 8] = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    let (gamma, alpha_f) = (2.0, 0.25);
    let n = p.len() as f64;
    let pt = |i: usize| -> f64 {
        if l[i] == 1.0 {
            p[i]
        } else {
            1.0 - p[i]
        }
    };
    let want_bce = -(0..8).map(|i| pt(i).ln()).sum::<f64>() / n;
    let inter: f64 = (0..8).map(|i| p[i] * l[i]).sum();
    let (sp, sl) = (p.iter().sum::<f64>(), l.iter().sum::<f64>());
    let want_dice = 1.0 - (2.0 * inter + 1.0) / (sp + sl + 1.0);
    let want_focal = -(0..8).map(|i| alpha_f * (1.0 - pt(i)).powi(2) * pt(i).ln()).sum::<f64>() / n;
    let want_iou = 1.0 - (inter + 1.0) / (sp + sl - inter + 1.0);
    let want = 0.3 * want_bce + 0.3 * want_dice + 0.2 * want_focal + 0.2 * want_iou;
    let cfg = LossConfig { weights: LossWeights::new(0.3, 0.3, 0.2, 0.2).map_err(|e| e.to_string())?, gamma, alpha_f };
    let got = total_loss(&p, &l, &cfg).map_err(|e| e.to_string())?;
    ensure!((got - want).abs() <= 1e-12, "8-point total loss {got}, hand-computed {want}");
    Ok(format!(
        "focal(0, 1) = bce on 200 cases (max diff {worst:.1e}); perfect predictions within 1/(2n+1); 8-point total {got:.12} = hand {want:.12}"
    ))
}

fn single(gt: Vec<usize>, preds: Vec<ScoredMask>) -> (BTreeMap<String, Vec<ScoredMask>>, BTreeMap<String, Vec<usize>>) {
    (BTreeMap::from([("t".to_string(), preds)]), BTreeMap::from([("t".to_string(), gt)]))
}

fn mask(id: &str, confidence: f64, indices: Vec<usize>) -> ScoredMask {
    ScoredMask { id: id.into(), confidence, indices }
}

fn ascending_subset(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<usize> {
    (0..n).filter(|_| rng.gen_bool(p)).collect()
}

pub fn metric_checks() -> Outcome {
    // gt {0,1,2,3} vs pred {0,1,2,4}: IoU = 3/5.
    let (p, g) = single(vec![0, 1, 2, 3], vec![mask("a", 0.8, vec![0, 1, 2, 4])]);
    let r = evaluate(&p, &g).map_err(|e| e.to_string())?;
    ensure!(r.per_task[0].iou == 0.6, "IoU {} != 0.6", r.per_task[0].iou);
    for &(t, ap) in &r.ap_per_threshold {
        let want = if t <= 0.6 { 1.0 } else { 0.0 };
        ensure!(ap == want, "AP at {t} = {ap}, expected {want}");
    }
    ensure!(r.ap_per_threshold.len() == 10, "{} thresholds", r.ap_per_threshold.len());
    ensure!((r.map - 0.3).abs() < 1e-12, "mAP {} != 0.3", r.map);
    ensure!(r.ap50 == 1.0 && r.ap25 == 1.0, "ap50 {} ap25 {}", r.ap50, r.ap25);
    ensure!(r.miou == 0.6, "mIoU {}", r.miou);

    let mut rng = ChaCha8Rng::seed_from_u64(0xa9);
    let reports = 300;
    for case in 0..reports {
        let tasks = rng.gen_range(1..6);
        let mut preds = BTreeMap::new();
        let mut gts = BTreeMap::new();
        for t in 0..tasks {
            let n = rng.gen_range(5..60);
            let gt = ascending_subset(&mut rng, n, 0.4);
            let k = rng.gen_range(0..4);
            let ps: Vec<ScoredMask> = (0..k)
                .map(|j| {
                    // Mostly perturbations of the ground truth so that IoU spans the thresholds.
                    let idx: Vec<usize> = (0..n)
                        .filter(|i| if gt.contains(i) { rng.gen_bool(0.85) } else { rng.gen_bool(0.1) })
                        .collect();
                    mask(&format!("p{j}"), (rng.gen_range(0..5) as f64) / 4.0, idx)
                })
                .collect();
            preds.insert(format!("task{t}"), ps);
            gts.insert(format!("task{t}"), gt);
        }
        let r = evaluate(&preds, &gts).map_err(|e| e.to_string())?;
        for w in r.ap_per_threshold.windows(2) {
            ensure!(w[1].1 <= w[0].1, "case {case}: AP rises from {:?} to {:?}", w[0], w[1]);
        }
        ensure!(
            r.map <= r.ap50 + 1e-12 && r.ap50 <= r.ap25,
            "case {case}: mAP {} ap50 {} ap25 {}",
            r.map,
            r.ap50,
            r.ap25
        );
        for v in [r.map, r.ap50, r.ap25, r.miou] {
            ensure!((0.0..=1.0).contains(&v), "case {case}: metric {v} outside [0, 1]");
        }
    }
    Ok(format!(
        "IoU 0.6 case gives AP 1 up to 0.60 and 0 above (mAP 0.3, ap50 = ap25 = 1); {reports} random reports monotone across thresholds"
    ))
}
