//! A direct-loop reimplementation of the refinement network, written against the
//! parameter names only, plus the attention normalization check.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tasa_core::autodiff::{Graph, Tensor};
use tasa_core::net::{
    pt_layer_forward, AttentionMode, CropGeometry, Neighborhood, NetworkConfig, ParamStore, PtLayerParams, RefineNet,
    StageConfig,
};

use crate::{ensure, Outcome};

type Rows = Vec<Vec<f64>>;

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Brute-force k nearest of `points` to `q`, ties by index.
pub fn brute_knn(points: &[[f64; 3]], q: &[f64; 3], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| d2(&points[a], q).total_cmp(&d2(&points[b], q)).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Brute-force farthest point sampling from `start`, ties by index.
pub fn brute_fps(points: &[[f64; 3]], m: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < m.min(points.len()) {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| d2(&points[i], &points[c])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        chosen.push(best.expect("unselected point remains").1);
    }
    chosen
}

fn mean_point(points: &[[f64; 3]]) -> [f64; 3] {
    let n = points.len() as f64;
    std::array::from_fn(|a| points.iter().map(|p| p[a]).sum::<f64>() / n)
}

struct Params<'a>(HashMap<&'a str, &'a Tensor>);

impl Params<'_> {
    fn t(&self, name: &str) -> &Tensor {
        self.0.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// `x W + b` row by row.
    fn linear(&self, x: &Rows, name: &str, bias: bool) -> Rows {
        let w = self.t(&format!("{name}.w"));
        x.iter()
            .map(|row| {
                (0..w.cols())
                    .map(|o| {
                        let mut s: f64 = row.iter().enumerate().map(|(c, v)| v * w.at(c, o)).sum();
                        if bias {
                            s += self.t(&format!("{name}.b")).at(0, o);
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    }

    fn mlp(&self, x: &Rows, name: &str) -> Rows {
        self.linear(&relu(self.linear(x, &format!("{name}.0"), true)), &format!("{name}.1"), true)
    }

    fn pt_layer(&self, x: &Rows, points: &[[f64; 3]], k: usize, name: &str, mode: AttentionMode) -> Rows {
        let q = self.linear(x, &format!("{name}.wq"), false);
        let key = self.linear(x, &format!("{name}.wk"), false);
        let v = self.linear(x, &format!("{name}.wv"), false);
        let c = q[0].len();
        let mut out = vec![vec![0.0; c]; points.len()];
        for (i, p) in points.iter().enumerate() {
            let nbrs = brute_knn(points, p, k);
            let deltas: Rows = nbrs.iter().map(|&j| (0..3).map(|a| points[j][a] - p[a]).collect()).collect();
            let gamma = self.mlp(&deltas, &format!("{name}.pos"));
            let rel: Rows = nbrs
                .iter()
                .enumerate()
                .map(|(s, &j)| (0..c).map(|ch| key[j][ch] - q[i][ch] + gamma[s][ch]).collect())
                .collect();
            let logits = self.mlp(&rel, &format!("{name}.attn"));
            let alpha = attention_weights(&logits, mode);
            for (s, &j) in nbrs.iter().enumerate() {
                for ch in 0..c {
                    out[i][ch] += alpha[s][ch] * (v[j][ch] + gamma[s][ch]);
                }
            }
        }
        out
    }
}

fn relu(x: Rows) -> Rows {
    x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `k × c` logits of one query to attention weights over its `k` neighbors.
fn attention_weights(logits: &Rows, mode: AttentionMode) -> Rows {
    let (k, c) = (logits.len(), logits[0].len());
    match mode {
        AttentionMode::Vector => {
            let cols: Rows = (0..c).map(|ch| softmax(&logits.iter().map(|r| r[ch]).collect::<Vec<_>>())).collect();
            (0..k).map(|s| (0..c).map(|ch| cols[ch][s]).collect()).collect()
        }
        AttentionMode::Scalar => {
            let w = softmax(&logits.iter().map(|r| r.iter().sum()).collect::<Vec<_>>());
            w.into_iter().map(|a| vec![a; c]).collect()
        }
    }
}

fn add_relu(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u + v).max(0.0)).collect()).collect()
}

/// The network evaluated with explicit loops: sampling, pooling, attention,
/// interpolation and the head, each recomputed from the point coordinates.
pub fn direct_forward(net: &RefineNet, points: &[[f64; 3]], flags: &[bool]) -> Vec<f64> {
    let cfg = net.config();
    let p = Params(net.params().iter().collect());
    let c = mean_point(points);
    let mut x: Rows = points
        .iter()
        .zip(flags)
        .map(|(q, &f)| vec![q[0] - c[0], q[1] - c[1], q[2] - c[2], if f { 1.0 } else { 0.0 }])
        .collect();
    let mut levels: Vec<Vec<[f64; 3]>> = Vec::new();
    let mut skips: Vec<Rows> = Vec::new();
    for (s, stage) in cfg.stages.iter().enumerate() {
        let mut h = relu(p.linear(&x, &format!("enc{s}.proj"), true));
        let pts = if s == 0 {
            points.to_vec()
        } else {
            let prev = levels.last().unwrap();
            let m = ((prev.len() as f64 * stage.ratio).round() as usize).clamp(1, prev.len());
            let pts: Vec<[f64; 3]> = if m == prev.len() {
                prev.clone()
            } else {
                let centre = mean_point(prev);
                let mut start = 0;
                for (i, q) in prev.iter().enumerate() {
                    if d2(q, &centre) > d2(&prev[start], &centre) {
                        start = i;
                    }
                }
                brute_fps(prev, m, start).into_iter().map(|i| prev[i]).collect()
            };
            let kp = cfg.k_attn.min(prev.len());
            h = pts
                .iter()
                .map(|q| {
                    let nn = brute_knn(prev, q, kp);
                    (0..h[0].len()).map(|ch| nn.iter().map(|&j| h[j][ch]).sum::<f64>() / kp as f64).collect()
                })
                .collect();
            pts
        };
        let k = cfg.k_attn.min(pts.len());
        x = add_relu(&h, &p.pt_layer(&h, &pts, k, &format!("enc{s}.pt"), cfg.attention));
        levels.push(pts);
        skips.push(x.clone());
    }
    x = relu(p.linear(&x, "bottleneck", true));
    for i in (0..cfg.stages.len() - 1).rev() {
        let (fine, coarse) = (&levels[i], &levels[i + 1]);
        let kk = 3.min(coarse.len());
        let cat: Rows = fine
            .iter()
            .enumerate()
            .map(|(r, q)| {
                let nn = brute_knn(coarse, q, kk);
                let raw: Vec<f64> = nn.iter().map(|&j| 1.0 / (d2(&coarse[j], q) + 1e-8)).collect();
                let total: f64 = raw.iter().sum();
                let mut row: Vec<f64> =
                    (0..x[0].len()).map(|ch| nn.iter().zip(&raw).map(|(&j, w)| w / total * x[j][ch]).sum()).collect();
                row.extend_from_slice(&skips[i][r]);
                row
            })
            .collect();
        let h = relu(p.linear(&cat, &format!("dec{i}.fuse"), true));
        let k = cfg.k_attn.min(fine.len());
        x = add_relu(&h, &p.pt_layer(&h, fine, k, &format!("dec{i}.pt"), cfg.attention));
    }
    let h = relu(p.linear(&x, "head.0", true));
    p.linear(&h, "head.1", true).into_iter().map(|r| r[0]).collect()
}

pub fn random_config(rng: &mut ChaCha8Rng) -> NetworkConfig {
    let stages = rng.gen_range(1..=3);
    NetworkConfig {
        stages: (0..stages)
            .map(|i| StageConfig {
                ratio: if i == 0 { 1.0 } else { rng.gen_range(0.3..0.9) },
                width: rng.gen_range(2..=6),
            })
            .collect(),
        k_attn: rng.gen_range(1..=5),
        attention: if rng.gen::<bool>() { AttentionMode::Vector } else { AttentionMode::Scalar },
        seed: rng.gen(),
        ..NetworkConfig::default()
    }
}

pub fn dual_implementation() -> Outcome {
    const TOL: f64 = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(0xd0a1);
    let mut worst = 0.0f64;
    let instances = 60;
    for inst in 0..instances {
        let cfg = random_config(&mut rng);
        let n = rng.gen_range(1..=16);
        let points: Vec<[f64; 3]> =
            (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5)]).collect();
        let flags: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let mut net = RefineNet::new(&cfg).map_err(|e| e.to_string())?;
        for t in net.params_mut().tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let geom = CropGeometry::build(&points, &flags, &cfg).map_err(|e| e.to_string())?;
        let graph = net.logits(&geom).map_err(|e| e.to_string())?;
        let direct = direct_forward(&net, &points, &flags);
        ensure!(graph.len() == direct.len(), "instance {inst}: {} vs {} outputs", graph.len(), direct.len());
        for (i, (a, b)) in graph.iter().zip(&direct).enumerate() {
            let d = (a - b).abs();
            ensure!(d <= TOL, "instance {inst} ({cfg:?}, n={n}) point {i}: graph {a} vs direct {b}");
            worst = worst.max(d);
        }
    }
    Ok(format!("{instances} random configs with 1-16 points, max |graph - direct| = {worst:.2e} (<= {TOL:e})"))
}

pub fn attention_normalization() -> Outcome {
    const TOL: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(0xa77e);
    let mut worst = 0.0f64;
    let mut sums = 0usize;
    let configs = 200;
    for _ in 0..configs {
        let n = rng.gen_range(1..=48);
        let k = rng.gen_range(1..=n.min(16));
        let (c_in, c_out) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let mode = if rng.gen::<bool>() { AttentionMode::Vector } else { AttentionMode::Scalar };
        // Scaling parameters up drives the softmax logits far from zero.
        let scale = [0.1, 1.0, 10.0, 50.0][rng.gen_range(0..4)];
        let mut store = ParamStore::new();
        let params = PtLayerParams::init(&mut store, "pt", c_in, c_out, &mut rng);
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v = (*v + rng.gen_range(-0.5..0.5)) * scale;
            }
        }
        let pts: Vec<[f64; 3]> =
            (0..n).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        let nb = Neighborhood::build(&pts, k).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.constant(Tensor::new(n, c_in, (0..n * c_in).map(|_| rng.gen_range(-3.0..3.0)).collect()));
        let out = pt_layer_forward(&mut g, &bound, &params, &nb, x, mode).map_err(|e| e.to_string())?;
        let alpha = g.value(out.attention);
        ensure!(alpha.shape() == (n * k, c_out), "attention shape {:?}", alpha.shape());
        for i in 0..n {
            for ch in 0..c_out {
                let s: f64 = (0..k).map(|j| alpha.at(i * k + j, ch)).sum();
                ensure!((s - 1.0).abs() <= TOL, "query {i} channel {ch}: sum {s} ({mode:?}, n={n}, k={k})");
                ensure!((0..k).all(|j| alpha.at(i * k + j, ch) >= 0.0), "negative weight for query {i}");
                worst = worst.max((s - 1.0).abs());
                sums += 1;
            }
        }
    }
    Ok(format!("{configs} layer configs, {sums} query-channel sums, max |sum - 1| = {worst:.2e} (<= {TOL:e})"))
}
