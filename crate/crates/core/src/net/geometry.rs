//! Point-set geometry the network precomputes once per crop: neighbor tables,
//! farthest point sampling and inverse-distance interpolation weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NetError;
use crate::autodiff::{RowMix, Tensor};
use crate::spatial::{dist2, SpatialIndex};

pub const INTERP_NEIGHBORS: usize = 3;
pub const INTERP_EPS: f64 = 1e-8;

/// Flat `n×k` table: row `i` holds the `k` nearest points to `i` (self first unless
/// duplicated at a lower index), nearest first, ties by index.
pub fn knn_neighbors(points: &[[f64; 3]], k: usize) -> Result<Vec<usize>, NetError> {
    if k == 0 || k > points.len() {
        return Err(NetError::KExceedsPointCount { k, n: points.len() });
    }
    let index = SpatialIndex::build(points.to_vec());
    Ok(points.iter().flat_map(|p| index.knn(p, k).into_iter().map(|n| n.index)).collect())
}

/// Nearest `k` of `points` for each query, flattened `queries.len() × k`.
pub(crate) fn knn_table(index: &SpatialIndex, queries: &[[f64; 3]], k: usize) -> Vec<usize> {
    queries.iter().flat_map(|q| index.knn(q, k).into_iter().map(|n| n.index)).collect()
}

/// Farthest point sampling starting at `start`. Each step picks the point maximizing
/// its distance to the selected set, lowest index on ties.
pub fn fps_from(points: &[[f64; 3]], m: usize, start: usize) -> Vec<usize> {
    let n = points.len();
    let m = m.min(n);
    if m == 0 {
        return Vec::new();
    }
    let mut selected = vec![false; n];
    let mut mind = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(m);
    let mut cur = start;
    for _ in 0..m {
        selected[cur] = true;
        out.push(cur);
        let pc = points[cur];
        let mut best = None::<(f64, usize)>;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = dist2(&points[i], &pc);
            if d < mind[i] {
                mind[i] = d;
            }
            if best.is_none_or(|(bd, _)| mind[i] > bd) {
                best = Some((mind[i], i));
            }
        }
        match best {
            Some((_, i)) => cur = i,
            None => break,
        }
    }
    out
}

/// Farthest point sampling from a start index drawn from `seed`.
pub fn fps_downsample(points: &[[f64; 3]], m: usize, seed: u64) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    let start = ChaCha8Rng::seed_from_u64(seed).gen_range(0..points.len());
    fps_from(points, m, start)
}

/// The point farthest from the centroid, lowest index on ties. Depends only on the
/// point set, so sampling from it commutes with re-indexing.
pub fn geometric_start(points: &[[f64; 3]]) -> usize {
    let c = centroid(points);
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, &c);
        if d > best.0 {
            best = (d, i);
        }
    }
    best.1
}

pub fn centroid(points: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    let n = points.len().max(1) as f64;
    c.map(|v| v / n)
}

/// Row mixing that interpolates coarse features onto `fine` points from the
/// `min(3, |coarse|)` nearest coarse points with weights `1/(d² + ε)`, normalized.
pub fn interpolation_weights(coarse: &[[f64; 3]], fine: &[[f64; 3]]) -> RowMix {
    assert!(!coarse.is_empty(), "interpolation needs at least one coarse point");
    let k = INTERP_NEIGHBORS.min(coarse.len());
    let index = SpatialIndex::build(coarse.to_vec());
    let mut idx = Vec::with_capacity(fine.len() * k);
    let mut w = Vec::with_capacity(fine.len() * k);
    for p in fine {
        let nn = index.knn(p, k);
        let raw: Vec<f64> = nn.iter().map(|n| 1.0 / (n.dist2 + INTERP_EPS)).collect();
        let total: f64 = raw.iter().sum();
        for (n, r) in nn.iter().zip(raw) {
            idx.push(n.index);
            w.push(r / total);
        }
    }
    RowMix::weighted(k, idx, w)
}

/// Plain interpolation of `coarse_feats` (rows parallel to `coarse`) onto `fine`.
pub fn interpolate(coarse: &[[f64; 3]], coarse_feats: &Tensor, fine: &[[f64; 3]]) -> Tensor {
    assert_eq!(coarse.len(), coarse_feats.rows());
    let mix = interpolation_weights(coarse, fine);
    let c = coarse_feats.cols();
    let mut out = vec![0.0; fine.len() * c];
    for r in 0..fine.len() {
        for f in 0..mix.fan_in {
            let slot = r * mix.fan_in + f;
            let w = mix.weight.as_ref().expect("weighted")[slot];
            for (o, x) in out[r * c..(r + 1) * c].iter_mut().zip(coarse_feats.row(mix.index[slot])) {
                *o += w * x;
            }
        }
    }
    Tensor::new(fine.len(), c, out)
}
